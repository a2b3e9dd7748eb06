//! Measurement-noise models, the rho-unit calibration and a runtime
//! noise-level estimator from repeated measurements.
//!
//! Signal-independent noise adds i.i.d. zero-mean Gaussians of standard
//! deviation rho * sigma_s to the I and Q components, where sigma_s is the
//! calibrated per-component signal standard deviation under uniform-random
//! binary configurations; rho = 1 then corresponds to 0 dB SNR.
//! Signal-dependent noise draws the I and Q perturbations with standard
//! deviations beta * |Re m| and beta * |Im m|.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::em::{AtomStates, SceneReflectivity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    None,
    SignalIndependent,
    SignalDependent,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NoiseKind::None => "none",
            NoiseKind::SignalIndependent => "signal_independent",
            NoiseKind::SignalDependent => "signal_dependent",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(NoiseKind::None),
            "signal_independent" | "signal-independent" | "si" => Ok(NoiseKind::SignalIndependent),
            "signal_dependent" | "signal-dependent" | "sd" => Ok(NoiseKind::SignalDependent),
            other => Err(Error::InvalidArgument(format!(
                "unknown noise kind '{other}'"
            ))),
        }
    }
}

/// Tagged noise model. `level` is rho for signal-independent noise and beta
/// for signal-dependent noise; `calibration` is the per-component signal
/// standard deviation sigma_s and only meaningful for the
/// signal-independent model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub calibration: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            level: 0.0,
            calibration: 0.0,
        }
    }

    pub fn signal_independent(rho: f64, calibration: f64) -> Result<Self> {
        let spec = Self {
            kind: NoiseKind::SignalIndependent,
            level: rho,
            calibration,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn signal_dependent(beta: f64) -> Result<Self> {
        let spec = Self {
            kind: NoiseKind::SignalDependent,
            level: beta,
            calibration: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level.is_finite() && self.level >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise level must be >= 0, got {}",
                self.level
            )));
        }
        if self.kind == NoiseKind::SignalIndependent
            && !(self.calibration.is_finite() && self.calibration > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "signal-independent noise requires calibration > 0, got {}",
                self.calibration
            )));
        }
        Ok(())
    }

    /// Same model at a different level (detuning / sweeps).
    pub fn with_level(self, level: f64) -> Result<Self> {
        let spec = Self { level, ..self };
        spec.validate()?;
        Ok(spec)
    }
}

/// A clean measurement together with its noise-corrupted value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyMeasurement {
    pub clean: Complex64,
    pub noisy: Complex64,
}

/// The standard-normal draws behind one noise application. Kept so that a
/// forward pass can be replayed with frozen noise (finite-difference checks,
/// reparametrized gradients).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseDraw {
    pub u_re: f64,
    pub u_im: f64,
}

/// Draw the standard normals for one measurement. The noiseless model
/// consumes no randomness.
pub fn sample_draw<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> NoiseDraw {
    match spec.kind {
        NoiseKind::None => NoiseDraw::default(),
        _ => NoiseDraw {
            u_re: rng.sample(StandardNormal),
            u_im: rng.sample(StandardNormal),
        },
    }
}

/// Apply a fixed draw to a clean measurement.
pub fn perturb(m: Complex64, spec: &NoiseSpec, draw: NoiseDraw) -> Complex64 {
    match spec.kind {
        NoiseKind::None => m,
        NoiseKind::SignalIndependent => {
            let std = spec.level * spec.calibration;
            Complex64::new(m.re + std * draw.u_re, m.im + std * draw.u_im)
        }
        NoiseKind::SignalDependent => Complex64::new(
            m.re + spec.level * m.re.abs() * draw.u_re,
            m.im + spec.level * m.im.abs() * draw.u_im,
        ),
    }
}

/// Per-component derivative of the noisy value with respect to the clean
/// value under a frozen draw: d(noisy_re)/d(m_re) and d(noisy_im)/d(m_im).
/// Additive draws are constants; the signal-dependent std factors
/// contribute through |Re m| and |Im m|.
pub fn derivative_factors(m: Complex64, spec: &NoiseSpec, draw: NoiseDraw) -> (f64, f64) {
    match spec.kind {
        NoiseKind::None | NoiseKind::SignalIndependent => (1.0, 1.0),
        NoiseKind::SignalDependent => (
            1.0 + spec.level * draw.u_re * m.re.signum_or_zero(),
            1.0 + spec.level * draw.u_im * m.im.signum_or_zero(),
        ),
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Corrupt a clean measurement with a fresh noise realization.
pub fn apply_noise(m: Complex64, spec: &NoiseSpec, rng: &mut impl Rng) -> Result<NoisyMeasurement> {
    spec.validate()?;
    let draw = sample_draw(spec, rng);
    Ok(NoisyMeasurement {
        clean: m,
        noisy: perturb(m, spec, draw),
    })
}

/// Clean-measurement closure used by the calibration: maps a binary TX
/// configuration, a binary RX configuration and a scene to a measurement.
pub type MeasureFn<'a> = dyn FnMut(&AtomStates, &AtomStates, &SceneReflectivity) -> Result<Complex64> + 'a;

/// Calibrate the rho unit: sigma_s such that per-component noise std
/// rho * sigma_s gives signal variance / noise variance = 1 at rho = 1
/// under uniform-random binary configurations and uniformly sampled scenes.
/// Returns sqrt((Var[Re m] + Var[Im m]) / 2) over `n_draws` draws.
pub fn calibrate_rho_unit(
    forward: &mut MeasureFn<'_>,
    scenes: &[SceneReflectivity],
    n_tx_atoms: usize,
    n_rx_atoms: usize,
    n_draws: usize,
    rng_seed: u64,
) -> Result<f64> {
    if n_draws < 100 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 100 draws, got {n_draws}"
        )));
    }
    if scenes.is_empty() {
        return Err(Error::EmptyInput("calibration scene sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut re = Vec::with_capacity(n_draws);
    let mut im = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let tx: Vec<bool> = (0..n_tx_atoms).map(|_| rng.random::<bool>()).collect();
        let rx: Vec<bool> = (0..n_rx_atoms).map(|_| rng.random::<bool>()).collect();
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let m = forward(&AtomStates::from_bits(&tx), &AtomStates::from_bits(&rx), scene)?;
        re.push(m.re);
        im.push(m.im);
    }
    let sigma_sq = (sample_variance(&re) + sample_variance(&im)) / 2.0;
    let sigma = sigma_sq.sqrt();
    // Constant (or all-zero) measurements leave only rounding residue in
    // the variance; compare against the signal's RMS scale.
    let rms = ((re.iter().map(|x| x * x).sum::<f64>() + im.iter().map(|x| x * x).sum::<f64>())
        / (2.0 * n_draws as f64))
        .sqrt();
    if !(sigma > 1e-12 * rms) {
        return Err(Error::DegenerateCalibration);
    }
    Ok(sigma)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

const COMPONENT_MEAN_FLOOR: f64 = 1e-12;

/// Estimate the noise level from repeated measurements of a static scene
/// under a fixed illumination. Signal-independent: pooled per-component
/// sample std divided by the calibration sigma_s. Signal-dependent: mean of
/// per-component std / |mean| ratios, excluding components whose |mean| is
/// below 1e-12.
pub fn estimate_noise_level(
    repeats: &[Complex64],
    kind: NoiseKind,
    calibration: f64,
) -> Result<f64> {
    if repeats.len() < 2 {
        return Err(Error::TooFewRepeats(repeats.len()));
    }
    let re: Vec<f64> = repeats.iter().map(|m| m.re).collect();
    let im: Vec<f64> = repeats.iter().map(|m| m.im).collect();
    match kind {
        NoiseKind::None => Ok(0.0),
        NoiseKind::SignalIndependent => {
            if !(calibration.is_finite() && calibration > 0.0) {
                return Err(Error::InvalidArgument(
                    "signal-independent estimation requires calibration > 0".into(),
                ));
            }
            let pooled = ((sample_variance(&re) + sample_variance(&im)) / 2.0).sqrt();
            Ok(pooled / calibration)
        }
        NoiseKind::SignalDependent => {
            let mut ratios = Vec::with_capacity(2);
            for comp in [&re, &im] {
                let mu = mean(comp).abs();
                if mu >= COMPONENT_MEAN_FLOOR {
                    ratios.push(sample_variance(comp).sqrt() / mu);
                }
            }
            if ratios.is_empty() {
                return Err(Error::AllComponentsExcluded(COMPONENT_MEAN_FLOOR));
            }
            Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_scene() -> SceneReflectivity {
        let grid = crate::em::SceneGrid::new(2, 2, 0.01, 1.0).unwrap();
        SceneReflectivity::zeros(grid)
    }

    #[test]
    fn none_noise_is_identity() {
        let spec = NoiseSpec::none();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Complex64::new(0.3, -0.7);
        let out = apply_noise(m, &spec, &mut rng).unwrap();
        assert_eq!(out.noisy, m);
        assert_eq!(out.clean, m);
    }

    #[test]
    fn signal_dependent_zero_measurement_stays_zero() {
        let spec = NoiseSpec::signal_dependent(3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_noise(Complex64::new(0.0, 0.0), &spec, &mut rng).unwrap();
        assert_eq!(out.noisy, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn signal_dependent_std_law() {
        let spec = NoiseSpec::signal_dependent(0.5).unwrap();
        let m = Complex64::new(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut res = Vec::with_capacity(n);
        let mut ims = Vec::with_capacity(n);
        for _ in 0..n {
            let out = apply_noise(m, &spec, &mut rng).unwrap();
            res.push(out.noisy.re - m.re);
            ims.push(out.noisy.im - m.im);
        }
        let std_re = sample_variance(&res).sqrt();
        let std_im = sample_variance(&ims).sqrt();
        assert!((std_re - 0.5).abs() <= 0.005, "std_re = {std_re}");
        assert_eq!(std_im, 0.0);
    }

    #[test]
    fn signal_independent_requires_calibration() {
        assert!(NoiseSpec::signal_independent(1.0, 0.0).is_err());
        assert!(NoiseSpec::signal_independent(1.0, 2.5).is_ok());
    }

    #[test]
    fn noise_is_unbiased() {
        let n = 100_000usize;
        for spec in [
            NoiseSpec::signal_independent(1.0, 2.0).unwrap(),
            NoiseSpec::signal_dependent(1.5).unwrap(),
        ] {
            let m = Complex64::new(0.8, -0.4);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut res = Vec::with_capacity(n);
            let mut ims = Vec::with_capacity(n);
            for _ in 0..n {
                let out = apply_noise(m, &spec, &mut rng).unwrap();
                res.push(out.noisy.re - m.re);
                ims.push(out.noisy.im - m.im);
            }
            for comp in [&res, &ims] {
                let mu = mean(comp);
                let tol = 3.0 * sample_variance(comp).sqrt() / (n as f64).sqrt();
                assert!(mu.abs() <= tol, "bias {mu} exceeds {tol}");
            }
        }
    }

    #[test]
    fn signal_dependent_noise_scales_with_signal() {
        let spec = NoiseSpec::signal_dependent(0.8).unwrap();
        let n = 50_000;
        let spread = |m: Complex64, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut res = Vec::with_capacity(n);
            for _ in 0..n {
                let out = apply_noise(m, &spec, &mut rng).unwrap();
                res.push(out.noisy.re - m.re);
            }
            sample_variance(&res).sqrt()
        };
        let s1 = spread(Complex64::new(0.5, 0.2), 3);
        let s3 = spread(Complex64::new(1.5, 0.6), 3);
        assert!((s3 / s1 - 3.0).abs() <= 0.05, "ratio {}", s3 / s1);
    }

    #[test]
    fn calibrate_rejects_zero_scenes() {
        let scenes = vec![dummy_scene()];
        let mut forward = |_: &AtomStates, _: &AtomStates, _: &SceneReflectivity| {
            Ok(Complex64::new(0.0, 0.0))
        };
        let err = calibrate_rho_unit(&mut forward, &scenes, 4, 4, 200, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateCalibration));
    }

    #[test]
    fn calibrate_rejects_constant_measurements() {
        let scenes = vec![dummy_scene()];
        let mut forward = |_: &AtomStates, _: &AtomStates, _: &SceneReflectivity| {
            Ok(Complex64::new(0.42, -1.3))
        };
        let err = calibrate_rho_unit(&mut forward, &scenes, 4, 4, 200, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateCalibration));
    }

    #[test]
    fn calibrate_recovers_unit_variance() {
        let scenes = vec![dummy_scene()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut forward = move |_: &AtomStates, _: &AtomStates, _: &SceneReflectivity| {
            Ok(Complex64::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ))
        };
        let sigma = calibrate_rho_unit(&mut forward, &scenes, 4, 4, 10_000, 7).unwrap();
        assert!((sigma - 1.0).abs() <= 0.05, "sigma_s = {sigma}");
    }

    #[test]
    fn estimator_zero_for_identical_repeats() {
        let repeats = vec![Complex64::new(1.0, 2.0); 50];
        let rho = estimate_noise_level(&repeats, NoiseKind::SignalIndependent, 1.0).unwrap();
        assert_eq!(rho, 0.0);
        let beta = estimate_noise_level(&repeats, NoiseKind::SignalDependent, 0.0).unwrap();
        assert_eq!(beta, 0.0);
    }

    #[test]
    fn estimator_needs_two_repeats() {
        let repeats = vec![Complex64::new(1.0, 2.0)];
        assert!(matches!(
            estimate_noise_level(&repeats, NoiseKind::SignalIndependent, 1.0),
            Err(Error::TooFewRepeats(1))
        ));
    }

    #[test]
    fn estimator_recovers_signal_independent_level() {
        let sigma_s = 2.5;
        let spec = NoiseSpec::signal_independent(1.0, sigma_s).unwrap();
        let m = Complex64::new(0.7, -0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let repeats: Vec<Complex64> = (0..10_000)
            .map(|_| apply_noise(m, &spec, &mut rng).unwrap().noisy)
            .collect();
        let rho = estimate_noise_level(&repeats, NoiseKind::SignalIndependent, sigma_s).unwrap();
        assert!((rho - 1.0).abs() <= 0.05, "rho = {rho}");
    }

    #[test]
    fn estimator_recovers_signal_dependent_level() {
        let spec = NoiseSpec::signal_dependent(2.0).unwrap();
        let m = Complex64::new(3.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let repeats: Vec<Complex64> = (0..10_000)
            .map(|_| apply_noise(m, &spec, &mut rng).unwrap().noisy)
            .collect();
        let beta = estimate_noise_level(&repeats, NoiseKind::SignalDependent, 0.0).unwrap();
        assert!((beta - 2.0).abs() <= 0.1, "beta = {beta}");
    }

    #[test]
    fn estimator_excludes_zero_mean_components() {
        // Pure imaginary signal: the real component mean is ~0 and must be
        // excluded; the imaginary ratio alone should drive the estimate.
        let spec = NoiseSpec::signal_dependent(1.0).unwrap();
        let m = Complex64::new(0.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let repeats: Vec<Complex64> = (0..10_000)
            .map(|_| apply_noise(m, &spec, &mut rng).unwrap().noisy)
            .collect();
        let beta = estimate_noise_level(&repeats, NoiseKind::SignalDependent, 0.0).unwrap();
        assert!((beta - 1.0).abs() <= 0.05, "beta = {beta}");
    }

    #[test]
    fn estimator_errors_when_all_components_excluded() {
        let repeats = vec![
            Complex64::new(1e-15, -1e-15),
            Complex64::new(-1e-15, 1e-15),
            Complex64::new(1e-15, 1e-15),
        ];
        assert!(matches!(
            estimate_noise_level(&repeats, NoiseKind::SignalDependent, 0.0),
            Err(Error::AllComponentsExcluded(_))
        ));
    }

    #[test]
    fn derivative_factors_match_reparametrization() {
        let spec = NoiseSpec::signal_dependent(0.5).unwrap();
        let draw = NoiseDraw { u_re: 0.9, u_im: -1.2 };
        let m = Complex64::new(2.0, -3.0);
        let (dre, dim) = derivative_factors(m, &spec, draw);
        // Finite differences through perturb with the frozen draw.
        let h = 1e-7;
        let fd_re = (perturb(Complex64::new(m.re + h, m.im), &spec, draw).re
            - perturb(Complex64::new(m.re - h, m.im), &spec, draw).re)
            / (2.0 * h);
        let fd_im = (perturb(Complex64::new(m.re, m.im + h), &spec, draw).im
            - perturb(Complex64::new(m.re, m.im - h), &spec, draw).im)
            / (2.0 * h);
        assert!((dre - fd_re).abs() <= 1e-6);
        assert!((dim - fd_im).abs() <= 1e-6);
    }
}
