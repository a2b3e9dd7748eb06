//! The hybrid analog-digital forward pass and its exact reverse-mode
//! backward: temperature-relaxed atom states, the coupled-dipole
//! measurement, frozen-draw noise, per-sample normalization and the dense
//! classifier, with gradients for every trainable value.

use std::rc::Rc;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::em::{
    measure, measurement_pattern_cogradient, pattern_states_gradient, trace_measurement,
    AtomStates, DmaAssembly, MeasurementTrace, SceneReflectivity,
};
use crate::error::{Error, Result};
use crate::noise::{self, NoiseDraw, NoiseSpec};

use super::ann::{AnnCache, AnnGrads, AnnParams};

pub const NORMALIZE_EPS: f64 = 1e-9;

/// Trainable physical weights: unconstrained logits per (measurement, atom)
/// for both antennas, plus the sigmoid temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// M x N_a.
    pub logits_tx: Array2<f64>,
    pub logits_rx: Array2<f64>,
    pub temperature: f64,
}

impl PhysicalParams {
    pub fn init_uniform(
        n_measurements: usize,
        n_atoms: usize,
        half_width: f64,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let draw = |rng: &mut dyn FnMut() -> f64| {
            Array2::from_shape_fn((n_measurements, n_atoms), |_| rng())
        };
        let mut sample = || rng.random_range(-half_width..half_width);
        let logits_tx = draw(&mut sample);
        let logits_rx = draw(&mut sample);
        Self {
            logits_tx,
            logits_rx,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.logits_tx.dim() != self.logits_rx.dim() {
            return Err(Error::ShapeMismatch(format!(
                "tx logits {:?} vs rx logits {:?}",
                self.logits_tx.dim(),
                self.logits_rx.dim()
            )));
        }
        if self.logits_tx.nrows() == 0 {
            return Err(Error::InvalidArgument("need at least one measurement".into()));
        }
        Ok(())
    }

    pub fn n_measurements(&self) -> usize {
        self.logits_tx.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.logits_tx.ncols()
    }
}

/// Sigmoid relaxation s = 1 / (1 + exp(-tau z)); strictly inside (0, 1) and
/// monotone in z.
pub fn relax_states(logits: &[f64], temperature: f64) -> AtomStates {
    AtomStates(
        logits
            .iter()
            .map(|&z| 1.0 / (1.0 + (-temperature * z).exp()))
            .collect(),
    )
}

/// ds/dz for the relaxation: tau * s * (1 - s).
pub fn relax_derivative(state: f64, temperature: f64) -> f64 {
    temperature * state * (1.0 - state)
}

/// The full trainable system: physical and digital parameters plus the
/// fixed antenna assemblies, noise model and scene grid.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub physical: PhysicalParams,
    pub digital: AnnParams,
    pub tx: DmaAssembly,
    pub rx: DmaAssembly,
    pub noise: NoiseSpec,
}

impl HybridModel {
    pub fn validate(&self) -> Result<()> {
        self.physical.validate()?;
        self.digital.validate()?;
        self.noise.validate()?;
        if self.physical.n_atoms() != self.tx.atom_count()
            || self.physical.n_atoms() != self.rx.atom_count()
        {
            return Err(Error::ShapeMismatch(format!(
                "logits cover {} atoms, antennas have {}/{}",
                self.physical.n_atoms(),
                self.tx.atom_count(),
                self.rx.atom_count()
            )));
        }
        if self.digital.input_width() != 2 * self.physical.n_measurements() {
            return Err(Error::ShapeMismatch(format!(
                "classifier input width {} vs 2M = {}",
                self.digital.input_width(),
                2 * self.physical.n_measurements()
            )));
        }
        if self.tx.grid != self.rx.grid {
            return Err(Error::ShapeMismatch(
                "TX and RX assemblies target different grids".into(),
            ));
        }
        Ok(())
    }

    pub fn n_measurements(&self) -> usize {
        self.physical.n_measurements()
    }
}

/// Per-measurement electromagnetic intermediates for one relaxed (or
/// binary) configuration snapshot. Scene-independent: shared across every
/// sample evaluated under the same parameters.
#[derive(Debug, Clone)]
pub struct MeasurementStack {
    pub traces: Vec<MeasurementTrace>,
}

impl MeasurementStack {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

/// Relax every measurement's logits at the current temperature and run the
/// electromagnetic forward for both antennas.
pub fn build_stack(model: &HybridModel) -> Result<MeasurementStack> {
    let tau = model.physical.temperature;
    let traces = (0..model.n_measurements())
        .map(|i| {
            let states_tx = relax_states(model.physical.logits_tx.row(i).as_slice().unwrap(), tau);
            let states_rx = relax_states(model.physical.logits_rx.row(i).as_slice().unwrap(), tau);
            trace_measurement(&model.tx, &model.rx, &states_tx, &states_rx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementStack { traces })
}

/// Stack for hard binary configurations (exact 0/1 states).
pub fn build_binary_stack(
    tx: &DmaAssembly,
    rx: &DmaAssembly,
    configs_tx: &[Vec<bool>],
    configs_rx: &[Vec<bool>],
) -> Result<MeasurementStack> {
    if configs_tx.len() != configs_rx.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} TX configurations vs {} RX",
            configs_tx.len(),
            configs_rx.len()
        )));
    }
    let traces = configs_tx
        .iter()
        .zip(configs_rx.iter())
        .map(|(ctx, crx)| {
            trace_measurement(
                tx,
                rx,
                &AtomStates::from_bits(ctx),
                &AtomStates::from_bits(crx),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementStack { traces })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCache {
    pub mean: f64,
    pub std: f64,
}

/// Per-sample normalization to zero mean, unit (population) standard
/// deviation, with an epsilon guard for constant vectors.
pub fn normalize_sample(v: &Array1<f64>) -> (Array1<f64>, NormCache) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let denom = std + NORMALIZE_EPS;
    let out = v.mapv(|x| (x - mean) / denom);
    (out, NormCache { mean, std })
}

/// Backward through the normalization: gradient with respect to the raw
/// vector given the gradient on the normalized output. At the constant
/// vector the std term takes its (zero) subgradient.
pub fn normalize_backward(g: &Array1<f64>, v: &Array1<f64>, cache: &NormCache) -> Array1<f64> {
    let n = v.len() as f64;
    let denom = cache.std + NORMALIZE_EPS;
    let g_mean = g.sum() / n;
    if cache.std == 0.0 {
        return g.mapv(|gi| (gi - g_mean) / denom);
    }
    let centered_dot = g
        .iter()
        .zip(v.iter())
        .map(|(gi, vi)| gi * (vi - cache.mean))
        .sum::<f64>();
    let coeff = centered_dot / (n * cache.std * denom * denom);
    Array1::from_shape_fn(v.len(), |i| (g[i] - g_mean) / denom - (v[i] - cache.mean) * coeff)
}

/// Everything the backward pass needs from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub stack: Rc<MeasurementStack>,
    pub scene: SceneReflectivity,
    pub clean: Vec<Complex64>,
    pub draws: Vec<NoiseDraw>,
    pub noisy: Vec<Complex64>,
    pub raw_features: Array1<f64>,
    pub norm: NormCache,
    pub features: Array1<f64>,
    pub ann: AnnCache,
    pub probs: Array1<f64>,
}

/// Where the per-measurement noise comes from: fresh draws from an RNG or
/// a frozen set (finite differences, replays).
pub enum NoisePlan<'a> {
    Fresh(&'a mut dyn rand::RngCore),
    Frozen(&'a [NoiseDraw]),
}

/// Full forward pass: relaxed physical measurement of the scene, fresh
/// noise, I/Q stacking [Re m_1..Re m_M, Im m_1..Im m_M], per-sample
/// normalization and the classifier. Returns class probabilities (summing
/// to one) and the cache for `backward`.
pub fn forward(
    model: &HybridModel,
    scene: &SceneReflectivity,
    rng: &mut impl Rng,
) -> Result<(Array1<f64>, ForwardCache)> {
    model.validate()?;
    let stack = Rc::new(build_stack(model)?);
    forward_with_stack(model, stack, scene, NoisePlan::Fresh(rng))
}

/// Forward pass over a prebuilt measurement stack (shared across a batch or
/// an evaluation run).
pub fn forward_with_stack(
    model: &HybridModel,
    stack: Rc<MeasurementStack>,
    scene: &SceneReflectivity,
    noise_plan: NoisePlan<'_>,
) -> Result<(Array1<f64>, ForwardCache)> {
    let m_count = stack.len();
    let mut clean = Vec::with_capacity(m_count);
    for trace in &stack.traces {
        clean.push(measure(&trace.pattern, scene)?);
    }
    let draws: Vec<NoiseDraw> = match noise_plan {
        NoisePlan::Fresh(rng) => clean
            .iter()
            .map(|_| noise::sample_draw(&model.noise, rng))
            .collect(),
        NoisePlan::Frozen(draws) => {
            if draws.len() != m_count {
                return Err(Error::ShapeMismatch(format!(
                    "{} frozen draws for {m_count} measurements",
                    draws.len()
                )));
            }
            draws.to_vec()
        }
    };
    let noisy: Vec<Complex64> = clean
        .iter()
        .zip(draws.iter())
        .map(|(&m, &d)| noise::perturb(m, &model.noise, d))
        .collect();
    let mut raw = Array1::zeros(2 * m_count);
    for (i, m) in noisy.iter().enumerate() {
        raw[i] = m.re;
        raw[m_count + i] = m.im;
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("measurement vector".into()));
    }
    let (features, norm) = normalize_sample(&raw);
    let (probs, ann_cache) = model.digital.forward(&features)?;
    Ok((
        probs.clone(),
        ForwardCache {
            stack,
            scene: scene.clone(),
            clean,
            draws,
            noisy,
            raw_features: raw,
            norm,
            features,
            ann: ann_cache,
            probs,
        },
    ))
}

/// Gradients for every trainable value of the hybrid model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub logits_tx: Array2<f64>,
    pub logits_rx: Array2<f64>,
    pub ann: AnnGrads,
}

impl Gradients {
    pub fn zeros_like(model: &HybridModel) -> Self {
        Self {
            logits_tx: Array2::zeros(model.physical.logits_tx.dim()),
            logits_rx: Array2::zeros(model.physical.logits_rx.dim()),
            ann: AnnGrads::zeros_like(&model.digital),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.logits_tx.mapv_inplace(|v| v * factor);
        self.logits_rx.mapv_inplace(|v| v * factor);
        self.ann.scale(factor);
    }
}

/// Exact reverse-mode gradients of the cross-entropy loss at `label` with
/// respect to every trainable value, through the classifier, the
/// normalization, the frozen noise draw, the measurement integral, the
/// field product, the radiation sums and the coupled dipole solve.
pub fn backward(model: &HybridModel, cache: &ForwardCache, label: u8) -> Result<Gradients> {
    let m_count = cache.stack.len();
    let (ann_grads, x_bar) = model.digital.backward(&cache.ann, label);
    let v_bar = normalize_backward(&x_bar, &cache.raw_features, &cache.norm);

    let mut grads = Gradients {
        logits_tx: Array2::zeros(model.physical.logits_tx.dim()),
        logits_rx: Array2::zeros(model.physical.logits_rx.dim()),
        ann: ann_grads,
    };
    let tau = model.physical.temperature;
    for i in 0..m_count {
        let (d_re, d_im) = noise::derivative_factors(cache.clean[i], &model.noise, cache.draws[i]);
        let m_bar = Complex64::new(v_bar[i] * d_re, v_bar[m_count + i] * d_im);
        if m_bar.re == 0.0 && m_bar.im == 0.0 {
            continue;
        }
        let pattern_bar = measurement_pattern_cogradient(&cache.scene, m_bar);
        let trace = &cache.stack.traces[i];
        let (s_bar_tx, s_bar_rx) =
            pattern_states_gradient(&model.tx, &model.rx, trace, &pattern_bar)?;
        for (k, &sb) in s_bar_tx.iter().enumerate() {
            grads.logits_tx[[i, k]] =
                sb * relax_derivative(trace.states_tx.values()[k], tau);
        }
        for (k, &sb) in s_bar_rx.iter().enumerate() {
            grads.logits_rx[[i, k]] =
                sb * relax_derivative(trace.states_rx.values()[k], tau);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{default_wavelength, random_layout, EmModel, SceneGrid};
    use crate::pipeline::loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relax_midpoint_and_saturation() {
        let s = relax_states(&[0.0], 3.7);
        assert_eq!(s.values()[0], 0.5);
        let s = relax_states(&[1.0], 50.0);
        assert!(s.values()[0] > 0.999);
        let s = relax_states(&[-1.0], 50.0);
        assert!(s.values()[0] < 0.001);
    }

    #[test]
    fn relax_is_monotone_and_interior() {
        let tau = 2.5;
        let s = relax_states(&[-4.0, -1.0, 0.0, 1.0, 4.0], tau);
        let v = s.values();
        for w in v.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn relax_derivative_matches_finite_differences() {
        let tau = 1.7;
        let step = 1e-6;
        for &z in &[-2.0, -0.3, 0.0, 0.8, 3.0] {
            let s = relax_states(&[z], tau).values()[0];
            let analytic = relax_derivative(s, tau);
            let up = relax_states(&[z + step], tau).values()[0];
            let dn = relax_states(&[z - step], tau).values()[0];
            let fd = (up - dn) / (2.0 * step);
            assert!(
                (analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()),
                "z={z}: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn normalize_examples() {
        let (out, _) = normalize_sample(&Array1::from_vec(vec![1.0, -1.0]));
        assert!((out[0] - 1.0).abs() <= 1e-8);
        assert!((out[1] + 1.0).abs() <= 1e-8);

        let (out, cache) = normalize_sample(&Array1::from_elem(7, 3.25));
        assert!(out.iter().all(|&x| x == 0.0));
        assert_eq!(cache.std, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Array1::from_shape_fn(300, |_| rng.random_range(-5.0..5.0));
        let (out, _) = normalize_sample(&v);
        let mean = out.sum() / 300.0;
        let std = (out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 300.0).sqrt();
        assert!(mean.abs() <= 1e-12);
        assert!((std - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Array1::from_shape_fn(8, |_| rng.random_range(-2.0..2.0));
        let g = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let (_, cache) = normalize_sample(&v);
        let grad = normalize_backward(&g, &v, &cache);
        // Scalar objective sum(g .* normalize(v)).
        let eval = |v: &Array1<f64>| {
            let (out, _) = normalize_sample(v);
            g.iter().zip(out.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let step = 1e-7;
        for i in 0..8 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += step;
            vm[i] -= step;
            let fd = (eval(&vp) - eval(&vm)) / (2.0 * step);
            assert!(
                (grad[i] - fd).abs() <= 1e-5 * grad[i].abs().max(fd.abs()) + 1e-9,
                "coord {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    fn tiny_model(seed: u64, noise: NoiseSpec) -> (HybridModel, SceneReflectivity) {
        let lambda = default_wavelength();
        let em = EmModel::default();
        let grid = SceneGrid::new(6, 6, lambda / 2.0, 20.0 * lambda).unwrap();
        let n_atoms = 5;
        let layout_tx = random_layout(seed, n_atoms, 5.0 * lambda, lambda / 3.0).unwrap();
        let layout_rx = random_layout(seed + 1, n_atoms, 5.0 * lambda, lambda / 3.0).unwrap();
        let tx = DmaAssembly::new(layout_tx, em.clone(), grid.clone()).unwrap();
        let rx = DmaAssembly::new(layout_rx, em, grid.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let m = 2usize;
        let physical = PhysicalParams::init_uniform(m, n_atoms, 0.5, 1.4, &mut rng);
        let digital = AnnParams::init(&[2 * m, 9, 10], &mut rng).unwrap();
        let scene = SceneReflectivity::new(
            grid.clone(),
            ndarray::Array2::from_shape_fn((6, 6), |_| rng.random_range(0.0..1.0)),
        )
        .unwrap();
        (
            HybridModel {
                physical,
                digital,
                tx,
                rx,
                noise,
            },
            scene,
        )
    }

    #[test]
    fn forward_is_deterministic_without_noise() {
        let (model, scene) = tiny_model(3, NoiseSpec::none());
        let mut rng1 = ChaCha8Rng::seed_from_u64(10);
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let (p1, _) = forward(&model, &scene, &mut rng1).unwrap();
        let (p2, _) = forward(&model, &scene, &mut rng2).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn forward_probabilities_sum_to_one() {
        for noise in [
            NoiseSpec::none(),
            NoiseSpec::signal_independent(1.0, 1e-7).unwrap(),
            NoiseSpec::signal_dependent(0.5).unwrap(),
        ] {
            let (model, scene) = tiny_model(4, noise);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let (probs, _) = forward(&model, &scene, &mut rng).unwrap();
            assert!((probs.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_matches_layer_recomputation() {
        let (model, scene) = tiny_model(5, NoiseSpec::none());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (probs, cache) = forward(&model, &scene, &mut rng).unwrap();
        // Recompute the pre-activations layer by layer from the cached
        // normalized features and compare the softmax output.
        let mut a = cache.features.clone();
        let last = model.digital.layers.len() - 1;
        for (i, layer) in model.digital.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&a) + &layer.biases;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        let recomputed = super::super::ann::softmax(&a);
        for (p, q) in probs.iter().zip(recomputed.iter()) {
            assert!((p - q).abs() <= 1e-14);
        }
    }

    #[test]
    fn backward_full_gradient_matches_finite_differences() {
        // Physical and digital coordinates for all three noise kinds, with
        // frozen draws.
        for (seed, noise) in [
            (21u64, NoiseSpec::none()),
            (22, NoiseSpec::signal_independent(1.0, 1e-7).unwrap()),
            (23, NoiseSpec::signal_dependent(0.7).unwrap()),
        ] {
            let (mut model, scene) = tiny_model(seed, noise);
            let label = 3u8;
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
            let (_, cache) = forward(&model, &scene, &mut rng).unwrap();
            let draws = cache.draws.clone();
            let grads = backward(&model, &cache, label).unwrap();

            let eval = |model: &HybridModel| {
                let stack = Rc::new(build_stack(model).unwrap());
                let (probs, _) =
                    forward_with_stack(model, stack, &scene, NoisePlan::Frozen(&draws)).unwrap();
                loss(&probs, label).unwrap()
            };
            let step = 1e-6;
            for (r, c) in [(0usize, 0usize), (0, 3), (1, 2), (1, 4)] {
                for which in 0..2 {
                    let orig = if which == 0 {
                        model.physical.logits_tx[[r, c]]
                    } else {
                        model.physical.logits_rx[[r, c]]
                    };
                    let set = |model: &mut HybridModel, v: f64| {
                        if which == 0 {
                            model.physical.logits_tx[[r, c]] = v;
                        } else {
                            model.physical.logits_rx[[r, c]] = v;
                        }
                    };
                    set(&mut model, orig + step);
                    let up = eval(&model);
                    set(&mut model, orig - step);
                    let dn = eval(&model);
                    set(&mut model, orig);
                    let fd = (up - dn) / (2.0 * step);
                    let a = if which == 0 {
                        grads.logits_tx[[r, c]]
                    } else {
                        grads.logits_rx[[r, c]]
                    };
                    assert!(
                        (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-10,
                        "noise {:?} logits[{which}][{r},{c}]: {a:e} vs {fd:e}",
                        model.noise.kind
                    );
                }
            }
            // A few digital coordinates.
            for (li, r, c) in [(0usize, 0usize, 1usize), (1, 5, 3)] {
                let orig = model.digital.layers[li].weights[[r, c]];
                model.digital.layers[li].weights[[r, c]] = orig + step;
                let up = eval(&model);
                model.digital.layers[li].weights[[r, c]] = orig - step;
                let dn = eval(&model);
                model.digital.layers[li].weights[[r, c]] = orig;
                let fd = (up - dn) / (2.0 * step);
                let a = grads.ann.layers[li].0[[r, c]];
                assert!(
                    (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()) + 1e-10,
                    "ann layer {li} [{r},{c}]: {a:e} vs {fd:e}"
                );
            }
        }
    }

    #[test]
    fn backward_zero_when_probability_saturated() {
        // Rig the classifier so the labeled class saturates: loss clamps to
        // zero and all gradients vanish.
        let (mut model, scene) = tiny_model(31, NoiseSpec::none());
        let last = model.digital.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.biases.fill(-60.0);
        last.biases[2] = 60.0;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (probs, cache) = forward(&model, &scene, &mut rng).unwrap();
        assert!(probs[2] > 1.0 - 1e-12);
        let grads = backward(&model, &cache, 2).unwrap();
        assert!(grads.logits_tx.iter().all(|&g| g == 0.0));
        assert!(grads.logits_rx.iter().all(|&g| g == 0.0));
        assert!(grads
            .ann
            .layers
            .iter()
            .all(|(w, b)| w.iter().all(|&v| v == 0.0) && b.iter().all(|&v| v == 0.0)));
    }
}
