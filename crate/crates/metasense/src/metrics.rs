//! Macroscopic analyses of illumination-pattern sequences: mean pairwise
//! overlap, mean intensity, the random-configuration intensity baseline,
//! the ON ratio of binary configuration sequences, and mean/std aggregation
//! across realizations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::em::{
    AtomStates, DmaAssembly, DmaLayout, EmModel, IlluminationPattern, KahanSum, SceneGrid,
};
use crate::error::{Error, Result};

/// Convention for the pairwise overlap integrand. The magnitude convention
/// integrates |J_i||J_j| and is guaranteed real in [0, 1]; the conjugated
/// convention uses |<J_i, J_j>| with a conjugated inner product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapConvention {
    #[default]
    Magnitude,
    ConjugatedInner,
}

/// Summary metrics of one trained configuration sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceMetrics {
    pub overlap: Option<f64>,
    pub intensity: f64,
    pub intensity_ratio: f64,
    pub on_ratio: f64,
}

fn pattern_norm_sq(pattern: &IlluminationPattern) -> f64 {
    let mut acc = KahanSum::default();
    for j in pattern.values.iter() {
        acc.add(j.norm_sqr());
    }
    pattern.grid.cell_area() * acc.value()
}

fn check_shared_grid(patterns: &[IlluminationPattern]) -> Result<()> {
    let first = &patterns[0].grid;
    for p in &patterns[1..] {
        if &p.grid != first {
            return Err(Error::ShapeMismatch(
                "illumination patterns live on different grids".into(),
            ));
        }
    }
    Ok(())
}

/// Mean pairwise overlap of a sequence of patterns: for each unordered pair,
/// the normalized integral of |J_i||J_j| (or the conjugated inner product),
/// averaged over pairs. Each pair term lies in [0, 1] by Cauchy-Schwarz.
pub fn overlap(patterns: &[IlluminationPattern]) -> Result<f64> {
    overlap_with(patterns, OverlapConvention::Magnitude)
}

pub fn overlap_with(
    patterns: &[IlluminationPattern],
    convention: OverlapConvention,
) -> Result<f64> {
    if patterns.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "overlap needs at least 2 patterns, got {}",
            patterns.len()
        )));
    }
    check_shared_grid(patterns)?;
    let cell = patterns[0].grid.cell_area();
    let norms: Vec<f64> = patterns.iter().map(pattern_norm_sq).collect();
    for (i, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pattern {i} has zero norm; overlap undefined"
            )));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..patterns.len() {
        for j in (i + 1)..patterns.len() {
            let term = match convention {
                OverlapConvention::Magnitude => {
                    let mut acc = KahanSum::default();
                    for (a, b) in patterns[i].values.iter().zip(patterns[j].values.iter()) {
                        acc.add(a.norm() * b.norm());
                    }
                    cell * acc.value()
                }
                OverlapConvention::ConjugatedInner => {
                    let mut re = KahanSum::default();
                    let mut im = KahanSum::default();
                    for (a, b) in patterns[i].values.iter().zip(patterns[j].values.iter()) {
                        let prod = a.conj() * b;
                        re.add(prod.re);
                        im.add(prod.im);
                    }
                    (cell * re.value()).hypot(cell * im.value())
                }
            };
            total += term / (norms[i] * norms[j]).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean illumination intensity: mean over patterns of the integral of |J|^2.
pub fn intensity(patterns: &[IlluminationPattern]) -> Result<f64> {
    if patterns.is_empty() {
        return Err(Error::EmptyInput("intensity over empty pattern list".into()));
    }
    check_shared_grid(patterns)?;
    Ok(patterns.iter().map(pattern_norm_sq).sum::<f64>() / patterns.len() as f64)
}

/// Monte-Carlo mean intensity under uniform-random binary configurations of
/// both antennas; the unit in which learned intensities are reported.
pub fn baseline_intensity(
    layout_tx: &DmaLayout,
    layout_rx: &DmaLayout,
    model: &EmModel,
    grid: &SceneGrid,
    n_draws: usize,
    rng_seed: u64,
) -> Result<f64> {
    if n_draws < 100 {
        return Err(Error::InvalidArgument(format!(
            "baseline intensity needs at least 100 draws, got {n_draws}"
        )));
    }
    let tx = DmaAssembly::new(layout_tx.clone(), model.clone(), grid.clone())?;
    let rx = DmaAssembly::new(layout_rx.clone(), model.clone(), grid.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut acc = KahanSum::default();
    for _ in 0..n_draws {
        let bits_tx: Vec<bool> = (0..tx.atom_count()).map(|_| rng.random::<bool>()).collect();
        let bits_rx: Vec<bool> = (0..rx.atom_count()).map(|_| rng.random::<bool>()).collect();
        let trace = crate::em::trace_measurement(
            &tx,
            &rx,
            &AtomStates::from_bits(&bits_tx),
            &AtomStates::from_bits(&bits_rx),
        )?;
        acc.add(pattern_norm_sq(&trace.pattern));
    }
    let mean = acc.value() / n_draws as f64;
    if mean == 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    Ok(mean)
}

/// Fraction of ON bits over both antennas' configuration sequences.
pub fn on_ratio(configs_tx: &[Vec<bool>], configs_rx: &[Vec<bool>]) -> Result<f64> {
    let total: usize = configs_tx
        .iter()
        .chain(configs_rx.iter())
        .map(|row| row.len())
        .sum();
    if total == 0 {
        return Err(Error::EmptyInput("on_ratio over empty configurations".into()));
    }
    let ones: usize = configs_tx
        .iter()
        .chain(configs_rx.iter())
        .flat_map(|row| row.iter())
        .filter(|&&b| b)
        .count();
    Ok(ones as f64 / total as f64)
}

/// Sample mean and (n-1)-normalized standard deviation; std is zero for a
/// single realization.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("aggregate over empty values".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (values.len() as f64 - 1.0);
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{default_wavelength, illumination, random_layout};
    use ndarray::Array2;
    use num_complex::Complex64;

    fn grid() -> SceneGrid {
        SceneGrid::new(4, 4, 0.015, 0.6).unwrap()
    }

    fn pattern_from(values: Array2<Complex64>) -> IlluminationPattern {
        IlluminationPattern {
            grid: grid(),
            values,
        }
    }

    fn random_pattern(seed: u64) -> IlluminationPattern {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pattern_from(Array2::from_shape_fn((4, 4), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        }))
    }

    #[test]
    fn overlap_of_identical_patterns_is_one() {
        let p = random_pattern(1);
        let o = overlap(&[p.clone(), p]).unwrap();
        assert!((o - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn overlap_of_disjoint_supports_is_zero() {
        let mut a = Array2::zeros((4, 4));
        let mut b = Array2::zeros((4, 4));
        a[[0, 0]] = Complex64::new(1.0, 0.5);
        b[[3, 3]] = Complex64::new(-2.0, 0.1);
        let o = overlap(&[pattern_from(a), pattern_from(b)]).unwrap();
        assert_eq!(o, 0.0);
    }

    #[test]
    fn overlap_matches_direct_pairwise_oracle() {
        let patterns = [random_pattern(2), random_pattern(3), random_pattern(4)];
        let o = overlap(&patterns).unwrap();
        // Brute force over all three pairs.
        let cell = grid().cell_area();
        let norm_sq = |p: &IlluminationPattern| {
            cell * p.values.iter().map(|z| z.norm_sqr()).sum::<f64>()
        };
        let pair = |a: &IlluminationPattern, b: &IlluminationPattern| {
            let num = cell
                * a.values
                    .iter()
                    .zip(b.values.iter())
                    .map(|(x, y)| x.norm() * y.norm())
                    .sum::<f64>();
            num / (norm_sq(a) * norm_sq(b)).sqrt()
        };
        let expected = (pair(&patterns[0], &patterns[1])
            + pair(&patterns[0], &patterns[2])
            + pair(&patterns[1], &patterns[2]))
            / 3.0;
        assert!((o - expected).abs() <= 1e-12);
    }

    #[test]
    fn overlap_requires_two_patterns() {
        assert!(overlap(&[random_pattern(5)]).is_err());
    }

    #[test]
    fn overlap_rejects_zero_pattern() {
        let zero = pattern_from(Array2::zeros((4, 4)));
        assert!(overlap(&[zero, random_pattern(6)]).is_err());
    }

    #[test]
    fn overlap_is_permutation_invariant() {
        let p = [random_pattern(7), random_pattern(8), random_pattern(9)];
        let a = overlap(&p).unwrap();
        let b = overlap(&[p[2].clone(), p[0].clone(), p[1].clone()]).unwrap();
        assert!((a - b).abs() <= 1e-14);
    }

    #[test]
    fn overlap_pair_terms_bounded() {
        for seed in 0..20u64 {
            let o = overlap(&[random_pattern(seed), random_pattern(seed + 100)]).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&o), "overlap {o} out of range");
        }
    }

    #[test]
    fn intensity_of_zero_pattern_is_zero() {
        let zero = pattern_from(Array2::zeros((4, 4)));
        assert_eq!(intensity(&[zero]).unwrap(), 0.0);
    }

    #[test]
    fn intensity_of_unit_magnitude_is_grid_area() {
        let ones = pattern_from(Array2::from_elem((4, 4), Complex64::new(1.0, 0.0)));
        let i = intensity(&[ones]).unwrap();
        let area = grid().cell_area() * 16.0;
        assert!((i - area).abs() <= 1e-12 * area);
    }

    #[test]
    fn intensity_matches_per_pattern_recomputation() {
        let patterns: Vec<_> = (0..5).map(|s| random_pattern(40 + s)).collect();
        let i = intensity(&patterns).unwrap();
        let cell = grid().cell_area();
        let expected = patterns
            .iter()
            .map(|p| cell * p.values.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            / 5.0;
        assert!((i - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn intensity_scaling_and_overlap_invariance() {
        let patterns: Vec<_> = (0..3).map(|s| random_pattern(60 + s)).collect();
        let c = Complex64::new(-1.3, 0.7);
        let scaled: Vec<_> = patterns
            .iter()
            .map(|p| pattern_from(p.values.mapv(|z| z * c)))
            .collect();
        let (i0, i1) = (intensity(&patterns).unwrap(), intensity(&scaled).unwrap());
        assert!((i1 - c.norm_sqr() * i0).abs() <= 1e-12 * i1.abs());
        let (o0, o1) = (overlap(&patterns).unwrap(), overlap(&scaled).unwrap());
        assert!((o1 - o0).abs() <= 1e-12);
    }

    #[test]
    fn baseline_intensity_is_deterministic_and_converged() {
        let lambda = default_wavelength();
        let tx = random_layout(1, 8, 5.0 * lambda, lambda / 3.0).unwrap();
        let rx = random_layout(2, 8, 5.0 * lambda, lambda / 3.0).unwrap();
        let model = EmModel::default();
        let g = SceneGrid::new(6, 6, lambda / 2.0, 20.0 * lambda).unwrap();
        let a = baseline_intensity(&tx, &rx, &model, &g, 400, 9).unwrap();
        let b = baseline_intensity(&tx, &rx, &model, &g, 400, 9).unwrap();
        assert_eq!(a, b);
        let wide = baseline_intensity(&tx, &rx, &model, &g, 4000, 10).unwrap();
        assert!(
            (a - wide).abs() <= 0.05 * wide,
            "400-draw {a} vs 4000-draw {wide}"
        );
    }

    #[test]
    fn on_ratio_counts_bits() {
        let all_on = vec![vec![true; 4]; 3];
        let all_off = vec![vec![false; 4]; 3];
        assert_eq!(on_ratio(&all_on, &all_on).unwrap(), 1.0);
        assert_eq!(on_ratio(&all_off, &all_off).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tx: Vec<Vec<bool>> = (0..5)
            .map(|_| (0..16).map(|_| rng.random()).collect())
            .collect();
        let rx: Vec<Vec<bool>> = (0..5)
            .map(|_| (0..16).map(|_| rng.random()).collect())
            .collect();
        let expected = tx
            .iter()
            .chain(rx.iter())
            .flatten()
            .map(|&b| b as usize)
            .sum::<usize>() as f64
            / 160.0;
        assert_eq!(on_ratio(&tx, &rx).unwrap(), expected);
    }

    #[test]
    fn aggregate_handles_small_samples() {
        assert_eq!(aggregate(&[3.5]).unwrap(), (3.5, 0.0));
        let (mean, std) = aggregate(&[0.0, 2.0]).unwrap();
        assert_eq!(mean, 1.0);
        assert!((std - 2.0f64.sqrt()).abs() <= 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let values: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (mean, std) = aggregate(&values).unwrap();
        let m2 = values.iter().sum::<f64>() / 100.0;
        let v2 = values.iter().map(|v| (v - m2) * (v - m2)).sum::<f64>() / 99.0;
        assert!((mean - m2).abs() <= 1e-12);
        assert!((std - v2.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn illumination_patterns_feed_metrics_end_to_end() {
        // Smoke check wiring real patterns through overlap/intensity.
        let lambda = default_wavelength();
        let tx = random_layout(21, 8, 5.0 * lambda, lambda / 3.0).unwrap();
        let rx = random_layout(22, 8, 5.0 * lambda, lambda / 3.0).unwrap();
        let model = EmModel::default();
        let g = SceneGrid::new(8, 8, lambda / 2.0, 20.0 * lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut patterns = Vec::new();
        for _ in 0..3 {
            let stx: Vec<bool> = (0..8).map(|_| rng.random()).collect();
            let srx: Vec<bool> = (0..8).map(|_| rng.random()).collect();
            patterns.push(
                illumination(
                    &tx,
                    &AtomStates::from_bits(&stx),
                    &rx,
                    &AtomStates::from_bits(&srx),
                    &g,
                    &model,
                )
                .unwrap(),
            );
        }
        let o = overlap(&patterns).unwrap();
        let i = intensity(&patterns).unwrap();
        assert!((0.0..=1.0).contains(&o));
        assert!(i > 0.0);
    }
}
