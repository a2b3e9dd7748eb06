//! Fully-connected classifier head: dense layers with rectified-linear
//! hidden activations, a softmax output and exact reverse-mode gradients.
//! Batched variants run the whole minibatch through matrix products.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOSS_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// out x in.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

/// Digital parameters: the dense stack. Widths chain input -> hidden... ->
/// class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnParams {
    pub layers: Vec<DenseLayer>,
}

impl AnnParams {
    /// Symmetric uniform fan-in-scaled initialization: weights and biases of
    /// each layer drawn from U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "classifier needs at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("zero-width classifier layer".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                DenseLayer {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        rng.random_range(-bound..bound)
                    }),
                    biases: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("classifier has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.nrows() != layer.biases.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: {} weight rows vs {} biases",
                    layer.weights.nrows(),
                    layer.biases.len()
                )));
            }
            if i > 0 && layer.weights.ncols() != self.layers[i - 1].weights.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} input width {} does not chain from layer {} output {}",
                    layer.weights.ncols(),
                    i - 1,
                    self.layers[i - 1].weights.nrows()
                )));
            }
            if layer.weights.iter().any(|w| !w.is_finite())
                || layer.biases.iter().any(|b| !b.is_finite())
            {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    /// Single-sample forward pass; returns class probabilities and the
    /// activation cache for the backward pass.
    pub fn forward(&self, x: &Array1<f64>) -> Result<(Array1<f64>, AnnCache)> {
        if x.len() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs for classifier width {}",
                x.len(),
                self.input_width()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&a) + &layer.biases;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z.clone());
            a = z;
        }
        let probs = softmax(&a);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("classifier probabilities".into()));
        }
        Ok((
            probs.clone(),
            AnnCache {
                activations,
                probs,
            },
        ))
    }

    /// Single-sample backward pass from the cross-entropy loss at `label`.
    /// Returns parameter gradients and the gradient with respect to the
    /// classifier input.
    pub fn backward(&self, cache: &AnnCache, label: u8) -> (AnnGrads, Array1<f64>) {
        let mut g = loss_logit_gradient(&cache.probs, label);
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = self
            .layers
            .iter()
            .map(|l| {
                (
                    Array2::zeros(l.weights.dim()),
                    Array1::zeros(l.biases.len()),
                )
            })
            .collect();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.activations[i];
            for (r, &gr) in g.iter().enumerate() {
                if gr != 0.0 {
                    let mut row = grads[i].0.row_mut(r);
                    row.scaled_add(gr, input);
                }
            }
            grads[i].1.assign(&g);
            let mut back = self.layers[i].weights.t().dot(&g);
            if i > 0 {
                // Gate by the rectifier: post-activation > 0 iff pre > 0.
                for (b, &a) in back.iter_mut().zip(cache.activations[i].iter()) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            g = back;
        }
        (AnnGrads { layers: grads }, g)
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<(Array2<f64>, AnnBatchCache)> {
        if x.ncols() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs for classifier width {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.biases;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z.clone());
            a = z;
        }
        let probs = softmax_rows(&a);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("classifier probabilities".into()));
        }
        Ok((
            probs.clone(),
            AnnBatchCache {
                activations,
                probs,
            },
        ))
    }

    /// Batched backward pass; gradients are summed over the batch. Returns
    /// parameter gradients and per-sample input gradients.
    pub fn backward_batch(&self, cache: &AnnBatchCache, labels: &[u8]) -> (AnnGrads, Array2<f64>) {
        let batch = cache.probs.nrows();
        debug_assert_eq!(batch, labels.len());
        let mut g = Array2::zeros(cache.probs.dim());
        for (s, &label) in labels.iter().enumerate() {
            let row = loss_logit_gradient(&cache.probs.row(s).to_owned(), label);
            g.row_mut(s).assign(&row);
        }
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for _ in &self.layers {
            grads.push((Array2::zeros((0, 0)), Array1::zeros(0)));
        }
        for i in (0..self.layers.len()).rev() {
            let input = &cache.activations[i];
            grads[i] = (g.t().dot(input), g.sum_axis(Axis(0)));
            let mut back = g.dot(&self.layers[i].weights);
            if i > 0 {
                for (b, &a) in back.iter_mut().zip(cache.activations[i].iter()) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            g = back;
        }
        (AnnGrads { layers: grads }, g)
    }
}

#[derive(Debug, Clone)]
pub struct AnnCache {
    /// activations[0] is the input; activations[i+1] the (post-rectifier)
    /// output of layer i, pre-softmax for the last layer.
    pub activations: Vec<Array1<f64>>,
    pub probs: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AnnBatchCache {
    pub activations: Vec<Array2<f64>>,
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnGrads {
    /// Per layer: (weight gradient, bias gradient).
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl AnnGrads {
    pub fn zeros_like(params: &AnnParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weights.dim()),
                        Array1::zeros(l.biases.len()),
                    )
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &AnnGrads) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in self.layers.iter_mut() {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }
}

pub fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = z.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Cross-entropy -log(p_label + guard), clamped at zero.
pub fn loss(probs: &Array1<f64>, label: u8) -> Result<f64> {
    let p = probs.len();
    if (label as usize) >= p {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside 0..{p}"
        )));
    }
    Ok((-(probs[label as usize] + LOSS_GUARD).ln()).max(0.0))
}

/// Gradient of the guarded cross-entropy with respect to the pre-softmax
/// logits: (p_label / (p_label + guard)) * (probs - onehot). Zero when the
/// loss sits on its clamp.
fn loss_logit_gradient(probs: &Array1<f64>, label: u8) -> Array1<f64> {
    let p_label = probs[label as usize];
    if p_label + LOSS_GUARD >= 1.0 {
        return Array1::zeros(probs.len());
    }
    let scale = p_label / (p_label + LOSS_GUARD);
    let mut g = probs.mapv(|p| scale * p);
    g[label as usize] -= scale;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_ann(seed: u64) -> AnnParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AnnParams::init(&[6, 12, 10], &mut rng).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let ann = small_ann(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = Array1::from_shape_fn(6, |_| rng.random_range(-2.0..2.0));
            let (probs, _) = ann.forward(&x).unwrap();
            assert!((probs.sum() - 1.0).abs() <= 1e-12);
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_probabilities() {
        let mut ann = small_ann(3);
        let last = ann.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.biases.fill(0.0);
        let x = Array1::from_vec(vec![0.3, -0.8, 1.2, 0.0, 2.0, -1.0]);
        let (probs, _) = ann.forward(&x).unwrap();
        for &p in probs.iter() {
            assert!((p - 0.1).abs() <= 1e-15);
        }
    }

    #[test]
    fn loss_values_match_spec_examples() {
        let mut probs = Array1::zeros(10);
        probs[4] = 1.0;
        assert!(loss(&probs, 4).unwrap().abs() <= 1e-12);

        let uniform = Array1::from_elem(10, 0.1);
        assert!((loss(&uniform, 7).unwrap() - 10.0f64.ln()).abs() <= 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Array1::from_shape_fn(10, |_| rng.random_range(0.01..1.0));
        let simplex = &raw / raw.sum();
        let l = loss(&simplex, 3).unwrap();
        assert!((l - (-(simplex[3] + LOSS_GUARD).ln())).abs() <= 1e-15);
    }

    #[test]
    fn zero_upstream_error_gives_zero_gradients() {
        // A probability of one at the label clamps the loss and zeroes
        // every gradient.
        let ann = small_ann(5);
        let probs = {
            let mut p = Array1::zeros(10);
            p[2] = 1.0;
            p
        };
        let cache = AnnCache {
            activations: vec![
                Array1::zeros(6),
                Array1::zeros(12),
                Array1::zeros(10),
            ],
            probs,
        };
        let (grads, input_grad) = ann.backward(&cache, 2);
        assert!(grads
            .layers
            .iter()
            .all(|(w, b)| w.iter().all(|&v| v == 0.0) && b.iter().all(|&v| v == 0.0)));
        assert!(input_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ann = small_ann(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let label = 4u8;
        let (_, cache) = ann.forward(&x).unwrap();
        let (grads, input_grad) = ann.backward(&cache, label);

        let step = 1e-6;
        let eval = |ann: &AnnParams, x: &Array1<f64>| {
            let (probs, _) = ann.forward(x).unwrap();
            loss(&probs, label).unwrap()
        };
        // All weight and bias coordinates.
        for li in 0..ann.layers.len() {
            for r in 0..ann.layers[li].weights.nrows() {
                for c in 0..ann.layers[li].weights.ncols() {
                    let orig = ann.layers[li].weights[[r, c]];
                    ann.layers[li].weights[[r, c]] = orig + step;
                    let up = eval(&ann, &x);
                    ann.layers[li].weights[[r, c]] = orig - step;
                    let dn = eval(&ann, &x);
                    ann.layers[li].weights[[r, c]] = orig;
                    let fd = (up - dn) / (2.0 * step);
                    let a = grads.layers[li].0[[r, c]];
                    assert!(
                        (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()) + 1e-9,
                        "layer {li} w[{r},{c}]: {a} vs {fd}"
                    );
                }
            }
            for b in 0..ann.layers[li].biases.len() {
                let orig = ann.layers[li].biases[b];
                ann.layers[li].biases[b] = orig + step;
                let up = eval(&ann, &x);
                ann.layers[li].biases[b] = orig - step;
                let dn = eval(&ann, &x);
                ann.layers[li].biases[b] = orig;
                let fd = (up - dn) / (2.0 * step);
                let a = grads.layers[li].1[b];
                assert!(
                    (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()) + 1e-9,
                    "layer {li} b[{b}]: {a} vs {fd}"
                );
            }
        }
        // Input gradient.
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let fd = (eval(&ann, &xp) - eval(&ann, &xm)) / (2.0 * step);
            let a = input_grad[i];
            assert!(
                (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()) + 1e-9,
                "input[{i}]: {a} vs {fd}"
            );
        }
    }

    #[test]
    fn batch_paths_match_single_sample_paths() {
        let ann = small_ann(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = 5;
        let x = Array2::from_shape_fn((batch, 6), |_| rng.random_range(-1.5..1.5));
        let labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..10) as u8).collect();

        let (probs_b, cache_b) = ann.forward_batch(&x).unwrap();
        let (grads_b, xbar_b) = ann.backward_batch(&cache_b, &labels);

        let mut grads_sum = AnnGrads::zeros_like(&ann);
        for s in 0..batch {
            let xs = x.row(s).to_owned();
            let (probs_s, cache_s) = ann.forward(&xs).unwrap();
            for k in 0..10 {
                assert!((probs_s[k] - probs_b[[s, k]]).abs() <= 1e-13);
            }
            let (g, xb) = ann.backward(&cache_s, labels[s]);
            grads_sum.add_assign(&g);
            for k in 0..6 {
                assert!((xb[k] - xbar_b[[s, k]]).abs() <= 1e-13);
            }
        }
        for (a, b) in grads_b.layers.iter().zip(grads_sum.layers.iter()) {
            for (x, y) in a.0.iter().zip(b.0.iter()) {
                assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in a.1.iter().zip(b.1.iter()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
