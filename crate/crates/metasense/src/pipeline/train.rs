//! Mini-batch training of the hybrid model with adaptive moment estimation,
//! temperature annealing, best-validation checkpointing and final
//! binarization, plus argmax evaluation of trained binary models.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayViewMut, Dimension};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{scene_from_digit, LabeledDigit};
use crate::em::{
    measure, pattern_states_gradient, DmaAssembly, DmaLayout, EmModel, SceneGrid,
    SceneReflectivity,
};
use crate::error::{Error, Result};
use crate::noise::{self, NoiseSpec};

use super::ann::AnnParams;
use super::forward::{
    build_binary_stack, build_stack, normalize_backward, normalize_sample, relax_derivative,
    Gradients, HybridModel, MeasurementStack, PhysicalParams,
};

/// Logit magnitude used to freeze random-baseline configurations; saturated
/// at every temperature of the schedule.
const FROZEN_LOGIT: f64 = 25.0;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Jointly optimize physical logits and classifier weights.
    Learned,
    /// Freeze one uniform-random binary configuration per measurement and
    /// train only the classifier.
    RandomBaseline,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Learned => "learned",
            TrainMode::RandomBaseline => "random",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "learned" => Ok(TrainMode::Learned),
            "random" | "random_baseline" | "random-baseline" => Ok(TrainMode::RandomBaseline),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_measurements: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Initial temperature and per-epoch growth factor (> 1).
    pub tau0: f64,
    pub tau_growth: f64,
    pub rng_seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub mode: TrainMode,
    pub hidden_widths: Vec<usize>,
    pub logit_init_half_width: f64,
}

impl TrainConfig {
    pub fn new(n_measurements: usize, rng_seed: u64, mode: TrainMode) -> Self {
        Self {
            n_measurements,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            tau0: 1.0,
            tau_growth: 1.3,
            rng_seed,
            patience: 10,
            mode,
            hidden_widths: vec![256, 128],
            logit_init_half_width: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_measurements == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "n_measurements and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.tau0 > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate and tau0 must be positive".into(),
            ));
        }
        if !(self.tau_growth > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature growth factor must exceed 1, got {}",
                self.tau_growth
            )));
        }
        Ok(())
    }
}

/// Hard binary configuration sequence for both antennas (M x N_a each).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSequence {
    pub tx: Vec<Vec<bool>>,
    pub rx: Vec<Vec<bool>>,
}

/// Threshold the logits: ON iff logit > 0 (a logit of exactly zero maps to
/// OFF).
pub fn binarize(physical: &PhysicalParams) -> ConfigSequence {
    let rows = |logits: &Array2<f64>| {
        logits
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&z| z > 0.0).collect())
            .collect()
    };
    ConfigSequence {
        tx: rows(&physical.logits_tx),
        rx: rows(&physical.logits_rx),
    }
}

/// A trained, binarized model: everything needed to reproduce its
/// measurements and predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub layout_tx: DmaLayout,
    pub layout_rx: DmaLayout,
    pub em: EmModel,
    pub grid: SceneGrid,
    pub configs: ConfigSequence,
    pub ann: AnnParams,
    pub noise: NoiseSpec,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub temperature: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Immutable inputs of one training run.
pub struct TrainInputs<'a> {
    pub train: &'a [LabeledDigit],
    pub validation: &'a [LabeledDigit],
    pub layout_tx: &'a DmaLayout,
    pub layout_rx: &'a DmaLayout,
    pub em: &'a EmModel,
    pub grid: &'a SceneGrid,
    pub noise: &'a NoiseSpec,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable sub-stream seeds: independent streams for init, shuffling, noise
/// and validation.
fn subseed(seed: u64, role: u64, k: u64) -> u64 {
    splitmix64(splitmix64(seed ^ role.wrapping_mul(0xA076_1D64_78BD_642F)) ^ k)
}

const ROLE_INIT: u64 = 1;
const ROLE_SHUFFLE: u64 = 2;
const ROLE_NOISE: u64 = 3;
const ROLE_VALIDATION: u64 = 4;

/// Frozen random-baseline logits: one uniform-random binary configuration
/// per measurement, encoded as saturated logits whose hard threshold
/// recovers exactly the drawn bits.
pub fn random_baseline_logits(
    n_measurements: usize,
    n_atoms: usize,
    rng: &mut impl Rng,
) -> Array2<f64> {
    Array2::from_shape_fn((n_measurements, n_atoms), |_| {
        if rng.random::<bool>() {
            FROZEN_LOGIT
        } else {
            -FROZEN_LOGIT
        }
    })
}

struct AdamState {
    step: usize,
    logits_tx: (Array2<f64>, Array2<f64>),
    logits_rx: (Array2<f64>, Array2<f64>),
    ann: Vec<((Array2<f64>, Array2<f64>), (Array1<f64>, Array1<f64>))>,
}

impl AdamState {
    fn new(model: &HybridModel) -> Self {
        let pair2 = |a: &Array2<f64>| (Array2::zeros(a.dim()), Array2::zeros(a.dim()));
        let pair1 = |a: &Array1<f64>| (Array1::zeros(a.len()), Array1::zeros(a.len()));
        Self {
            step: 0,
            logits_tx: pair2(&model.physical.logits_tx),
            logits_rx: pair2(&model.physical.logits_rx),
            ann: model
                .digital
                .layers
                .iter()
                .map(|l| (pair2(&l.weights), pair1(&l.biases)))
                .collect(),
        }
    }
}

fn adam_update<D: Dimension>(
    mut param: ArrayViewMut<f64, D>,
    grad: &ndarray::Array<f64, D>,
    first: &mut ndarray::Array<f64, D>,
    second: &mut ndarray::Array<f64, D>,
    step: usize,
    lr: f64,
) {
    let t = step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    ndarray::Zip::from(&mut param)
        .and(grad)
        .and(first)
        .and(second)
        .for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
}

fn apply_adam(model: &mut HybridModel, grads: &Gradients, state: &mut AdamState, lr: f64, physical: bool) {
    state.step += 1;
    let t = state.step;
    if physical {
        adam_update(
            model.physical.logits_tx.view_mut(),
            &grads.logits_tx,
            &mut state.logits_tx.0,
            &mut state.logits_tx.1,
            t,
            lr,
        );
        adam_update(
            model.physical.logits_rx.view_mut(),
            &grads.logits_rx,
            &mut state.logits_rx.0,
            &mut state.logits_rx.1,
            t,
            lr,
        );
    }
    for (layer, (grad, moments)) in model
        .digital
        .layers
        .iter_mut()
        .zip(grads.ann.layers.iter().zip(state.ann.iter_mut()))
    {
        adam_update(
            layer.weights.view_mut(),
            &grad.0,
            &mut moments.0 .0,
            &mut moments.0 .1,
            t,
            lr,
        );
        adam_update(
            layer.biases.view_mut(),
            &grad.1,
            &mut moments.1 .0,
            &mut moments.1 .1,
            t,
            lr,
        );
    }
}

fn materialize(digits: &[LabeledDigit], grid: &SceneGrid) -> Result<Vec<(SceneReflectivity, u8)>> {
    digits
        .iter()
        .map(|d| Ok((scene_from_digit(&d.pixels, grid)?, d.label)))
        .collect()
}

/// Forward + backward over one minibatch with a shared measurement stack.
/// Gradients are the mean over the batch; noise draws follow sample order
/// then measurement order.
fn batch_step(
    model: &HybridModel,
    stack: &Rc<MeasurementStack>,
    samples: &[(SceneReflectivity, u8)],
    indices: &[usize],
    rng: &mut ChaCha8Rng,
    compute_physical: bool,
) -> Result<(f64, Gradients)> {
    let m_count = stack.len();
    let b = indices.len();
    let width = 2 * m_count;
    let mut clean = vec![Complex64::default(); b * m_count];
    let mut draws = vec![noise::NoiseDraw::default(); b * m_count];
    let mut raw = Array2::<f64>::zeros((b, width));
    let mut features = Array2::<f64>::zeros((b, width));
    let mut norms = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    for (s, &idx) in indices.iter().enumerate() {
        let (scene, label) = &samples[idx];
        labels.push(*label);
        for i in 0..m_count {
            let mi = measure(&stack.traces[i].pattern, scene)?;
            let draw = noise::sample_draw(&model.noise, rng);
            let noisy = noise::perturb(mi, &model.noise, draw);
            clean[s * m_count + i] = mi;
            draws[s * m_count + i] = draw;
            raw[[s, i]] = noisy.re;
            raw[[s, m_count + i]] = noisy.im;
        }
        let row = raw.row(s).to_owned();
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("measurement vector".into()));
        }
        let (normalized, cache) = normalize_sample(&row);
        features.row_mut(s).assign(&normalized);
        norms.push(cache);
    }

    let (probs, ann_cache) = model.digital.forward_batch(&features)?;
    let mut loss_sum = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        loss_sum += super::ann::loss(&probs.row(s).to_owned(), label)?;
    }
    let (mut ann_grads, x_bar) = model.digital.backward_batch(&ann_cache, &labels);

    let mut grads = Gradients {
        logits_tx: Array2::zeros(model.physical.logits_tx.dim()),
        logits_rx: Array2::zeros(model.physical.logits_rx.dim()),
        ann: {
            ann_grads.scale(1.0 / b as f64);
            ann_grads
        },
    };

    if compute_physical {
        let grid_dim = (model.tx.grid.n_rows, model.tx.grid.n_cols);
        let mut pattern_bars: Vec<Array2<Complex64>> =
            (0..m_count).map(|_| Array2::zeros(grid_dim)).collect();
        let cell = model.tx.grid.cell_area();
        for (s, &idx) in indices.iter().enumerate() {
            let (scene, _) = &samples[idx];
            let v_bar = normalize_backward(&x_bar.row(s).to_owned(), &raw.row(s).to_owned(), &norms[s]);
            for i in 0..m_count {
                let (d_re, d_im) = noise::derivative_factors(
                    clean[s * m_count + i],
                    &model.noise,
                    draws[s * m_count + i],
                );
                let m_bar = Complex64::new(v_bar[i] * d_re, v_bar[m_count + i] * d_im);
                if m_bar.re == 0.0 && m_bar.im == 0.0 {
                    continue;
                }
                ndarray::Zip::from(&mut pattern_bars[i])
                    .and(&scene.values)
                    .for_each(|jb, &sv| {
                        *jb += m_bar * (cell * sv);
                    });
            }
        }
        let tau = model.physical.temperature;
        for i in 0..m_count {
            let trace = &stack.traces[i];
            let (s_bar_tx, s_bar_rx) =
                pattern_states_gradient(&model.tx, &model.rx, trace, &pattern_bars[i])?;
            for (k, &sb) in s_bar_tx.iter().enumerate() {
                grads.logits_tx[[i, k]] =
                    sb * relax_derivative(trace.states_tx.values()[k], tau) / b as f64;
            }
            for (k, &sb) in s_bar_rx.iter().enumerate() {
                grads.logits_rx[[i, k]] =
                    sb * relax_derivative(trace.states_rx.values()[k], tau) / b as f64;
            }
        }
    }

    Ok((loss_sum / b as f64, grads))
}

/// Argmax classification accuracy of a fixed (binary-configuration)
/// measurement stack plus classifier over a labeled sample set, with fresh
/// noise per measurement. Deterministic given the seed.
fn classify_set(
    stack: &MeasurementStack,
    ann: &AnnParams,
    samples: &[(SceneReflectivity, u8)],
    spec: &NoiseSpec,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set".into()));
    }
    let m_count = stack.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut predictions = Vec::with_capacity(samples.len());
    let mut raw = Array1::<f64>::zeros(2 * m_count);
    for (scene, _) in samples {
        for i in 0..m_count {
            let mi = measure(&stack.traces[i].pattern, scene)?;
            let draw = noise::sample_draw(spec, &mut rng);
            let noisy = noise::perturb(mi, spec, draw);
            raw[i] = noisy.re;
            raw[m_count + i] = noisy.im;
        }
        let (features, _) = normalize_sample(&raw);
        let (probs, _) = ann.forward(&features)?;
        predictions.push(argmax(&probs));
    }
    let labels: Vec<u8> = samples.iter().map(|(_, l)| *l).collect();
    accuracy_from_predictions(&predictions, &labels)
}

pub fn argmax(probs: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of predictions equal to their labels.
pub fn accuracy_from_predictions(predictions: &[usize], labels: &[u8]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| **p == **l as usize)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Train the hybrid model: minibatch adaptive-moment updates, temperature
/// tau0 * growth^epoch per epoch, fresh noise on every forward pass,
/// best-validation checkpointing on binarized configurations and early
/// stopping. Returns the binarized best model and the training log.
/// Fully determined by the config seed.
pub fn train(config: &TrainConfig, inputs: &TrainInputs<'_>) -> Result<(TrainedModel, TrainLog)> {
    config.validate()?;
    inputs.noise.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    if inputs.validation.is_empty() && config.epochs > 0 {
        return Err(Error::EmptyInput("validation set".into()));
    }

    let tx = DmaAssembly::new(inputs.layout_tx.clone(), inputs.em.clone(), inputs.grid.clone())?;
    let rx = DmaAssembly::new(inputs.layout_rx.clone(), inputs.em.clone(), inputs.grid.clone())?;
    let n_atoms = tx.atom_count();

    let mut init_rng = ChaCha8Rng::seed_from_u64(subseed(config.rng_seed, ROLE_INIT, 0));
    let physical = match config.mode {
        TrainMode::Learned => PhysicalParams::init_uniform(
            config.n_measurements,
            n_atoms,
            config.logit_init_half_width,
            config.tau0,
            &mut init_rng,
        ),
        TrainMode::RandomBaseline => PhysicalParams {
            logits_tx: random_baseline_logits(config.n_measurements, n_atoms, &mut init_rng),
            logits_rx: random_baseline_logits(config.n_measurements, n_atoms, &mut init_rng),
            temperature: config.tau0,
        },
    };
    let mut widths = vec![2 * config.n_measurements];
    widths.extend_from_slice(&config.hidden_widths);
    widths.push(10);
    let digital = AnnParams::init(&widths, &mut init_rng)?;

    let mut model = HybridModel {
        physical,
        digital,
        tx,
        rx,
        noise: *inputs.noise,
    };
    model.validate()?;

    let train_samples = materialize(inputs.train, inputs.grid)?;
    let val_samples = materialize(inputs.validation, inputs.grid)?;

    let mut adam = AdamState::new(&model);
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_accuracy: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best: Option<(ConfigSequence, AnnParams, f64, usize)> = None;

    for epoch in 0..config.epochs {
        model.physical.temperature = config.tau0 * config.tau_growth.powi(epoch as i32);
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(subseed(config.rng_seed, ROLE_SHUFFLE, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(subseed(config.rng_seed, ROLE_NOISE, epoch as u64));

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let stack = Rc::new(build_stack(&model)?);
            let (loss, grads) = match batch_step(
                &model,
                &stack,
                &train_samples,
                chunk,
                &mut noise_rng,
                config.mode == TrainMode::Learned,
            ) {
                Ok(out) => out,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            epoch_loss += loss;
            batches += 1;
            apply_adam(
                &mut model,
                &grads,
                &mut adam,
                config.learning_rate,
                config.mode == TrainMode::Learned,
            );
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let configs = binarize(&model.physical);
        let val_stack = build_binary_stack(&model.tx, &model.rx, &configs.tx, &configs.rx)?;
        let val_accuracy = classify_set(
            &val_stack,
            &model.digital,
            &val_samples,
            inputs.noise,
            subseed(config.rng_seed, ROLE_VALIDATION, epoch as u64),
        )?;

        log.epochs.push(EpochLog {
            epoch,
            temperature: model.physical.temperature,
            train_loss,
            val_accuracy,
        });

        let improved = best
            .as_ref()
            .map(|(_, _, acc, _)| val_accuracy > *acc)
            .unwrap_or(true);
        if improved {
            best = Some((configs, model.digital.clone(), val_accuracy, epoch));
        } else if let Some((_, _, _, best_epoch)) = &best {
            if epoch - best_epoch >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    let (configs, ann, best_acc, best_epoch) = match best {
        Some((c, a, acc, e)) => (c, a, acc, Some(e)),
        None => (binarize(&model.physical), model.digital.clone(), f64::NAN, None),
    };
    log.best_epoch = best_epoch;
    log.best_val_accuracy = best_acc;

    Ok((
        TrainedModel {
            layout_tx: inputs.layout_tx.clone(),
            layout_rx: inputs.layout_rx.clone(),
            em: inputs.em.clone(),
            grid: inputs.grid.clone(),
            configs,
            ann,
            noise: *inputs.noise,
            train_seed: config.rng_seed,
        },
        log,
    ))
}

impl TrainedModel {
    pub fn validate(&self) -> Result<()> {
        self.layout_tx.validate()?;
        self.layout_rx.validate()?;
        self.em.validate()?;
        self.grid.validate()?;
        self.ann.validate()?;
        self.noise.validate()?;
        if self.configs.tx.len() != self.configs.rx.len() || self.configs.tx.is_empty() {
            return Err(Error::ShapeMismatch(
                "configuration sequences empty or mismatched".into(),
            ));
        }
        if self.ann.input_width() != 2 * self.configs.tx.len() {
            return Err(Error::ShapeMismatch(format!(
                "classifier width {} vs 2M = {}",
                self.ann.input_width(),
                2 * self.configs.tx.len()
            )));
        }
        Ok(())
    }

    pub fn n_measurements(&self) -> usize {
        self.configs.tx.len()
    }

    /// The binary illumination stack of this model.
    pub fn stack(&self) -> Result<MeasurementStack> {
        let tx = DmaAssembly::new(self.layout_tx.clone(), self.em.clone(), self.grid.clone())?;
        let rx = DmaAssembly::new(self.layout_rx.clone(), self.em.clone(), self.grid.clone())?;
        build_binary_stack(&tx, &rx, &self.configs.tx, &self.configs.rx)
    }
}

/// Argmax accuracy of a trained binary model over a labeled digit set with
/// fresh noise per measurement; the noise spec may differ from training.
pub fn evaluate(
    model: &TrainedModel,
    test: &[LabeledDigit],
    spec: &NoiseSpec,
    rng_seed: u64,
) -> Result<f64> {
    model.validate()?;
    spec.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    let samples = materialize(test, &model.grid)?;
    let stack = model.stack()?;
    classify_set(&stack, &model.ann, &samples, spec, rng_seed)
}
