//! The hybrid analog-digital trainable network: sigmoid-relaxed physical
//! weights, the noisy measurement layer, per-sample normalization, a dense
//! classifier, exact reverse-mode gradients through the whole chain, and
//! the annealed training loop with final binarization.

mod ann;
mod checkpoint;
mod forward;
mod train;

pub use ann::{loss, softmax, AnnCache, AnnGrads, AnnParams, DenseLayer};
pub use checkpoint::CHECKPOINT_MAGIC;
pub use forward::{
    backward, build_binary_stack, build_stack, forward, forward_with_stack, normalize_backward,
    normalize_sample, relax_derivative, relax_states, ForwardCache, Gradients, HybridModel,
    MeasurementStack, NoisePlan, NormCache, PhysicalParams, NORMALIZE_EPS,
};
pub use train::{
    accuracy_from_predictions, argmax, binarize, evaluate, random_baseline_logits, train,
    ConfigSequence, EpochLog, TrainConfig, TrainInputs, TrainLog, TrainMode, TrainedModel,
};
