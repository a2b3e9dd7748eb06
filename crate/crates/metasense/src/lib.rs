//! Simulator and trainer for a noise-adaptive programmable meta-imager.
//!
//! Two waveguide-fed antennas with 1-bit programmable meta-atoms probe a
//! reflective scene plane. A scalar coupled-dipole model produces one
//! complex measurement per antenna configuration; measurements are corrupted
//! by parametrized noise and fed to a small fully-connected classifier. The
//! binary antenna configurations and the classifier weights are optimized
//! jointly with exact reverse-mode gradients through the entire chain,
//! including the coupled linear solve, using a temperature-annealed sigmoid
//! relaxation of the binary states.
//!
//! Modules:
//! - [`em`]: geometry, the coupled-dipole forward model and its adjoints.
//! - [`noise`]: signal-independent / signal-dependent Gaussian noise,
//!   the rho-unit calibration and a repeated-measurement level estimator.
//! - [`pipeline`]: the hybrid analog-digital network, training loop,
//!   binarization, evaluation and checkpointing.
//! - [`data`]: IDX dataset ingestion, digit-to-scene mapping, splits and
//!   results persistence.
//! - [`metrics`]: illumination overlap/intensity, ON ratio and aggregation.

pub mod data;
pub mod em;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod noise;
pub mod pipeline;

pub use error::{Error, Result};
