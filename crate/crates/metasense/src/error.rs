//! Error type shared across the simulator, trainer and data layers.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// An atom sits on top of the feed or a scene pixel, so a 1/sqrt(d) or
    /// 1/R kernel would blow up.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// The coupled-dipole system is singular or close to it.
    #[error("resonance singularity: condition estimate {cond:.3e} exceeds {limit:.1e}")]
    ResonanceSingularity { cond: f64, limit: f64 },

    /// Rejection sampling could not place the requested atoms.
    #[error("packing infeasible: {rejected} rejected draws while placing atom {atom_index} of {n_atoms}")]
    PackingInfeasible {
        rejected: usize,
        atom_index: usize,
        n_atoms: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Calibration measurements have zero variance, so the rho unit is undefined.
    #[error("degenerate calibration: measured signal variance is zero")]
    DegenerateCalibration,

    #[error("noise estimation needs at least 2 repeats, got {0}")]
    TooFewRepeats(usize),

    /// Signal-dependent estimation with both component means below threshold.
    #[error("noise estimation: all components excluded (component means below {0:.1e})")]
    AllComponentsExcluded(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// IDX parse failure; the message names the offending field.
    #[error("idx parse error: {0}")]
    IdxParse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("results file error: {0}")]
    ResultsFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
