//! Experiment harness for the metasense meta-imager simulator: seeded
//! multi-realization sweeps, detuning matrices, codebook construction and
//! selection, SVG/CSV figure emission, and a synthetic digit corpus
//! generator for environments without the real dataset files.

pub mod codebook;
pub mod config;
pub mod plots;
pub mod runner;
pub mod seeds;
pub mod synth;
