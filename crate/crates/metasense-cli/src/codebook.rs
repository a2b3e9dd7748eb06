//! Codebooks: one trained checkpoint per (noise kind, level) grid point,
//! a CSV manifest, and runtime selection from repeated-measurement noise
//! estimates.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use metasense::error::{Error, Result};
use metasense::noise::{estimate_noise_level, NoiseKind};
use metasense::pipeline::{train, TrainConfig, TrainInputs, TrainMode, TrainedModel};

use crate::runner::{PlanPoint, RunContext};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub kind: String,
    pub level: f64,
    pub path: PathBuf,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Codebook {
    pub entries: Vec<CodebookEntry>,
}

impl Codebook {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("codebook.csv")
    }

    pub fn save_manifest(&self, dir: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(Self::manifest_path(dir))?;
        if self.entries.is_empty() {
            writer.write_record(["kind", "level", "path", "validation_accuracy"])?;
        }
        for entry in &self.entries {
            writer.serialize(entry)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load_manifest(dir: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(Self::manifest_path(dir))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<CodebookEntry>, _>>()
            .map_err(|e| Error::ResultsFormat(format!("malformed codebook manifest: {e}")))?;
        Ok(Self { entries })
    }

    /// Load every checkpoint and check it declares the manifest's noise.
    pub fn verify(&self) -> Result<()> {
        for entry in &self.entries {
            let model = TrainedModel::load(&entry.path)?;
            let kind: NoiseKind = entry.kind.parse()?;
            if model.noise.kind != kind || model.noise.level != entry.level {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {} declares {} level {}, manifest says {} level {}",
                    entry.path.display(),
                    model.noise.kind,
                    model.noise.level,
                    entry.kind,
                    entry.level
                )));
            }
        }
        Ok(())
    }
}

/// Train and checkpoint one model per noise level of the grid; failures are
/// recorded as warnings and the entry skipped. Realization 0 seeds are used
/// throughout.
pub fn build_codebook(
    ctx: &RunContext,
    kind: NoiseKind,
    levels: &[f64],
    m: usize,
    out_dir: &Path,
) -> Result<(Codebook, Vec<String>)> {
    if levels.is_empty() {
        return Err(Error::EmptyInput("codebook level grid".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut codebook = Codebook::default();
    let mut warnings = Vec::new();
    for &level in levels {
        match build_entry(ctx, kind, level, m, out_dir) {
            Ok(entry) => codebook.entries.push(entry),
            Err(e) => warnings.push(format!("codebook point {kind} level {level} failed: {e}")),
        }
    }
    codebook.save_manifest(out_dir)?;
    Ok((codebook, warnings))
}

fn build_entry(
    ctx: &RunContext,
    kind: NoiseKind,
    level: f64,
    m: usize,
    out_dir: &Path,
) -> Result<CodebookEntry> {
    let realization = 0usize;
    let point = PlanPoint {
        mode: TrainMode::Learned,
        m,
        noise_kind: kind,
        train_level: level,
        realization,
    };
    let (layout_tx, layout_rx) = ctx.layouts(realization)?;
    let calibration = match kind {
        NoiseKind::SignalIndependent => ctx.calibration(realization, &layout_tx, &layout_rx)?,
        _ => 0.0,
    };
    let noise = ctx.noise_spec(kind, level, calibration)?;
    let mut config = TrainConfig::new(m, derive_seed(ctx.base_seed, realization, &point.train_role()), TrainMode::Learned);
    config.epochs = ctx.settings.epochs;
    config.batch_size = ctx.settings.batch_size;
    config.learning_rate = ctx.settings.learning_rate;
    config.tau0 = ctx.settings.tau0;
    config.tau_growth = ctx.settings.tau_growth;
    config.patience = ctx.settings.patience;
    config.hidden_widths = ctx.settings.hidden_widths.clone();
    let inputs = TrainInputs {
        train: &ctx.splits.train,
        validation: &ctx.splits.validation,
        layout_tx: &layout_tx,
        layout_rx: &layout_rx,
        em: &ctx.em,
        grid: &ctx.grid,
        noise: &noise,
    };
    let (model, log) = train(&config, &inputs)?;
    let path = out_dir.join(format!("ckpt_{kind}_{level:e}.json"));
    model.save(&path)?;
    Ok(CodebookEntry {
        kind: kind.to_string(),
        level,
        path,
        validation_accuracy: log.best_val_accuracy,
    })
}

/// Estimate the noise level from repeated measurements of a static scene
/// and pick the codebook entry nearest in log-level space; exact ties and
/// non-positive estimates resolve toward the lower level.
pub fn select_from_codebook<'a>(
    codebook: &'a Codebook,
    repeats: &[Complex64],
    kind: NoiseKind,
    calibration: f64,
) -> Result<&'a CodebookEntry> {
    if codebook.entries.is_empty() {
        return Err(Error::EmptyInput("codebook".into()));
    }
    let estimate = estimate_noise_level(repeats, kind, calibration)?;
    let kind_name = kind.to_string();
    let mut candidates: Vec<&CodebookEntry> = codebook
        .entries
        .iter()
        .filter(|e| e.kind == kind_name)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "codebook has no entries for noise kind {kind_name}"
        )));
    }
    candidates.sort_by(|a, b| a.level.total_cmp(&b.level));
    if estimate <= 0.0 {
        return Ok(candidates[0]);
    }
    let log_est = estimate.ln();
    let mut best = candidates[0];
    let mut best_dist = f64::INFINITY;
    for entry in candidates {
        let dist = if entry.level <= 0.0 {
            f64::INFINITY
        } else {
            (entry.level.ln() - log_est).abs()
        };
        // Strict improvement keeps the lower level on exact ties.
        if dist < best_dist {
            best_dist = dist;
            best = entry;
        }
    }
    Ok(best)
}

/// Parse a repeats file: one complex measurement per line as
/// `re im` or `re,im`; blank lines and `#` comments ignored.
pub fn parse_repeats_file(path: &Path) -> Result<Vec<Complex64>> {
    let text = std::fs::read_to_string(path)?;
    let mut repeats = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if parts.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "repeats line {}: expected `re im`, got '{line}'",
                lineno + 1
            )));
        }
        let re: f64 = parts[0].parse().map_err(|_| {
            Error::InvalidArgument(format!("repeats line {}: bad real part", lineno + 1))
        })?;
        let im: f64 = parts[1].parse().map_err(|_| {
            Error::InvalidArgument(format!("repeats line {}: bad imaginary part", lineno + 1))
        })?;
        repeats.push(Complex64::new(re, im));
    }
    Ok(repeats)
}
