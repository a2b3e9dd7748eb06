//! Plain-text key = value configuration files, merged with command-line
//! overrides into an experiment plan, run settings and data paths.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use metasense::error::{Error, Result};
use metasense::noise::NoiseKind;
use metasense::pipeline::TrainMode;

use crate::runner::{DataPaths, ExperimentPlan, RunSettings};

/// Parsed key = value file: `#` starts a comment, keys are
/// case-insensitive, later keys win.
#[derive(Debug, Clone, Default)]
pub struct KeyValueFile {
    values: HashMap<String, String>,
}

impl KeyValueFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "config line {}: expected key = value, got '{raw}'",
                    lineno + 1
                ))
            })?;
            values.insert(key.trim().to_ascii_lowercase(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|item| item.trim())
        .filter(|item| !item.is_empty())
        .map(|item| {
            item.parse::<T>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry '{item}'")))
        })
        .collect()
}

/// Everything a harness run needs, in resolved form.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub plan: ExperimentPlan,
    pub settings: RunSettings,
    pub data: DataPaths,
}

/// Unresolved option set: command-line flags layered over a config file
/// over defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub realizations: Option<usize>,
    pub modes: Option<String>,
    pub m_values: Option<String>,
    pub noise_kind: Option<String>,
    pub train_levels: Option<String>,
    pub test_levels: Option<String>,
    pub jobs: Option<usize>,
    pub epochs: Option<usize>,
}

pub fn resolve(file: &KeyValueFile, overrides: &Overrides) -> Result<HarnessConfig> {
    let take = |flag: &Option<String>, key: &str| -> Option<String> {
        flag.clone()
            .or_else(|| file.get(key).map(|s| s.to_string()))
    };
    let take_path = |flag: &Option<PathBuf>, key: &str| -> Option<PathBuf> {
        flag.clone()
            .or_else(|| file.get(key).map(PathBuf::from))
    };

    let modes_text = take(&overrides.modes, "modes").unwrap_or_else(|| "learned,random".into());
    let modes: Vec<TrainMode> = parse_list(&modes_text, "mode")?;

    let m_text = take(&overrides.m_values, "m_values").unwrap_or_else(|| "1,2,3,5,8,15".into());
    let m_values: Vec<usize> = parse_list(&m_text, "m value")?;

    let kind_text =
        take(&overrides.noise_kind, "noise_kind").unwrap_or_else(|| "signal_independent".into());
    let noise_kind: NoiseKind = kind_text.parse()?;

    let default_levels = match noise_kind {
        NoiseKind::None => "0".to_string(),
        _ => "0.01,0.1,1,10,100".to_string(),
    };
    let train_levels: Vec<f64> = parse_list(
        &take(&overrides.train_levels, "train_levels").unwrap_or(default_levels),
        "train level",
    )?;
    let test_levels: Vec<f64> = match take(&overrides.test_levels, "test_levels") {
        Some(text) => parse_list(&text, "test level")?,
        None => Vec::new(),
    };

    let parse_key = |key: &str, what: &str| -> Result<Option<f64>> {
        match file.get(key) {
            Some(text) => text
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::InvalidArgument(format!("bad {what} '{text}'"))),
            None => Ok(None),
        }
    };

    let plan = ExperimentPlan {
        modes,
        m_values,
        noise_kind,
        train_levels,
        test_levels,
        realizations: overrides
            .realizations
            .or_else(|| file.get("realizations").and_then(|s| s.parse().ok()))
            .unwrap_or(3),
        base_seed: overrides
            .seed
            .or_else(|| file.get("seed").and_then(|s| s.parse().ok()))
            .unwrap_or(1),
        scale: overrides
            .scale
            .or_else(|| file.get("scale").and_then(|s| s.parse().ok()))
            .unwrap_or(0.2),
        out_dir: take_path(&overrides.out, "out").unwrap_or_else(|| PathBuf::from("out")),
    };

    let mut settings = RunSettings::default();
    if let Some(epochs) = overrides
        .epochs
        .or_else(|| file.get("epochs").and_then(|s| s.parse().ok()))
    {
        settings.epochs = epochs;
    }
    if let Some(batch) = file.get("batch_size").and_then(|s| s.parse().ok()) {
        settings.batch_size = batch;
    }
    if let Some(lr) = parse_key("learning_rate", "learning rate")? {
        settings.learning_rate = lr;
    }
    if let Some(tau0) = parse_key("tau0", "tau0")? {
        settings.tau0 = tau0;
    }
    if let Some(growth) = parse_key("tau_growth", "tau growth")? {
        settings.tau_growth = growth;
    }
    if let Some(patience) = file.get("patience").and_then(|s| s.parse().ok()) {
        settings.patience = patience;
    }
    if let Some(hidden) = file.get("hidden_widths") {
        settings.hidden_widths = parse_list(hidden, "hidden width")?;
    }
    if let Some(n_atoms) = file.get("n_atoms").and_then(|s| s.parse().ok()) {
        settings.n_atoms = n_atoms;
    }
    if let Some(draws) = file.get("calibration_draws").and_then(|s| s.parse().ok()) {
        settings.calibration_draws = draws;
    }
    if let Some(draws) = file.get("baseline_draws").and_then(|s| s.parse().ok()) {
        settings.baseline_draws = draws;
    }
    if let Some(flag) = file.get("binarize_scenes") {
        settings.binarize_scenes = matches!(flag.to_ascii_lowercase().as_str(), "true" | "1" | "yes");
    }
    if let Some(jobs) = overrides
        .jobs
        .or_else(|| file.get("jobs").and_then(|s| s.parse().ok()))
    {
        settings.jobs = jobs.max(1);
    }

    let missing = |what: &str| Error::InvalidArgument(format!("missing {what} (flag or config)"));
    let data = DataPaths {
        train_images: take_path(&overrides.mnist_images, "mnist_images")
            .ok_or_else(|| missing("--mnist-images"))?,
        train_labels: take_path(&overrides.mnist_labels, "mnist_labels")
            .ok_or_else(|| missing("--mnist-labels"))?,
        test_images: take_path(&overrides.mnist_test_images, "mnist_test_images")
            .ok_or_else(|| missing("--mnist-test-images"))?,
        test_labels: take_path(&overrides.mnist_test_labels, "mnist_test_labels")
            .ok_or_else(|| missing("--mnist-test-labels"))?,
    };

    Ok(HarnessConfig {
        plan,
        settings,
        data,
    })
}
