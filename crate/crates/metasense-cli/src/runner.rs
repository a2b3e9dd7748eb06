//! Config-driven experiment runner: seeded multi-realization sweeps over
//! modes, measurement counts and noise levels, with resumable CSV results,
//! per-realization calibration and illumination metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Instant;

use metasense::data::{
    load_mnist, load_results, scene_from_digit, DatasetSplits, LabeledDigit, ResultRow,
};
use metasense::em::{
    default_wavelength, measure, random_layout, trace_measurement, DmaAssembly, DmaLayout,
    EmModel, SceneGrid, SceneReflectivity,
};
use metasense::error::{Error, Result};
use metasense::geom::PlanePose;
use metasense::metrics::{aggregate, baseline_intensity, intensity, on_ratio, overlap};
use metasense::noise::{calibrate_rho_unit, NoiseKind, NoiseSpec};
use metasense::pipeline::{evaluate, train, TrainConfig, TrainInputs, TrainMode, TrainedModel};

use crate::seeds::derive_seed;

/// Knobs below the plan level: training hyperparameters, antenna geometry,
/// calibration effort and worker count.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau0: f64,
    pub tau_growth: f64,
    pub patience: usize,
    pub hidden_widths: Vec<usize>,
    pub n_atoms: usize,
    pub calibration_draws: usize,
    pub calibration_scenes: usize,
    pub baseline_draws: usize,
    pub binarize_scenes: bool,
    pub jobs: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            tau0: 1.0,
            tau_growth: 1.3,
            patience: 10,
            hidden_widths: vec![256, 128],
            n_atoms: 16,
            calibration_draws: 2000,
            calibration_scenes: 512,
            baseline_draws: 512,
            binarize_scenes: false,
            jobs: 1,
        }
    }
}

/// One sweep: which modes, measurement counts, noise kind and levels to
/// run, over how many independent realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub modes: Vec<TrainMode>,
    pub m_values: Vec<usize>,
    pub noise_kind: NoiseKind,
    pub train_levels: Vec<f64>,
    /// Defaults to the train levels when empty.
    pub test_levels: Vec<f64>,
    pub realizations: usize,
    pub base_seed: u64,
    pub scale: f64,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.m_values.is_empty() || self.train_levels.is_empty() {
            return Err(Error::InvalidArgument(
                "plan needs nonempty modes, m_values and train_levels".into(),
            ));
        }
        if self.realizations == 0 {
            return Err(Error::InvalidArgument("realizations must be >= 1".into()));
        }
        if self.noise_kind == NoiseKind::None
            && self.train_levels.iter().chain(&self.test_levels).any(|&l| l != 0.0)
        {
            return Err(Error::InvalidArgument(
                "noiseless plans must use level 0".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_test_levels(&self) -> Vec<f64> {
        if self.test_levels.is_empty() {
            self.train_levels.clone()
        } else {
            self.test_levels.clone()
        }
    }
}

/// MNIST-format file locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Prepared context shared by every plan point: the dataset splits, the
/// scene grid and the electromagnetic model.
pub struct RunContext {
    pub splits: DatasetSplits,
    pub grid: SceneGrid,
    pub em: EmModel,
    pub settings: RunSettings,
    pub base_seed: u64,
    calibration_cache: Mutex<HashMap<usize, f64>>,
    baseline_cache: Mutex<HashMap<usize, f64>>,
}

fn threshold_digits(digits: &mut [LabeledDigit]) {
    for d in digits {
        for p in d.pixels.iter_mut() {
            *p = if *p > 127 { 255 } else { 0 };
        }
    }
}

impl RunContext {
    pub fn prepare(paths: &DataPaths, plan: &ExperimentPlan, settings: RunSettings) -> Result<Self> {
        plan.validate()?;
        let train_file = load_mnist(&paths.train_images, &paths.train_labels)?;
        let test_file = load_mnist(&paths.test_images, &paths.test_labels)?;
        let mut splits = metasense::data::split(
            train_file,
            test_file,
            derive_seed(plan.base_seed, 0, "data-split"),
            plan.scale,
        )?;
        if settings.binarize_scenes {
            threshold_digits(&mut splits.train);
            threshold_digits(&mut splits.validation);
            threshold_digits(&mut splits.test);
        }
        if splits.rows != 28 || splits.cols != 28 {
            return Err(Error::ShapeMismatch(format!(
                "expected 28x28 digits, got {}x{}",
                splits.rows, splits.cols
            )));
        }
        Ok(Self {
            splits,
            grid: SceneGrid::default_28(),
            em: EmModel::default(),
            settings,
            base_seed: plan.base_seed,
            calibration_cache: Mutex::new(HashMap::new()),
            baseline_cache: Mutex::new(HashMap::new()),
        })
    }

    /// TX / RX layouts of realization k: fresh random atom placements on
    /// apertures facing the scene from (-7.5 lambda, 0, 0) and
    /// (+7.5 lambda, 0, 0).
    pub fn layouts(&self, realization: usize) -> Result<(DmaLayout, DmaLayout)> {
        let lambda = default_wavelength();
        let half_width = 5.0 * lambda;
        let spacing = lambda / 3.0;
        let tx = random_layout(
            derive_seed(self.base_seed, realization, "layout-tx"),
            self.settings.n_atoms,
            half_width,
            spacing,
        )?
        .with_pose(PlanePose::facing_plus_z([-7.5 * lambda, 0.0, 0.0]));
        let rx = random_layout(
            derive_seed(self.base_seed, realization, "layout-rx"),
            self.settings.n_atoms,
            half_width,
            spacing,
        )?
        .with_pose(PlanePose::facing_plus_z([7.5 * lambda, 0.0, 0.0]));
        Ok((tx, rx))
    }

    /// Per-realization rho-unit calibration (signal-independent noise):
    /// Monte-Carlo sigma_s over random binary configurations and training
    /// scenes. Cached per realization.
    pub fn calibration(&self, realization: usize, tx: &DmaLayout, rx: &DmaLayout) -> Result<f64> {
        if let Some(&sigma) = self.calibration_cache.lock().unwrap().get(&realization) {
            return Ok(sigma);
        }
        let tx_asm = DmaAssembly::new(tx.clone(), self.em.clone(), self.grid.clone())?;
        let rx_asm = DmaAssembly::new(rx.clone(), self.em.clone(), self.grid.clone())?;
        let scenes: Vec<SceneReflectivity> = self
            .splits
            .train
            .iter()
            .take(self.settings.calibration_scenes)
            .map(|d| scene_from_digit(&d.pixels, &self.grid))
            .collect::<Result<_>>()?;
        let mut forward = |stx: &metasense::em::AtomStates,
                           srx: &metasense::em::AtomStates,
                           scene: &SceneReflectivity| {
            let trace = trace_measurement(&tx_asm, &rx_asm, stx, srx)?;
            measure(&trace.pattern, scene)
        };
        let sigma = calibrate_rho_unit(
            &mut forward,
            &scenes,
            self.settings.n_atoms,
            self.settings.n_atoms,
            self.settings.calibration_draws,
            derive_seed(self.base_seed, realization, "calib"),
        )?;
        self.calibration_cache
            .lock()
            .unwrap()
            .insert(realization, sigma);
        Ok(sigma)
    }

    /// Per-realization random-configuration mean intensity (the unit of the
    /// intensity_ratio column). Cached per realization.
    pub fn baseline(&self, realization: usize, tx: &DmaLayout, rx: &DmaLayout) -> Result<f64> {
        if let Some(&b) = self.baseline_cache.lock().unwrap().get(&realization) {
            return Ok(b);
        }
        let b = baseline_intensity(
            tx,
            rx,
            &self.em,
            &self.grid,
            self.settings.baseline_draws,
            derive_seed(self.base_seed, realization, "baseline-intensity"),
        )?;
        self.baseline_cache.lock().unwrap().insert(realization, b);
        Ok(b)
    }

    pub fn noise_spec(&self, kind: NoiseKind, level: f64, calibration: f64) -> Result<NoiseSpec> {
        match kind {
            NoiseKind::None => Ok(NoiseSpec::none()),
            NoiseKind::SignalIndependent => NoiseSpec::signal_independent(level, calibration),
            NoiseKind::SignalDependent => NoiseSpec::signal_dependent(level),
        }
    }
}

/// One trainable plan coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanPoint {
    pub mode: TrainMode,
    pub m: usize,
    pub noise_kind: NoiseKind,
    pub train_level: f64,
    pub realization: usize,
}

impl PlanPoint {
    pub fn train_role(&self) -> String {
        format!(
            "train/{}/m{}/{}/{}",
            self.mode, self.m, self.noise_kind, self.train_level
        )
    }

    pub fn eval_role(&self, test_level: f64) -> String {
        format!(
            "eval/{}/m{}/{}/train{}/test{}",
            self.mode, self.m, self.noise_kind, self.train_level, test_level
        )
    }
}

/// All plan points in the deterministic file order.
pub fn enumerate_points(plan: &ExperimentPlan) -> Vec<PlanPoint> {
    let mut points = Vec::new();
    for &mode in &plan.modes {
        for &m in &plan.m_values {
            for &train_level in &plan.train_levels {
                for realization in 0..plan.realizations {
                    points.push(PlanPoint {
                        mode,
                        m,
                        noise_kind: plan.noise_kind,
                        train_level,
                        realization,
                    });
                }
            }
        }
    }
    points
}

fn row_key(row: &ResultRow) -> String {
    format!(
        "{}|{}|{}|{:e}|{:e}|{}",
        row.mode, row.m, row.noise_kind, row.train_level, row.test_level, row.seed
    )
}

/// Train and evaluate one plan point; returns one row per test level.
pub fn run_point(
    ctx: &RunContext,
    point: &PlanPoint,
    test_levels: &[f64],
) -> Result<Vec<ResultRow>> {
    let started = Instant::now();
    let k = point.realization;
    let (layout_tx, layout_rx) = ctx.layouts(k)?;
    let calibration = match point.noise_kind {
        NoiseKind::SignalIndependent => ctx.calibration(k, &layout_tx, &layout_rx)?,
        _ => 0.0,
    };
    let train_noise = ctx.noise_spec(point.noise_kind, point.train_level, calibration)?;
    let train_seed = derive_seed(ctx.base_seed, k, &point.train_role());

    let mut config = TrainConfig::new(point.m, train_seed, point.mode);
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
        noise: &train_noise,
    };
    let (model, _log) = train(&config, &inputs)?;

    let metrics = sequence_metrics(ctx, k, &layout_tx, &layout_rx, &model)?;
    let wall_time_s = started.elapsed().as_secs_f64();

    let mut rows = Vec::with_capacity(test_levels.len());
    for &test_level in test_levels {
        let eval_noise = ctx.noise_spec(point.noise_kind, test_level, calibration)?;
        let eval_seed = derive_seed(ctx.base_seed, k, &point.eval_role(test_level));
        let accuracy = evaluate(&model, &ctx.splits.test, &eval_noise, eval_seed)?;
        rows.push(ResultRow {
            mode: point.mode.to_string(),
            m: point.m,
            noise_kind: point.noise_kind.to_string(),
            train_level: point.train_level,
            test_level,
            seed: train_seed,
            accuracy,
            overlap: metrics.0,
            intensity_ratio: metrics.1,
            on_ratio: metrics.2,
            wall_time_s,
        });
    }
    Ok(rows)
}

/// (overlap, intensity_ratio, on_ratio) of a trained model's binary
/// illumination sequence.
fn sequence_metrics(
    ctx: &RunContext,
    realization: usize,
    layout_tx: &DmaLayout,
    layout_rx: &DmaLayout,
    model: &TrainedModel,
) -> Result<(Option<f64>, f64, f64)> {
    let stack = model.stack()?;
    let patterns: Vec<_> = stack.traces.iter().map(|t| t.pattern.clone()).collect();
    let ov = if patterns.len() >= 2 {
        Some(overlap(&patterns)?)
    } else {
        None
    };
    let mean_intensity = intensity(&patterns)?;
    let baseline = ctx.baseline(realization, layout_tx, layout_rx)?;
    let on = on_ratio(&model.configs.tx, &model.configs.rx)?;
    Ok((ov, mean_intensity / baseline, on))
}

/// Run every missing point of the plan, appending to `<out_dir>/results.csv`
/// in deterministic plan order; existing rows are skipped by key, so an
/// interrupted run resumes to the identical file. Returns the full table.
pub fn run_plan(ctx: &RunContext, plan: &ExperimentPlan) -> Result<Vec<ResultRow>> {
    plan.validate()?;
    std::fs::create_dir_all(&plan.out_dir)?;
    let results_path = plan.out_dir.join("results.csv");
    let existing: Vec<ResultRow> = if results_path.exists() {
        load_results(&results_path)?
    } else {
        Vec::new()
    };
    let existing_keys: HashSet<String> = existing.iter().map(row_key).collect();
    let test_levels = plan.effective_test_levels();

    // A point is pending unless every one of its rows is present.
    let pending: Vec<(usize, PlanPoint)> = enumerate_points(plan)
        .into_iter()
        .enumerate()
        .filter(|(_, point)| {
            let train_seed = derive_seed(ctx.base_seed, point.realization, &point.train_role());
            !test_levels.iter().all(|&tl| {
                existing_keys.contains(&format!(
                    "{}|{}|{}|{:e}|{:e}|{}",
                    point.mode, point.m, point.noise_kind, point.train_level, tl, train_seed
                ))
            })
        })
        .collect();

    let mut writer = ResultsAppender::open(&results_path)?;
    let jobs = ctx.settings.jobs.max(1);
    if pending.is_empty() {
        return load_results(&results_path);
    }

    if jobs == 1 {
        for (_, point) in &pending {
            let rows = run_point(ctx, point, &test_levels)?;
            writer.append(rows.iter().filter(|r| !existing_keys.contains(&row_key(r))))?;
        }
    } else {
        run_pending_parallel(ctx, &pending, &test_levels, &existing_keys, &mut writer, jobs)?;
    }
    drop(writer);
    load_results(&results_path)
}

/// Worker pool with an in-order single writer: results are buffered and
/// appended strictly in plan order so parallel runs produce byte-identical
/// files.
fn run_pending_parallel(
    ctx: &RunContext,
    pending: &[(usize, PlanPoint)],
    test_levels: &[f64],
    existing_keys: &HashSet<String>,
    writer: &mut ResultsAppender,
    jobs: usize,
) -> Result<()> {
    let queue = Mutex::new(pending.iter().enumerate().collect::<Vec<_>>().into_iter());
    let (sender, receiver) = mpsc::channel::<(usize, Result<Vec<ResultRow>>)>();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..jobs.min(pending.len()) {
            let sender = sender.clone();
            let queue = &queue;
            scope.spawn(move || {
                loop {
                    let next = queue.lock().unwrap().next();
                    let Some((order, (_, point))) = next else { break };
                    let rows = run_point(ctx, point, test_levels);
                    if sender.send((order, rows)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(sender);
        let mut done: BTreeMap<usize, Vec<ResultRow>> = BTreeMap::new();
        let mut next_to_write = 0usize;
        let mut first_error: Option<Error> = None;
        for (order, rows) in receiver {
            match rows {
                Ok(rows) => {
                    done.insert(order, rows);
                }
                Err(e) => {
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                }
            }
            while let Some(rows) = done.remove(&next_to_write) {
                writer.append(rows.iter().filter(|r| !existing_keys.contains(&row_key(r))))?;
                next_to_write += 1;
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })
}

/// Append-only results writer with per-point flushing; writes the header
/// only when starting a fresh file.
pub struct ResultsAppender {
    writer: csv::Writer<std::fs::File>,
    needs_header: bool,
}

impl ResultsAppender {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        Ok(Self {
            writer,
            needs_header: fresh,
        })
    }

    pub fn append<'a>(&mut self, rows: impl Iterator<Item = &'a ResultRow>) -> Result<()> {
        if self.needs_header {
            self.writer.write_record(metasense::data::RESULT_COLUMNS)?;
            self.needs_header = false;
        }
        for row in rows {
            self.writer.serialize(row)?;
        }
        self.writer.flush()?;
        Ok(())
    }
}

/// Aggregated detuning matrix: mean and std accuracy per
/// (train level, test level) cell for one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct DetuneMatrix {
    pub mode: String,
    pub noise_kind: String,
    pub train_levels: Vec<f64>,
    pub test_levels: Vec<f64>,
    /// Row-major over (train, test): (mean, std, n).
    pub cells: Vec<(f64, f64, usize)>,
}

impl DetuneMatrix {
    pub fn cell(&self, train_idx: usize, test_idx: usize) -> (f64, f64, usize) {
        self.cells[train_idx * self.test_levels.len() + test_idx]
    }
}

/// Aggregate result rows into per-mode detuning matrices over the train and
/// test level grids found in the table.
pub fn detuning_matrices(rows: &[ResultRow]) -> Result<Vec<DetuneMatrix>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("detuning aggregation".into()));
    }
    let mut by_mode: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        by_mode
            .entry((row.mode.clone(), row.noise_kind.clone()))
            .or_default()
            .push(row);
    }
    let mut out = Vec::new();
    for ((mode, kind), rows) in by_mode {
        let mut train_levels: Vec<f64> = rows.iter().map(|r| r.train_level).collect();
        let mut test_levels: Vec<f64> = rows.iter().map(|r| r.test_level).collect();
        train_levels.sort_by(f64::total_cmp);
        train_levels.dedup();
        test_levels.sort_by(f64::total_cmp);
        test_levels.dedup();
        let mut cells = Vec::with_capacity(train_levels.len() * test_levels.len());
        for &tr in &train_levels {
            for &te in &test_levels {
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.train_level == tr && r.test_level == te)
                    .map(|r| r.accuracy)
                    .collect();
                if values.is_empty() {
                    cells.push((f64::NAN, f64::NAN, 0));
                } else {
                    let (mean, std) = aggregate(&values)?;
                    cells.push((mean, std, values.len()));
                }
            }
        }
        out.push(DetuneMatrix {
            mode,
            noise_kind: kind,
            train_levels,
            test_levels,
            cells,
        });
    }
    Ok(out)
}
