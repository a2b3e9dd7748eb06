use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use metasense::data::load_results;
use metasense::pipeline::TrainedModel;

use metasense_cli::codebook::{build_codebook, parse_repeats_file, select_from_codebook, Codebook};
use metasense_cli::config::{resolve, HarnessConfig, KeyValueFile, Overrides};
use metasense_cli::plots::emit_plots;
use metasense_cli::runner::{run_plan, RunContext};
use metasense_cli::synth::generate_corpus;

#[derive(Parser)]
#[command(
    name = "metasense",
    about = "Noise-adaptive programmable meta-imager: experiment sweeps, detuning, codebooks and figures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Plain-text key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training-split IDX image file.
    #[arg(long)]
    mnist_images: Option<PathBuf>,
    /// Training-split IDX label file.
    #[arg(long)]
    mnist_labels: Option<PathBuf>,
    /// Test-split IDX image file.
    #[arg(long)]
    mnist_test_images: Option<PathBuf>,
    /// Test-split IDX label file.
    #[arg(long)]
    mnist_test_labels: Option<PathBuf>,
    /// Output directory (results, checkpoints, figures).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; every derived stream is reproducible from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset scale factor in (0, 1].
    #[arg(long)]
    scale: Option<f64>,
    /// Independent realizations per plan point.
    #[arg(long)]
    realizations: Option<usize>,
    /// Comma-separated modes: learned,random.
    #[arg(long)]
    modes: Option<String>,
    /// Comma-separated measurement counts.
    #[arg(long)]
    m_values: Option<String>,
    /// Noise kind: none | signal_independent | signal_dependent.
    #[arg(long)]
    noise_kind: Option<String>,
    /// Comma-separated training noise levels.
    #[arg(long)]
    train_levels: Option<String>,
    /// Comma-separated test noise levels (defaults to the train levels).
    #[arg(long)]
    test_levels: Option<String>,
    /// Parallel plan-point workers.
    #[arg(long)]
    jobs: Option<usize>,
    /// Training epochs per run.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment plan and append to <out>/results.csv (resumable).
    Sweep(CommonArgs),
    /// Sweep with a full train-level x test-level evaluation grid, then
    /// emit detuning heatmaps.
    Detune(CommonArgs),
    /// Train one checkpoint per noise level and write a codebook manifest.
    Codebook(CommonArgs),
    /// Pick the codebook entry matching the noise level estimated from
    /// repeated measurements.
    Select {
        /// Directory holding codebook.csv and its checkpoints.
        #[arg(long)]
        codebook: PathBuf,
        /// File of repeated measurements, one `re im` pair per line.
        #[arg(long)]
        repeats: PathBuf,
        /// Noise kind to estimate: signal_independent | signal_dependent.
        #[arg(long)]
        noise_kind: String,
    },
    /// Render figures (SVG + companion CSV) from a results file.
    Plot {
        /// results.csv produced by sweep/detune.
        #[arg(long)]
        results: PathBuf,
        /// Figure output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic digit corpus in IDX format.
    SynthData {
        /// Output directory for the four IDX files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 60_000)]
        train_count: usize,
        #[arg(long, default_value_t = 10_000)]
        test_count: usize,
    },
}

fn load_config(common: &CommonArgs) -> anyhow::Result<HarnessConfig> {
    let file = match &common.config {
        Some(path) => KeyValueFile::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => KeyValueFile::default(),
    };
    let overrides = Overrides {
        mnist_images: common.mnist_images.clone(),
        mnist_labels: common.mnist_labels.clone(),
        mnist_test_images: common.mnist_test_images.clone(),
        mnist_test_labels: common.mnist_test_labels.clone(),
        out: common.out.clone(),
        seed: common.seed,
        scale: common.scale,
        realizations: common.realizations,
        modes: common.modes.clone(),
        m_values: common.m_values.clone(),
        noise_kind: common.noise_kind.clone(),
        train_levels: common.train_levels.clone(),
        test_levels: common.test_levels.clone(),
        jobs: common.jobs,
        epochs: common.epochs,
    };
    Ok(resolve(&file, &overrides)?)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Sweep(common) => {
            let cfg = load_config(&common)?;
            let ctx = RunContext::prepare(&cfg.data, &cfg.plan, cfg.settings.clone())?;
            let rows = run_plan(&ctx, &cfg.plan)?;
            println!(
                "sweep complete: {} rows in {}",
                rows.len(),
                cfg.plan.out_dir.join("results.csv").display()
            );
            let figures = emit_plots(&rows, &cfg.plan.out_dir.join("figures"))?;
            println!("wrote {} figure files", figures.len());
        }
        Command::Detune(common) => {
            let mut cfg = load_config(&common)?;
            if cfg.plan.test_levels.is_empty() {
                cfg.plan.test_levels = cfg.plan.train_levels.clone();
            }
            let ctx = RunContext::prepare(&cfg.data, &cfg.plan, cfg.settings.clone())?;
            let rows = run_plan(&ctx, &cfg.plan)?;
            println!(
                "detuning grid complete: {} rows in {}",
                rows.len(),
                cfg.plan.out_dir.join("results.csv").display()
            );
            let figures = emit_plots(&rows, &cfg.plan.out_dir.join("figures"))?;
            println!("wrote {} figure files", figures.len());
        }
        Command::Codebook(common) => {
            let cfg = load_config(&common)?;
            let ctx = RunContext::prepare(&cfg.data, &cfg.plan, cfg.settings.clone())?;
            let m = cfg.plan.m_values[0];
            let (book, warnings) = build_codebook(
                &ctx,
                cfg.plan.noise_kind,
                &cfg.plan.train_levels,
                m,
                &cfg.plan.out_dir,
            )?;
            for warning in warnings {
                eprintln!("warning: {warning}");
            }
            println!(
                "codebook with {} entries at {}",
                book.entries.len(),
                Codebook::manifest_path(&cfg.plan.out_dir).display()
            );
        }
        Command::Select {
            codebook,
            repeats,
            noise_kind,
        } => {
            let book = Codebook::load_manifest(&codebook)?;
            book.verify()?;
            let repeats = parse_repeats_file(&repeats)?;
            let kind = noise_kind.parse()?;
            let calibration = match book.entries.first() {
                Some(entry) => TrainedModel::load(&entry.path)?.noise.calibration,
                None => bail!("codebook is empty"),
            };
            let entry = select_from_codebook(&book, &repeats, kind, calibration)?;
            println!(
                "selected level {} -> {}",
                entry.level,
                entry.path.display()
            );
        }
        Command::Plot { results, out } => {
            let rows = load_results(&results)?;
            let figures = emit_plots(&rows, &out)?;
            for f in &figures {
                println!("{}", f.display());
            }
        }
        Command::SynthData {
            out,
            seed,
            train_count,
            test_count,
        } => {
            let paths = generate_corpus(&out, seed, train_count, test_count)?;
            println!(
                "synthetic corpus: {} / {} and {} / {}",
                paths.train_images.display(),
                paths.train_labels.display(),
                paths.test_images.display(),
                paths.test_labels.display()
            );
        }
    }
    Ok(())
}
