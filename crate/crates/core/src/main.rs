use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sifcn::config::{ExperimentConfig, Split, OUTPUT_ROOT_ENV};
use sifcn::maps::load_dataset;
use sifcn::pipeline::{self, exit, PipelineError, LATEST_CHECKPOINT};

#[derive(Parser, Debug)]
#[command(name = "sifcn", version, about = "Rotated-box detection experiments: data generation, training, inference, evaluation, plotting")]
struct Cli {
    /// Experiment config (TOML). Omitted: all defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lr0=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`); relative paths are resolved
    /// against $SIFCN_OUTPUT_ROOT when set.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Master seed for training (overrides `train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, env = OUTPUT_ROOT_ENV, hide_env_values = true, global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (PNG images, JSON annotations, manifest).
    GenData {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Number of samples (default: the configured split size).
        #[arg(long)]
        count: Option<usize>,
        /// Target directory (default: <output_dir>/data/<split>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes metrics.csv, checkpoints and latest.ckpt.
    Train {
        /// Continue from this checkpoint.
        #[arg(long, conflicts_with = "resume_latest")]
        resume: Option<PathBuf>,
        /// Continue from <output_dir>/latest.ckpt.
        #[arg(long)]
        resume_latest: bool,
        /// Iteration budget (overrides `train.max_iters`).
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Detect boxes with a trained model; writes a detection file.
    Infer {
        /// Checkpoint (default: <output_dir>/latest.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (default: the configured test split).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Detection file (default: <output_dir>/detections.txt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score threshold (overrides `decode.score_threshold`).
        #[arg(long)]
        score_threshold: Option<f64>,
    },
    /// Score a detection file against annotations; writes report files.
    Eval {
        /// Detection file (default: <output_dir>/detections.txt).
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Dataset directory with the annotations (default: the configured test split).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory (default: <output_dir>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics CSV or an evaluation report JSON as SVG charts.
    Plot {
        input: PathBuf,
        /// Chart directory (default: <output_dir>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    match &cli.command {
        Command::Train { max_iters: Some(n), .. } => overrides.push(format!("train.max_iters={n}")),
        Command::Infer { score_threshold: Some(t), .. } => overrides.push(format!("decode.score_threshold={t}")),
        _ => {}
    }
    if let Some(dir) = &cli.output_dir {
        overrides.push(format!("output_dir={}", toml::Value::String(dir.display().to_string())));
    }
    Ok(match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml(&format!("schema_version = {}", sifcn::config::SCHEMA_VERSION), &overrides)?,
    })
}

fn samples(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<sifcn::maps::Sample>, PipelineError> {
    match data {
        Some(dir) => Ok(load_dataset(dir)?),
        None => pipeline::load_split(cfg, Split::Test),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    let out = cfg.resolved_output_dir(cli.output_root.as_deref());
    match cli.command {
        Command::GenData { split, count, out: dir } => {
            let split = Split::from(split);
            let dir = dir.unwrap_or_else(|| out.join("data").join(split.name()));
            let manifest = pipeline::gen_data(&cfg, split, count, &dir)?;
            println!("wrote {} samples to {}", manifest.samples.len(), dir.display());
        }
        Command::Train { resume, resume_latest, .. } => {
            let resume = resume.or_else(|| resume_latest.then(|| out.join(LATEST_CHECKPOINT)));
            let summary = pipeline::train(&cfg, &out, resume.as_deref(), |_| {})?;
            println!(
                "trained iterations {}..{}; last loss {}; checkpoint {}; metrics {}",
                summary.start_iteration,
                summary.final_iteration,
                summary.last_loss.map_or("n/a".to_string(), |l| l.to_string()),
                summary.checkpoint.display(),
                summary.metrics.display()
            );
        }
        Command::Infer { checkpoint, data, out: file, .. } => {
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(LATEST_CHECKPOINT));
            let images = samples(&cfg, data.as_deref())?;
            let (dets, summary) = pipeline::infer(&cfg, &checkpoint, &images)?;
            let file = file.unwrap_or_else(|| out.join("detections.txt"));
            if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| PipelineError::Io { path: parent.to_path_buf(), source })?;
            }
            pipeline::write_detection_file(&file, &dets)?;
            println!(
                "{} images, {} detections -> {}; {:.2} s, {:.2} images/s",
                summary.images,
                summary.detections,
                file.display(),
                summary.seconds,
                summary.images_per_second
            );
        }
        Command::Eval { detections, data, out: dir } => {
            let detections = detections.unwrap_or_else(|| out.join("detections.txt"));
            let dets = pipeline::read_detection_file(&detections)?;
            let gts = samples(&cfg, data.as_deref())?;
            let report = pipeline::eval(&cfg, &dets, &gts, &detections)?;
            let dir = dir.unwrap_or_else(|| out.join("eval"));
            pipeline::write_report(&report, &dir)?;
            for l in &report.levels {
                println!("{}: AP {:.4} AR {:.4} (gt {}, tp {}, fp {})", l.name, l.ap, l.ar, l.n_gt, l.tp, l.fp);
            }
            println!("report written to {}", dir.display());
        }
        Command::Plot { input, out: dir } => {
            let dir = dir.unwrap_or_else(|| out.join("plots"));
            for p in pipeline::plot(&input, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
