//! The experiment commands behind the command-line tool: data generation,
//! training, inference, evaluation and plotting. Each command validates the
//! whole configuration before touching the file system and is re-runnable
//! with identical results.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::config::{sample_id, sample_seed, ConfigError, DataSpec, ExperimentConfig, Split};
use crate::decode::{decode_detections, parse_detections, write_detections, DecodeError};
use crate::evalkit::{evaluate, EvalError, EvalReport};
use crate::geom::RotatedRect;
use crate::maps::{load_dataset, synth_scene, write_dataset, Manifest, MapsError, Sample};
use crate::net::{NetError, Sifcn, FINAL_SCALE};
use crate::plot::{Axis, LineChart, Series};
use crate::tensor::store::TensorStore;
use crate::tensor::{Precision, Real, Tensor};
use crate::trainer::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, MetricsRow, TrainError, TrainState, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Maps(#[from] MapsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const NUMERIC: i32 = 5;
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(ConfigError::Read { .. }) => exit::IO,
            PipelineError::Config(_) => exit::CONFIG,
            PipelineError::Io { .. } | PipelineError::Input { .. } | PipelineError::Decode(DecodeError::Parse { .. }) => exit::IO,
            PipelineError::Maps(MapsError::Config(_)) => exit::CONFIG,
            PipelineError::Maps(_) => exit::IO,
            PipelineError::Train(TrainError::NonFinite { .. }) => exit::NUMERIC,
            PipelineError::Train(TrainError::Config(_) | TrainError::Checkpoint(_)) => exit::CONFIG,
            PipelineError::Train(TrainError::Io { .. } | TrainError::Store(_) | TrainError::Maps(_)) => exit::IO,
            PipelineError::Decode(DecodeError::Config(_)) | PipelineError::Eval(EvalError::Config(_)) => exit::CONFIG,
            _ => exit::FAILURE,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io(path))
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io(path))
}

/// Synthetic samples `0..count` of a split.
pub fn synthetic_split(cfg: &ExperimentConfig, split: Split, count: usize) -> Result<Vec<(Sample, u64)>, PipelineError> {
    let DataSpec::Synthetic { seed, synth, .. } = &cfg.data else {
        return Err(ConfigError::Field { field: "data.source".into(), message: "gen-data needs a synthetic data source".into() }.into());
    };
    (0..count)
        .map(|i| {
            let s = sample_seed(*seed, split, i);
            Ok((synth_scene(s, synth, sample_id(split, i))?, s))
        })
        .collect()
}

/// The samples of a split as configured: generated in memory for synthetic
/// sources, loaded from disk otherwise.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<Sample>, PipelineError> {
    match &cfg.data {
        DataSpec::Synthetic { train_count, test_count, .. } => {
            let count = if split == Split::Train { *train_count } else { *test_count };
            Ok(synthetic_split(cfg, split, count)?.into_iter().map(|(s, _)| s).collect())
        }
        DataSpec::Dataset { train_dir, test_dir } => Ok(load_dataset(if split == Split::Train { train_dir } else { test_dir })?),
    }
}

/// Writes `count` synthetic samples of `split` (default: the configured
/// count) as a dataset directory.
pub fn gen_data(cfg: &ExperimentConfig, split: Split, count: Option<usize>, dir: &Path) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let DataSpec::Synthetic { train_count, test_count, .. } = &cfg.data else {
        return Err(ConfigError::Field { field: "data.source".into(), message: "gen-data needs a synthetic data source".into() }.into());
    };
    let count = count.unwrap_or(if split == Split::Train { *train_count } else { *test_count });
    let samples: Vec<(Sample, Option<u64>)> = synthetic_split(cfg, split, count)?.into_iter().map(|(s, seed)| (s, Some(seed))).collect();
    for (s, _) in &samples {
        for r in &s.annotations {
            r.validate(crate::maps::annotations::RECT_TOLERANCE).map_err(MapsError::from)?;
        }
    }
    Ok(write_dataset(dir, &samples, cfg.network.input_size)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_iteration: usize,
    pub final_iteration: usize,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn periodic_checkpoint(out: &Path, iteration: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("iter-{iteration:06}.ckpt"))
}

/// Keeps the metrics rows logged before `iteration`, so a resumed run
/// produces the same file as an uninterrupted one.
fn truncate_metrics(path: &Path, iteration: usize) -> Result<(), PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|f| f.parse::<usize>().ok()).is_some_and(|it| it < iteration);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_file(path, &kept)
}

/// Trains as configured, writing metrics, periodic checkpoints and the
/// latest checkpoint into `out`. With `resume`, continues from that
/// checkpoint (which must match the configuration).
pub fn train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>, on_row: impl FnMut(&MetricsRow)) -> Result<TrainSummary, PipelineError> {
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F64 => train_typed::<f64>(cfg, out, resume, on_row),
        Precision::F32 => train_typed::<f32>(cfg, out, resume, on_row),
    }
}

fn train_typed<T: Real>(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainSummary, PipelineError> {
    let net = Sifcn::new(cfg.network.clone())?;
    let data = load_split(cfg, Split::Train)?;
    let trainer = Trainer::new(&net, &cfg.train, &cfg.loss, &data)?;
    let mut state = match resume {
        Some(path) => {
            let (meta, state) = load_checkpoint::<T>(path)?;
            meta.check_compatible(&cfg.network, &cfg.train, &cfg.loss)?;
            if meta.precision != cfg.train.precision {
                return Err(TrainError::Checkpoint(format!("checkpoint precision {:?} differs from the configured {:?}", meta.precision, cfg.train.precision)).into());
            }
            state
        }
        None => TrainState::<T>::fresh(&net, cfg.train.seed),
    };
    create_dir(&out.join(CHECKPOINT_DIR))?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    let metrics_path = out.join(METRICS_FILE);
    if resume.is_some() && metrics_path.exists() {
        truncate_metrics(&metrics_path, state.iteration)?;
    } else {
        write_file(&metrics_path, &(MetricsRow::csv_header() + "\n"))?;
    }
    let file = OpenOptions::new().append(true).open(&metrics_path).map_err(io(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    let start = state.iteration;
    let latest = out.join(LATEST_CHECKPOINT);
    let mut last_loss = None;
    let every = cfg.train.checkpoint_every;
    trainer.run(&mut state, cfg.train.max_iters, |st, row| {
        let werr = |source| TrainError::Io { path: metrics_path.clone(), source };
        writeln!(metrics, "{}", row.to_csv()).map_err(werr)?;
        last_loss = Some(row.loss.total);
        on_row(row);
        if row.iteration % 100 == 0 {
            log::info!("iteration {} lr {} loss {}", row.iteration, row.lr, row.loss.total);
        }
        if every > 0 && st.iteration % every == 0 && st.iteration < cfg.train.max_iters {
            metrics.flush().map_err(werr)?;
            let meta = CheckpointMeta::new(st, &cfg.network, &cfg.train, &cfg.loss);
            save_checkpoint(&periodic_checkpoint(out, st.iteration), st, &meta)?;
            save_checkpoint(&latest, st, &meta)?;
        }
        Ok(())
    })?;
    metrics.flush().map_err(io(&metrics_path))?;
    let meta = CheckpointMeta::new(&state, &cfg.network, &cfg.train, &cfg.loss);
    save_checkpoint(&latest, &state, &meta)?;
    if every > 0 {
        save_checkpoint(&periodic_checkpoint(out, state.iteration), &state, &meta)?;
    }
    Ok(TrainSummary { start_iteration: start, final_iteration: state.iteration, last_loss, checkpoint: latest, metrics: metrics_path })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferSummary {
    pub images: usize,
    pub detections: usize,
    pub seconds: f64,
    /// Wall-clock throughput of network evaluation plus decoding.
    pub images_per_second: f64,
}

/// Runs the checkpointed model on `samples` and decodes the final-scale maps
/// with the configured decode settings.
pub fn infer(cfg: &ExperimentConfig, checkpoint: &Path, samples: &[Sample]) -> Result<(BTreeMap<String, Vec<RotatedRect>>, InferSummary), PipelineError> {
    cfg.validate()?;
    let store = TensorStore::load(checkpoint).map_err(TrainError::from)?;
    let meta = read_checkpoint_meta(&store)?;
    match meta.precision {
        Precision::F64 => infer_typed::<f64>(cfg, checkpoint, samples),
        Precision::F32 => infer_typed::<f32>(cfg, checkpoint, samples),
    }
}

fn infer_typed<T: Real>(cfg: &ExperimentConfig, checkpoint: &Path, samples: &[Sample]) -> Result<(BTreeMap<String, Vec<RotatedRect>>, InferSummary), PipelineError> {
    let (meta, state) = load_checkpoint::<T>(checkpoint)?;
    let net = Sifcn::new(meta.network.clone())?;
    let size = meta.network.input_size;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != [3, size, size]) {
        return Err(PipelineError::Input { path: checkpoint.to_path_buf(), message: format!("image {} has shape {:?}, the model expects 3x{size}x{size}", s.id, s.image.shape()) });
    }
    let mut out = BTreeMap::new();
    let mut total = 0;
    let t0 = Instant::now();
    for s in samples {
        let x = Tensor::stack(&[s.image.cast::<T>()]).map_err(NetError::from)?;
        let maps = net.predict(&state.params, &x)?;
        let dets = decode_detections(&maps[&FINAL_SCALE], &cfg.decode);
        total += dets.len();
        out.insert(s.id.clone(), dets);
    }
    let seconds = t0.elapsed().as_secs_f64();
    let images_per_second = if seconds > 0.0 { samples.len() as f64 / seconds } else { f64::INFINITY };
    Ok((out, InferSummary { images: samples.len(), detections: total, seconds, images_per_second }))
}

pub fn write_detection_file(path: &Path, dets: &BTreeMap<String, Vec<RotatedRect>>) -> Result<(), PipelineError> {
    write_file(path, &write_detections(dets))
}

pub fn read_detection_file(path: &Path) -> Result<BTreeMap<String, Vec<RotatedRect>>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(parse_detections(&text)?)
}

/// Evaluates detections against the annotations of `samples`. Images without
/// detections count as empty; detections for unknown images are an error.
pub fn eval(cfg: &ExperimentConfig, dets: &BTreeMap<String, Vec<RotatedRect>>, samples: &[Sample], source: &Path) -> Result<EvalReport, PipelineError> {
    cfg.validate()?;
    if let Some(id) = dets.keys().find(|id| !samples.iter().any(|s| &s.id == *id)) {
        return Err(PipelineError::Input { path: source.to_path_buf(), message: format!("detections for unknown image {id:?}") });
    }
    let per_image: Vec<Vec<RotatedRect>> = samples.iter().map(|s| dets.get(&s.id).cloned().unwrap_or_default()).collect();
    let gts: Vec<Vec<RotatedRect>> = samples.iter().map(|s| s.annotations.clone()).collect();
    Ok(evaluate(&per_image, &gts, &cfg.eval)?)
}

/// Writes the report as JSON, a per-level summary CSV, per-level curve CSVs
/// and SVG plots.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), PipelineError> {
        let p = dir.join(name);
        write_file(&p, &text)?;
        written.push(p);
        Ok(())
    };
    put(REPORT_FILE.into(), serde_json::to_string_pretty(report).expect("report serialises"))?;
    let mut summary = String::from("level,min_height,n_images,n_gt,n_ignored_gt,tp,fp,ap,ar\n");
    for l in &report.levels {
        summary.push_str(&format!("{},{},{},{},{},{},{},{},{}\n", l.name, l.min_height, l.n_images, l.n_gt, l.n_ignored_gt, l.tp, l.fp, l.ap, l.ar));
        let mut pr = String::from("score,precision,recall\n");
        for p in &l.pr {
            pr.push_str(&format!("{},{},{}\n", p.score, p.precision, p.recall));
        }
        put(format!("pr_{}.csv", l.name), pr)?;
        let mut fppi = String::from("fppi,recall\n");
        for p in &l.fppi {
            fppi.push_str(&format!("{},{}\n", p.fppi, p.recall));
        }
        put(format!("fppi_{}.csv", l.name), fppi)?;
    }
    put(SUMMARY_FILE.into(), summary)?;
    for (name, chart) in report_charts(report) {
        put(name, chart.to_svg())?;
    }
    Ok(written)
}

fn report_charts(report: &EvalReport) -> Vec<(String, LineChart)> {
    let mut pr = LineChart::new(format!("Precision-recall (IoU {})", report.iou_threshold), "recall", "precision");
    let mut fppi = LineChart::new("Recall versus false positives per image", "FPPI", "recall").with_axes(Axis::Log, Axis::Linear);
    for l in &report.levels {
        pr.push(Series::new(format!("{} AP {:.3}", l.name, l.ap), l.pr.iter().map(|p| (p.recall, p.precision)).collect()));
        fppi.push(Series::new(format!("{} AR {:.3}", l.name, l.ar), l.fppi.iter().map(|p| (p.fppi, p.recall)).collect()));
    }
    vec![("pr.svg".into(), pr), ("fppi.svg".into(), fppi)]
}

/// Parses a metrics CSV into named columns (empty cells become NaN).
pub fn read_metrics(path: &Path) -> Result<Vec<(String, Vec<f64>)>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| PipelineError::Input { path: path.into(), message: "empty metrics file".into() })?;
    let mut cols: Vec<(String, Vec<f64>)> = header.split(',').map(|h| (h.to_string(), Vec::new())).collect();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(PipelineError::Input { path: path.into(), message: format!("line {}: expected {} fields, found {}", n + 2, cols.len(), fields.len()) });
        }
        for ((_, col), f) in cols.iter_mut().zip(fields) {
            let v = if f.is_empty() { f64::NAN } else { f.parse().map_err(|e| PipelineError::Input { path: path.into(), message: format!("line {}: {f:?}: {e}", n + 2) })? };
            col.push(v);
        }
    }
    Ok(cols)
}

/// Renders a metrics CSV (`loss.svg`, `terms.svg`) or an evaluation report
/// JSON (`pr.svg`, `fppi.svg`) into `dir`.
pub fn plot(input: &Path, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let is_json = input.extension().is_some_and(|e| e == "json");
    let charts = if is_json {
        let text = fs::read_to_string(input).map_err(io(input))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| PipelineError::Input { path: input.into(), message: e.to_string() })?;
        report_charts(&report)
    } else {
        let cols = read_metrics(input)?;
        let find = |name: &str| cols.iter().find(|(n, _)| n == name).map(|(_, v)| v);
        let iters = find("iteration").ok_or_else(|| PipelineError::Input { path: input.into(), message: "no iteration column".into() })?;
        let series = |name: &str, v: &[f64]| Series::new(name, iters.iter().zip(v).filter(|(_, y)| y.is_finite()).map(|(&x, &y)| (x, y)).collect());
        let mut loss = LineChart::new("Training loss", "iteration", "total loss");
        if let Some(v) = find("total") {
            loss.push(series("total", v));
        }
        let mut terms = LineChart::new("Loss terms per scale", "iteration", "term value").with_axes(Axis::Linear, Axis::Log);
        for (name, v) in cols.iter().filter(|(n, v)| n.starts_with('s') && v.iter().any(|x| x.is_finite())) {
            terms.push(series(name, v));
        }
        vec![("loss.svg".into(), loss), ("terms.svg".into(), terms)]
    };
    create_dir(dir)?;
    charts
        .into_iter()
        .map(|(name, chart)| {
            let p = dir.join(name);
            write_file(&p, &chart.to_svg())?;
            Ok(p)
        })
        .collect()
}
