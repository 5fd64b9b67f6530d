//! Command-line front end: `split`, `train`, `evaluate`, `predict`, `report`.

mod config;
mod plots;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{config_to_toml, load_config, parse_config, ExperimentConfig, SplitConfig};
pub use plots::{emit_curve_plots, ACCURACY_PLOT, LOSS_PLOT, QWK_PLOT};

use crate::data::{
    load_ids, load_manifest_with_ext, read_split, split_dataset, write_split, DatasetSplit, GradeLabel, ImageRecord,
    DEFAULT_IMAGE_EXT,
};
use crate::error::{Error, Result};
use crate::labels::{ProbabilityVector, Regime, DEFAULT_THRESHOLD};
use crate::metrics::{render_report, write_confusion_csv, write_metrics_json, MetricsReport, ReportFormat};
use crate::model::{build_model, load_checkpoint, save_checkpoint, TrainingFingerprint, SPEC_FILE};
use crate::training::{evaluate_on_split, predict_records, train_model_with, write_curves_csv};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const RUN_FILE: &str = "run.json";
pub const PREDICTIONS_HEADER: [&str; 3] = ["id_code", "predicted_grade", "confidence"];

#[derive(Debug, Parser)]
#[command(name = "retina-grade", version, about = "Five-grade diabetic retinopathy classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a manifest into train/validation subsets and write the split CSV.
    Split(SplitArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics.json and confusion.csv.
    Evaluate(EvaluateArgs),
    /// Predict grades for images and write a predictions CSV.
    Predict(PredictArgs),
    /// Render a metrics.json file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Manifest CSV (`id_code,diagnosis`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory holding `<id_code>.<ext>` images.
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Image file extension.
    #[arg(long)]
    image_ext: Option<String>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Experiment config providing manifest and split settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Output split CSV.
    #[arg(long, default_value = SPLIT_FILE)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of validation records (default 550 or the config's value).
    #[arg(long)]
    validation_count: Option<usize>,
    /// Hold out the same share of every grade.
    #[arg(long)]
    stratified: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Run directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for both the split and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (default `<run>/evaluation`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output predictions CSV.
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// json, md or txt.
    #[arg(long, default_value = "md")]
    format: String,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance written into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub created: String,
    pub manifest_path: PathBuf,
    pub images_dir: PathBuf,
    pub image_ext: String,
    pub regime: Regime,
    pub seed: u64,
    pub split_seed: u64,
    pub epochs: usize,
    pub threshold: f64,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit status. Failures print one line to stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn missing(what: &str) -> Error {
    Error::InvalidArgument(format!("missing {what}"))
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let manifest = a
        .data
        .manifest
        .or_else(|| cfg.as_ref().map(|c| c.manifest_path.clone()))
        .ok_or_else(|| missing("--manifest"))?;
    let images_dir = a
        .data
        .images_dir
        .or_else(|| cfg.as_ref().map(|c| c.images_dir.clone()))
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let ext = a
        .data
        .image_ext
        .or_else(|| cfg.as_ref().map(|c| c.image_ext.clone()))
        .unwrap_or_else(|| DEFAULT_IMAGE_EXT.into());
    let defaults = cfg.map(|c| c.split).unwrap_or_default();
    let records = load_manifest_with_ext(&manifest, &images_dir, &ext)?;
    let split = split_dataset(
        &records,
        a.validation_count.unwrap_or(defaults.validation_count),
        a.seed.unwrap_or(defaults.seed),
        a.stratified || defaults.stratified,
    )?;
    write_split(&a.out, &split)?;
    log::info!(
        "wrote {} ({} train, {} validation)",
        a.out.display(),
        split.train.len(),
        split.validation.len()
    );
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = a.data.manifest {
        cfg.manifest_path = m;
    }
    if let Some(d) = a.data.images_dir {
        cfg.images_dir = d;
    }
    if let Some(e) = a.data.image_ext {
        cfg.image_ext = e;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.split.seed = s;
    }
    cfg.validate()?;
    run_experiment(&cfg)
}

/// Runs one full experiment into `cfg.output_dir`: split, config snapshot,
/// training, checkpoint, curves, plots, validation metrics and run record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.output_dir;
    if out.exists() && std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::InvalidArgument(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    let records = load_manifest_with_ext(&cfg.manifest_path, &cfg.images_dir, &cfg.image_ext)?;
    let split = split_dataset(
        &records,
        cfg.split.validation_count,
        cfg.split.seed,
        cfg.split.stratified,
    )?;
    let model = build_model(&cfg.model, cfg.train.seed)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let created = chrono::Local::now().to_rfc3339();
    write_split(&out.join(SPLIT_FILE), &split)?;
    let snapshot = out.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot, config_to_toml(cfg)?).map_err(|e| Error::io(&snapshot, e))?;
    log::info!(
        "training on {} images, validating on {}",
        split.train.len(),
        split.validation.len()
    );

    let (model, trace) = train_model_with(model, &split, &cfg.train, &cfg.preprocess, |_| {})?;
    save_checkpoint(
        &model,
        cfg.train.regime,
        TrainingFingerprint {
            seed: cfg.train.seed,
            epochs: cfg.train.epochs,
        },
        &out.join(CHECKPOINT_DIR),
    )?;
    write_curves_csv(&trace, &out.join(CURVES_FILE))?;
    emit_curve_plots(&trace, out)?;

    let report = evaluate_on_split(&model, &split.validation, cfg.train.regime, DEFAULT_THRESHOLD)?;
    let run = RunRecord {
        created,
        manifest_path: absolute(&cfg.manifest_path),
        images_dir: absolute(&cfg.images_dir),
        image_ext: cfg.image_ext.clone(),
        regime: cfg.train.regime,
        seed: cfg.train.seed,
        split_seed: cfg.split.seed,
        epochs: cfg.train.epochs,
        threshold: DEFAULT_THRESHOLD,
    };
    let run_path = out.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&run).map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(&run_path, text).map_err(|e| Error::io(&run_path, e))?;
    write_confusion_csv(&report.confusion, &out.join(CONFUSION_FILE))?;
    write_metrics_json(&report, &out.join(METRICS_FILE))?;
    log::info!("accuracy {:.4}, run written to {}", report.accuracy, out.display());
    Ok(())
}

/// (checkpoint dir, run dir if the checkpoint sits inside one)
fn locate_checkpoint(path: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    if path.join(SPEC_FILE).is_file() {
        let run = path
            .parent()
            .filter(|p| p.join(RUN_FILE).is_file())
            .map(Path::to_path_buf);
        return Ok((path.to_path_buf(), run));
    }
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join(SPEC_FILE).is_file() {
        let run = path.join(RUN_FILE).is_file().then(|| path.to_path_buf());
        return Ok((nested, run));
    }
    Err(Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("no {SPEC_FILE} here or in {CHECKPOINT_DIR}/"),
    })
}

fn read_run(run_dir: &Path) -> Result<RunRecord> {
    let p = run_dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Other(format!("{}: {e}", p.display())))
}

fn check_threshold(t: f64) -> Result<f64> {
    if t.is_finite() && t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(Error::InvalidArgument(format!(
            "--threshold must be in (0, 1), got {t}"
        )))
    }
}

/// Records to evaluate: the given manifest, else the run's validation subset.
fn evaluation_records(data: &DataArgs, run: Option<&(PathBuf, RunRecord)>) -> Result<Vec<ImageRecord>> {
    let ext = data
        .image_ext
        .clone()
        .or_else(|| run.map(|r| r.1.image_ext.clone()))
        .unwrap_or_else(|| DEFAULT_IMAGE_EXT.into());
    if let Some(manifest) = &data.manifest {
        let images_dir = data
            .images_dir
            .clone()
            .or_else(|| run.map(|r| r.1.images_dir.clone()))
            .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
        return load_manifest_with_ext(manifest, &images_dir, &ext);
    }
    let (dir, run) = run.ok_or_else(|| missing("--manifest (the checkpoint is not inside a run directory)"))?;
    let images_dir = data.images_dir.clone().unwrap_or_else(|| run.images_dir.clone());
    let records = load_manifest_with_ext(&run.manifest_path, &images_dir, &ext)?;
    let (_, validation) = read_split(&dir.join(SPLIT_FILE), &records)?;
    Ok(validation)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (ckpt, run_dir) = locate_checkpoint(&a.checkpoint)?;
    let run = match &run_dir {
        Some(d) => Some((d.clone(), read_run(d)?)),
        None => None,
    };
    let threshold = check_threshold(
        a.threshold
            .or_else(|| run.as_ref().map(|r| r.1.threshold))
            .unwrap_or(DEFAULT_THRESHOLD),
    )?;
    let records = evaluation_records(&a.data, run.as_ref())?;
    let (model, meta) = load_checkpoint(&ckpt)?;
    let report = evaluate_on_split(&model, &records, meta.regime, threshold)?;
    let out = a
        .out
        .unwrap_or_else(|| run_dir.unwrap_or_else(|| ckpt.clone()).join("evaluation"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_confusion_csv(&report.confusion, &out.join(CONFUSION_FILE))?;
    write_metrics_json(&report, &out.join(METRICS_FILE))?;
    log::info!(
        "accuracy {:.4} on {} images; wrote {}",
        report.accuracy,
        records.len(),
        out.display()
    );
    Ok(())
}

/// Probability of the decoded output: the winning softmax unit, or for the
/// ordinal head the product over units of `p` where the decoded vector is 1
/// and `1 − p` where it is 0.
pub fn prediction_confidence(regime: Regime, p: &ProbabilityVector, grade: GradeLabel) -> f64 {
    match regime {
        Regime::Single => p.values()[grade.index()],
        Regime::Multi => p
            .values()
            .iter()
            .enumerate()
            .map(|(k, &v)| if k <= grade.index() { v } else { 1.0 - v })
            .product(),
    }
}

fn image_records(data: &DataArgs, run: Option<&RunRecord>) -> Result<Vec<ImageRecord>> {
    let ext = data
        .image_ext
        .clone()
        .or_else(|| run.map(|r| r.image_ext.clone()))
        .unwrap_or_else(|| DEFAULT_IMAGE_EXT.into());
    let images_dir = match (&data.images_dir, &data.manifest) {
        (Some(d), _) => d.clone(),
        (None, Some(m)) => run
            .map(|r| r.images_dir.clone())
            .unwrap_or_else(|| m.parent().map(Path::to_path_buf).unwrap_or_default()),
        (None, None) => return Err(missing("--manifest or --images-dir")),
    };
    let ids = match &data.manifest {
        Some(m) => load_ids(m)?,
        None => {
            let mut ids: Vec<String> = std::fs::read_dir(&images_dir)
                .map_err(|e| Error::io(&images_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|x| x.to_str()) == Some(ext.as_str()))
                .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                .collect();
            ids.sort();
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no .{ext} images in {}",
                    images_dir.display()
                )));
            }
            ids
        }
    };
    // the grade is unused for prediction
    ids.into_iter()
        .map(|id| {
            let path = images_dir.join(format!("{id}.{ext}"));
            ImageRecord::new(id, path, GradeLabel::ALL[0])
        })
        .collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (ckpt, run_dir) = locate_checkpoint(&a.checkpoint)?;
    let run = match &run_dir {
        Some(d) => Some(read_run(d)?),
        None => None,
    };
    let threshold = check_threshold(
        a.threshold
            .or_else(|| run.as_ref().map(|r| r.threshold))
            .unwrap_or(DEFAULT_THRESHOLD),
    )?;
    let records = image_records(&a.data, run.as_ref())?;
    let (model, meta) = load_checkpoint(&ckpt)?;
    let probs = predict_records(&model, &records)?;
    let err = |e: csv::Error| Error::Other(format!("{}: {e}", a.out.display()));
    let mut w = csv::Writer::from_path(&a.out).map_err(err)?;
    w.write_record(PREDICTIONS_HEADER).map_err(err)?;
    for (r, p) in records.iter().zip(&probs) {
        let g = meta.regime.decode(p, threshold);
        let conf = prediction_confidence(meta.regime, p, g);
        w.write_record([r.id.clone(), g.value().to_string(), format!("{conf:.6}")])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    log::info!("wrote {} predictions to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let text = std::fs::read_to_string(&a.metrics).map_err(|e| Error::io(&a.metrics, e))?;
    let report: MetricsReport =
        serde_json::from_str(&text).map_err(|e| Error::Other(format!("{}: {e}", a.metrics.display())))?;
    let rendered = render_report(&report, format)?;
    match a.out {
        Some(p) => std::fs::write(&p, rendered).map_err(|e| Error::io(&p, e)),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

/// Splits `records` as a train run would (exposed for tooling).
pub fn split_for(cfg: &ExperimentConfig, records: &[ImageRecord]) -> Result<DatasetSplit> {
    split_dataset(
        records,
        cfg.split.validation_count,
        cfg.split.seed,
        cfg.split.stratified,
    )
}
