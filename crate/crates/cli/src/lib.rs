//! Command implementations behind the `s5cl` binary.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures at run time.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use s5cl::augment::AugmentationPolicy;
use s5cl::dataset::{
    generate_synthetic, split_labeled_unlabeled, Container, LabeledDataset, Split,
};
use s5cl::evaluator::{evaluate_model, EmbeddingSet, MetricsReport};
use s5cl::model::{ModelConfig, S5CLModel};
use s5cl::trainer::{
    audit_pseudo_labels, evaluation_stream, run_training, RunRecord, TrainData, TrainMode,
};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] s5cl::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Core(s5cl::Error::Config(_) | s5cl::Error::InfeasibleSplit(_)) => 1,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        if self.exit_code() == 1 {
            "config"
        } else {
            "runtime"
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "s5cl",
    version,
    about = "Semi-supervised contrastive learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML, or JSON when the name ends in .json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel sweep runs (forced to 1 by S5CL_DETERMINISTIC=1).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as an S5DS file.
    Generate,
    /// Train one model and write its run directory.
    Train,
    /// Evaluate a checkpoint on an S5DS dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train every combination of the sweep lists.
    Sweep,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let cfg = cfg.effective()?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, &out).map(|_| ()),
        Command::Train => {
            let result = cmd_train(&cfg, &out);
            if let Err(e) = &result {
                write_diagnostic(&out, e);
            }
            result.map(|_| ())
        }
        Command::Evaluate {
            checkpoint,
            dataset,
        } => {
            let checkpoint = checkpoint
                .clone()
                .or_else(|| cfg.evaluate.checkpoint.clone())
                .ok_or_else(|| CliError::Usage("evaluate needs --checkpoint".into()))?;
            let dataset = dataset
                .clone()
                .or_else(|| cfg.evaluate.dataset.clone())
                .ok_or_else(|| CliError::Usage("evaluate needs --dataset".into()))?;
            cmd_evaluate(&checkpoint, &dataset, cfg.evaluate.augmented_views, &out).map(|_| ())
        }
        Command::Sweep => {
            let deterministic = std::env::var("S5CL_DETERMINISTIC").is_ok_and(|v| v == "1");
            let jobs = if deterministic {
                1
            } else {
                cli.jobs.unwrap_or(1)
            };
            cmd_sweep(&cfg, &out, jobs).map(|_| ())
        }
    }
}

fn write_diagnostic(out: &Path, e: &CliError) {
    let body = serde_json::json!({
        "error": e.to_string(),
        "kind": e.kind(),
        "exit_code": e.exit_code(),
    });
    if fs::create_dir_all(out).is_ok() {
        let _ = fs::write(out.join("error.json"), format!("{body:#}\n"));
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_images: usize,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub generator: Option<s5cl::dataset::SyntheticParams>,
}

/// Generates the synthetic dataset into `out/dataset.s5ds` plus a JSON
/// summary next to it.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> CliResult<PathBuf> {
    let data = generate_synthetic(&cfg.dataset.synthetic)?;
    fs::create_dir_all(out)?;
    let path = out.join("dataset.s5ds");
    data.to_container().save(&path)?;
    let summary = DatasetSummary {
        num_images: data.len(),
        class_names: data.class_names.clone(),
        class_counts: data.class_counts(),
        height: data.meta.height,
        width: data.meta.width,
        generator: data.meta.generator.clone(),
    };
    write_json(&out.join("dataset_meta.json"), &summary)?;
    log::info!("wrote {} images to {}", data.len(), path.display());
    Ok(path)
}

/// Loads or generates the dataset and splits it.
pub fn prepare_split(cfg: &ExperimentConfig) -> CliResult<Split> {
    let data = match &cfg.dataset.path {
        Some(path) => LabeledDataset::from_container(Container::load(path)?)?,
        None => generate_synthetic(&cfg.dataset.synthetic)?,
    };
    Ok(split_labeled_unlabeled(&data, &cfg.split)?)
}

/// What a checkpoint needs besides its tensors to reproduce evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub seed: u64,
    pub weak_augmentation: AugmentationPolicy,
    pub strong_augmentation: AugmentationPolicy,
    pub eval_batch_size: usize,
}

pub fn save_checkpoint(model: &S5CLModel, info: &CheckpointInfo, path: &Path) -> CliResult<()> {
    let attributes = serde_json::to_value(info)?;
    Container::from_tensors(model.to_named(), attributes).save(path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CliResult<(S5CLModel, CheckpointInfo)> {
    let c = Container::load(path)?;
    let info: CheckpointInfo = serde_json::from_value(c.header.attributes.clone())
        .map_err(|e| CliError::Core(s5cl::Error::Format(format!("checkpoint attributes: {e}"))))?;
    let model = S5CLModel::from_named(&info.model, c.tensors)?;
    Ok((model, info))
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub record: RunRecord,
    pub model: S5CLModel,
    pub metrics: Option<MetricsReport>,
}

/// Runs one experiment and writes its run directory.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<TrainArtifacts> {
    let split = prepare_split(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml()?)?;
    let data = TrainData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        validation: Some(&split.validation),
        test: Some(&split.test),
    };
    let mut output = run_training(&cfg.train, &data)?;
    if split.unlabeled.hidden_truth().read_count() != 0 {
        return Err(CliError::Core(s5cl::Error::InvalidArgument(
            "unlabeled ground truth was read during training".into(),
        )));
    }
    audit_pseudo_labels(
        &mut output.record,
        &output.unlabeled_predictions,
        &split.unlabeled,
    );

    let t = &cfg.train;
    let info = CheckpointInfo {
        model: t.model.clone(),
        seed: t.seed,
        weak_augmentation: t.weak_augmentation.clone(),
        strong_augmentation: t.strong_augmentation.clone(),
        eval_batch_size: t.eval_batch_size,
    };
    save_checkpoint(&output.model, &info, &out.join("checkpoint.s5ds"))?;
    split.test.to_container().save(&out.join("test.s5ds"))?;
    write_json(&out.join("run_record.json"), &output.record)?;
    if let Some(metrics) = &output.record.final_test {
        write_json(&out.join("metrics.json"), metrics)?;
        fs::write(out.join("confusion.csv"), metrics.confusion_csv())?;
        let (_, set) = evaluate_model(
            &output.model,
            &split.test,
            &t.weak_augmentation,
            &t.strong_augmentation,
            cfg.evaluate.augmented_views,
            &evaluation_stream(t.seed),
            t.eval_batch_size,
        )?;
        fs::write(out.join("embeddings.csv"), set.to_csv())?;
    }
    Ok(TrainArtifacts {
        metrics: output.record.final_test.clone(),
        record: output.record,
        model: output.model,
    })
}

/// Evaluates a checkpoint on a labeled S5DS dataset.
pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    views: usize,
    out: &Path,
) -> CliResult<(MetricsReport, EmbeddingSet)> {
    let (model, info) = load_checkpoint(checkpoint)?;
    let data = LabeledDataset::from_container(Container::load(dataset)?)?;
    let width = data.meta.height * data.meta.width * 3;
    if width != info.model.input_dim || data.num_classes() != info.model.num_classes {
        return Err(CliError::Core(s5cl::Error::ShapeMismatch {
            op: "evaluate",
            lhs: vec![width, data.num_classes()],
            rhs: vec![info.model.input_dim, info.model.num_classes],
        }));
    }
    let (report, set) = evaluate_model(
        &model,
        &data,
        &info.weak_augmentation,
        &info.strong_augmentation,
        views,
        &evaluation_stream(info.seed),
        info.eval_batch_size,
    )?;
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    fs::write(out.join("confusion.csv"), report.confusion_csv())?;
    fs::write(out.join("embeddings.csv"), set.to_csv())?;
    Ok((report, set))
}

/// One row of `sweep_results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub temperature_labeled: f64,
    pub temperature_unlabeled: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub map_at_r: f64,
    pub s_own: f64,
    pub s_pos: f64,
    pub s_neg: f64,
    pub ordering_fraction: f64,
    /// Median over the seeds sharing this row's mode and temperatures.
    pub median_accuracy: f64,
    pub median_macro_f1: f64,
    pub median_map_at_r: f64,
}

fn list<T: Clone>(name: &str, values: &Option<Vec<T>>, fallback: T) -> CliResult<Vec<T>> {
    match values {
        Some(v) if v.is_empty() => Err(CliError::Config(format!("sweep list `{name}` is empty"))),
        Some(v) => Ok(v.clone()),
        None => Ok(vec![fallback]),
    }
}

/// Configurations of every sweep run, in output order.
pub fn sweep_configs(cfg: &ExperimentConfig) -> CliResult<Vec<ExperimentConfig>> {
    let s = &cfg.sweep;
    let modes = list("modes", &s.modes, cfg.train.mode)?;
    let tls = list(
        "temperature_labeled",
        &s.temperature_labeled,
        cfg.train.loss.temperature_labeled,
    )?;
    let tus = list(
        "temperature_unlabeled",
        &s.temperature_unlabeled,
        cfg.train.loss.temperature_unlabeled,
    )?;
    let seeds = list("seeds", &s.seeds, cfg.seed)?;
    let total = modes.len() * tls.len() * tus.len() * seeds.len();
    if total > s.max_runs {
        return Err(CliError::Config(format!(
            "sweep has {total} runs, above max_runs = {}",
            s.max_runs
        )));
    }
    let mut runs = Vec::with_capacity(total);
    for &mode in &modes {
        for &tl in &tls {
            for &tu in &tus {
                for &seed in &seeds {
                    let mut c = cfg.clone().with_seed(seed);
                    c.train.mode = mode;
                    c.train.loss.temperature_labeled = tl;
                    c.train.loss.temperature_unlabeled = tu;
                    c.train.validate()?;
                    runs.push(c);
                }
            }
        }
    }
    Ok(runs)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Runs the sweep (optionally in parallel) and writes `sweep_results.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> CliResult<Vec<SweepRow>> {
    let runs = sweep_configs(cfg)?;
    fs::create_dir_all(out)?;
    let results: Mutex<Vec<Option<CliResult<MetricsReport>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(run) = runs.get(i) else { break };
        let dir = out.join(format!("run_{i:03}"));
        let r = cmd_train(run, &dir).and_then(|a| {
            a.metrics
                .ok_or_else(|| CliError::Config("sweep runs need a test split".into()))
        });
        results.lock().expect("no poisoned lock")[i] = Some(r);
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(work);
        }
    });
    let results = results.into_inner().expect("no poisoned lock");

    let mut rows = Vec::with_capacity(runs.len());
    for (i, (run, r)) in runs.iter().zip(results).enumerate() {
        let m = r.expect("every run visited")?;
        let h = m.hierarchy.clone().unwrap_or_default();
        rows.push(SweepRow {
            run: format!("run_{i:03}"),
            mode: run.train.mode,
            seed: run.seed,
            temperature_labeled: run.train.loss.temperature_labeled,
            temperature_unlabeled: run.train.loss.temperature_unlabeled,
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            map_at_r: m.map_at_r.unwrap_or(f64::NAN),
            s_own: h.s_own,
            s_pos: h.s_pos,
            s_neg: h.s_neg,
            ordering_fraction: h.ordering_fraction,
            median_accuracy: 0.0,
            median_macro_f1: 0.0,
            median_map_at_r: 0.0,
        });
    }
    let key = |r: &SweepRow| {
        (
            r.mode,
            r.temperature_labeled.to_bits(),
            r.temperature_unlabeled.to_bits(),
        )
    };
    let snapshot = rows.clone();
    for row in &mut rows {
        let group: Vec<&SweepRow> = snapshot.iter().filter(|o| key(o) == key(row)).collect();
        row.median_accuracy = median(group.iter().map(|o| o.accuracy).collect());
        row.median_macro_f1 = median(group.iter().map(|o| o.macro_f1).collect());
        row.median_map_at_r = median(group.iter().map(|o| o.map_at_r).collect());
    }
    let mut w = csv::Writer::from_path(out.join("sweep_results.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}
