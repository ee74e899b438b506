//! Training loop, mode presets and run records.
//!
//! Every step runs one forward pass over the concatenation of all views in
//! use (labeled weak, labeled strong, unlabeled weak, unlabeled strong) so
//! that the batch normalizer sees the whole step at once; the loss terms
//! slice their rows out of the shared embedding matrix.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPolicy, ImagePatch};
use crate::autodiff::{SeedStream, Tape, Var};
use crate::dataset::{
    images_to_tensor, make_dual_views, BatchPair, DualViewBatch, LabeledDataset,
    PairedBatchIterator, UnlabeledDataset,
};
use crate::error::{Error, Result};
use crate::evaluator::{classification_metrics, evaluate_model, predict_dataset, MetricsReport};
use crate::losses::{
    cross_entropy_loss, generate_pseudo_labels, pseudo_labeled_loss, self_supervised_loss,
    supcon_loss, total_loss, LossBreakdown, LossConfig, LossTerms,
};
use crate::model::{Mode, ModelConfig, S5CLModel};
use crate::optimizer::{zero_like_state, OptimizerConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    CrossEntropy,
    Supcon,
    S1cl,
    S3cl,
    S5cl,
    SelfSupervised,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        Self::CrossEntropy,
        Self::Supcon,
        Self::S1cl,
        Self::S3cl,
        Self::S5cl,
        Self::SelfSupervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CrossEntropy => "cross_entropy",
            Self::Supcon => "supcon",
            Self::S1cl => "s1cl",
            Self::S3cl => "s3cl",
            Self::S5cl => "s5cl",
            Self::SelfSupervised => "self_supervised",
        }
    }

    /// Whether the strong labeled view enters the supervised contrastive term.
    pub fn strong_labeled_view(self) -> bool {
        matches!(self, Self::S1cl | Self::S3cl | Self::S5cl)
    }

    pub fn needs_unlabeled(self) -> bool {
        matches!(self, Self::S3cl | Self::S5cl | Self::SelfSupervised)
    }

    pub fn needs_labeled(self) -> bool {
        self != Self::SelfSupervised
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loss weights and pseudo-label schedule implied by `mode`, with default
/// temperatures.
pub fn mode_presets(mode: TrainMode) -> LossConfig {
    let base = LossConfig::default();
    let (wl, wu, wp, wc, start) = match mode {
        TrainMode::CrossEntropy => (0.0, 0.0, 0.0, 1.0, None),
        TrainMode::Supcon | TrainMode::S1cl => (1.0, 0.0, 0.0, 1.0, None),
        TrainMode::S3cl => (1.0, 1.0, 0.0, 1.0, None),
        TrainMode::S5cl => (1.0, 1.0, 1.0, 1.0, base.pseudo_start_epoch),
        TrainMode::SelfSupervised => (0.0, 1.0, 0.0, 0.0, None),
    };
    LossConfig {
        weight_labeled: wl,
        weight_unlabeled: wu,
        weight_pseudo: wp,
        weight_cross_entropy: wc,
        pseudo_start_epoch: start,
        ..base
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingMetric {
    #[default]
    Accuracy,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Temperatures are taken from here. Weights come from the mode preset
    /// unless `custom_weights` is set.
    pub loss: LossConfig,
    pub custom_weights: bool,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub seed: u64,
    pub early_stopping_patience: Option<usize>,
    pub early_stopping_metric: StoppingMetric,
    pub weak_augmentation: AugmentationPolicy,
    pub strong_augmentation: AugmentationPolicy,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::S5cl,
            loss: LossConfig::default(),
            custom_weights: false,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 5,
            labeled_batch: 32,
            unlabeled_batch: 128,
            seed: 0,
            early_stopping_patience: None,
            early_stopping_metric: StoppingMetric::Accuracy,
            weak_augmentation: AugmentationPolicy::weak(),
            strong_augmentation: AugmentationPolicy::strong(),
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    /// The loss configuration actually used for training.
    pub fn effective_loss(&self) -> LossConfig {
        if self.custom_weights {
            return self.loss.clone();
        }
        let preset = mode_presets(self.mode);
        LossConfig {
            temperature_labeled: self.loss.temperature_labeled,
            temperature_unlabeled: self.loss.temperature_unlabeled,
            temperature_pseudo: self.loss.temperature_pseudo,
            pseudo_start_epoch: preset.pseudo_start_epoch.and(self.loss.pseudo_start_epoch),
            ..preset
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_loss().validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.weak_augmentation.validate()?;
        self.strong_augmentation.validate()?;
        if self.labeled_batch < 2 || self.unlabeled_batch < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Datasets handed to [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub labeled: &'a LabeledDataset,
    pub unlabeled: &'a UnlabeledDataset,
    pub validation: Option<&'a LabeledDataset>,
    pub test: Option<&'a LabeledDataset>,
}

/// Views for one training step.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub labeled: Option<DualViewBatch>,
    pub unlabeled: Option<DualViewBatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean of each term over the epoch's steps (inactive terms read 0).
    pub mean_loss: LossBreakdown,
    pub validation: Option<ValidationMetrics>,
    /// Accuracy of the epoch-end pseudo-labels against the hidden truth,
    /// filled in by [`audit_pseudo_labels`] after training.
    pub pseudo_label_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub step_log: Vec<StepLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub final_test: Option<MetricsReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_numerics(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub model: S5CLModel,
    /// Eval-mode predictions on the unlabeled set at the end of each epoch,
    /// kept for the post-hoc pseudo-label audit.
    pub unlabeled_predictions: Vec<Vec<usize>>,
}

/// Seed-stream labels, so that each consumer draws from its own stream.
mod streams {
    pub const INIT: u64 = 0;
    pub const BATCHES: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const EVAL: u64 = 3;
}

/// Forward pass and loss for one step; nothing is updated except the
/// normalizer's running statistics.
pub fn compute_loss(
    model: &mut S5CLModel,
    tape: &mut Tape,
    batch: &StepBatch,
    loss: &LossConfig,
    strong_labeled: bool,
    epoch: usize,
) -> Result<(Option<Var>, LossBreakdown)> {
    let schedule = loss.active_terms(epoch, batch.unlabeled.is_some());
    let use_labeled = batch.labeled.is_some() && (schedule.labeled || schedule.cross_entropy);
    let use_unlabeled = batch.unlabeled.is_some() && (schedule.unlabeled || schedule.pseudo);
    if !use_labeled && !use_unlabeled {
        return Ok((None, LossBreakdown::default()));
    }

    let mut images: Vec<ImagePatch> = Vec::new();
    let mut lab_rows = (0, 0, 0);
    if let Some(l) = batch.labeled.as_ref().filter(|_| use_labeled) {
        images.extend(l.weak.iter().cloned());
        let with_strong = strong_labeled && schedule.labeled;
        if with_strong {
            images.extend(l.strong.iter().cloned());
        }
        lab_rows = (0, l.weak.len(), images.len());
    }
    let mut unl_rows = (0, 0, 0);
    if let Some(u) = batch.unlabeled.as_ref().filter(|_| use_unlabeled) {
        let start = images.len();
        images.extend(u.weak.iter().cloned());
        images.extend(u.strong.iter().cloned());
        unl_rows = (start, start + u.weak.len(), images.len());
    }

    let bound = model.bind(tape)?;
    let x = tape.constant(images_to_tensor(&images)?)?;
    let emb = model.embed(tape, &bound, x)?;
    let mut terms = LossTerms::default();

    if let Some(l) = batch.labeled.as_ref().filter(|_| use_labeled) {
        let (start, mid, end) = lab_rows;
        let weak = tape.slice_rows(emb, start, mid)?;
        if schedule.cross_entropy {
            let logits = model.classify(tape, &bound, weak)?;
            terms.cross_entropy = Some(cross_entropy_loss(tape, logits, &l.labels)?);
        }
        if schedule.labeled {
            let rows = tape.slice_rows(emb, start, end)?;
            let labels: Vec<usize> = if end > mid {
                l.labels.iter().chain(&l.labels).copied().collect()
            } else {
                l.labels.clone()
            };
            terms.labeled = Some(supcon_loss(tape, rows, &labels, loss.temperature_labeled)?.0);
        }
    }
    if use_unlabeled {
        let (start, mid, end) = unl_rows;
        let weak = tape.slice_rows(emb, start, mid)?;
        let strong = tape.slice_rows(emb, mid, end)?;
        if schedule.unlabeled {
            terms.unlabeled = Some(self_supervised_loss(
                tape,
                weak,
                strong,
                loss.temperature_unlabeled,
            )?);
        }
        if schedule.pseudo {
            // detached: read plain values, no tape involvement
            let logits = model.classify_values(tape.value(weak))?;
            let pseudo = generate_pseudo_labels(&logits);
            terms.pseudo = Some(pseudo_labeled_loss(
                tape,
                weak,
                strong,
                &pseudo,
                model.config().num_classes,
                loss.pseudo_temperature(),
            )?);
        }
    }
    let (total, breakdown) = total_loss(tape, &terms, loss, epoch)?;
    Ok((Some(total), breakdown))
}

/// One optimizer step. Returns the pre-update loss breakdown.
pub fn train_step(
    model: &mut S5CLModel,
    optimizer: &mut OptimizerState,
    batch: &StepBatch,
    loss: &LossConfig,
    strong_labeled: bool,
    epoch: usize,
) -> Result<LossBreakdown> {
    if model.mode() != Mode::Train {
        return Err(Error::InvalidArgument(
            "train_step needs a model in train mode".into(),
        ));
    }
    let mut tape = Tape::new();
    let (total, breakdown) = compute_loss(model, &mut tape, batch, loss, strong_labeled, epoch)?;
    let Some(total) = total.filter(|_| breakdown.active.any()) else {
        return Ok(breakdown);
    };
    let grads = tape.backward(total)?;
    optimizer.step(model.param_tensors_mut(), &grads)?;
    Ok(breakdown)
}

/// Augments the images of `pair` for the terms `mode` needs.
pub fn prepare_batch(
    pair: &BatchPair,
    data: &TrainData<'_>,
    config: &TrainConfig,
    stream: &SeedStream,
) -> Result<StepBatch> {
    let mode = config.mode;
    let weak = &config.weak_augmentation;
    let strong = &config.strong_augmentation;
    let labeled = if mode.needs_labeled() && !pair.labeled.is_empty() {
        let imgs: Vec<&ImagePatch> = pair
            .labeled
            .iter()
            .map(|&i| &data.labeled.images[i])
            .collect();
        let labels: Vec<usize> = pair
            .labeled
            .iter()
            .map(|&i| data.labeled.labels[i])
            .collect();
        let strong = mode.strong_labeled_view().then_some(strong);
        Some(make_dual_views(
            &imgs,
            &pair.labeled,
            Some(&labels),
            weak,
            strong,
            &stream.derive(0),
        )?)
    } else {
        None
    };
    let unlabeled = if mode.needs_unlabeled() && !pair.unlabeled.is_empty() {
        let imgs: Vec<&ImagePatch> = pair
            .unlabeled
            .iter()
            .map(|&i| &data.unlabeled.images[i])
            .collect();
        Some(make_dual_views(
            &imgs,
            &pair.unlabeled,
            None,
            weak,
            Some(strong),
            &stream.derive(1),
        )?)
    } else {
        None
    };
    Ok(StepBatch { labeled, unlabeled })
}

fn validation_metrics(
    model: &S5CLModel,
    data: &LabeledDataset,
    bs: usize,
) -> Result<ValidationMetrics> {
    let (pred, _) = predict_dataset(model, data, bs)?;
    let r = classification_metrics(&pred, &data.labels, data.num_classes())?;
    Ok(ValidationMetrics {
        accuracy: r.accuracy,
        macro_f1: r.macro_f1,
    })
}

fn check_data(config: &TrainConfig, data: &TrainData<'_>) -> Result<()> {
    let mode = config.mode;
    if mode.needs_unlabeled() && data.unlabeled.is_empty() {
        return Err(Error::Config(format!("mode {mode} needs unlabeled images")));
    }
    if mode.needs_labeled() && data.labeled.len() < 2 {
        return Err(Error::Config(format!(
            "mode {mode} needs at least 2 labeled images"
        )));
    }
    let k = config.model.num_classes;
    if mode.needs_labeled() && data.labeled.num_classes() != k {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {k}",
            data.labeled.num_classes()
        )));
    }
    let expected = config.model.input_dim;
    let sizes = data
        .labeled
        .images
        .iter()
        .chain(&data.unlabeled.images)
        .map(|i| i.pixels().len());
    if let Some(bad) = sizes.into_iter().find(|&s| s != expected) {
        return Err(Error::Config(format!(
            "patch has {bad} values, model input_dim is {expected}"
        )));
    }
    Ok(())
}

/// Full training run: per-epoch paired iteration, validation, optional
/// early stopping and a final test evaluation.
///
/// The unlabeled ground truth is never read here.
pub fn run_training(config: &TrainConfig, data: &TrainData<'_>) -> Result<TrainOutput> {
    config.validate()?;
    check_data(config, data)?;
    let started = Instant::now();
    let root = SeedStream::new(config.seed);
    let loss = config.effective_loss();
    let mut model = S5CLModel::init_parameters(&config.model, &mut root.derive(streams::INIT))?;
    let mut optimizer = zero_like_state(model.params(), &config.optimizer);
    let n_labeled = if config.mode.needs_labeled() {
        data.labeled.len()
    } else {
        0
    };
    let mut batches = PairedBatchIterator::new(
        n_labeled,
        data.unlabeled.len(),
        config.labeled_batch,
        config.unlabeled_batch,
        root.derive(streams::BATCHES),
    )?;
    let augment = root.derive(streams::AUGMENT);
    let track_pseudo = loss.weight_pseudo > 0.0 && !data.unlabeled.is_empty();

    let mut record = RunRecord {
        mode: config.mode,
        seed: config.seed,
        epochs: Vec::new(),
        step_log: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        final_test: None,
        wall_clock_secs: 0.0,
    };
    let mut unlabeled_predictions = Vec::new();
    let mut best: Option<(f64, usize, S5CLModel)> = None;

    for epoch in 0..config.epochs {
        model.set_mode(Mode::Train);
        let pairs = batches.epoch();
        let mut sums = LossBreakdown::default();
        let epoch_stream = augment.derive(epoch as u64);
        for (step, pair) in pairs.iter().enumerate() {
            let batch = prepare_batch(pair, data, config, &epoch_stream.derive(step as u64))?;
            let b = train_step(
                &mut model,
                &mut optimizer,
                &batch,
                &loss,
                config.mode.strong_labeled_view(),
                epoch,
            )?;
            sums.labeled += b.labeled;
            sums.unlabeled += b.unlabeled;
            sums.pseudo += b.pseudo;
            sums.cross_entropy += b.cross_entropy;
            sums.total += b.total;
            sums.active = b.active;
            record.step_log.push(StepLog {
                epoch,
                step,
                breakdown: b,
            });
        }
        let n = pairs.len().max(1) as f64;
        let mean_loss = LossBreakdown {
            labeled: sums.labeled / n,
            unlabeled: sums.unlabeled / n,
            pseudo: sums.pseudo / n,
            cross_entropy: sums.cross_entropy / n,
            total: sums.total / n,
            active: sums.active,
        };
        model.set_mode(Mode::Eval);
        let validation = match data.validation.filter(|v| !v.is_empty()) {
            Some(v) => Some(validation_metrics(&model, v, config.eval_batch_size)?),
            None => None,
        };
        if track_pseudo {
            let u = LabeledDataset {
                images: data.unlabeled.images.clone(),
                labels: vec![0; data.unlabeled.len()],
                class_names: vec![String::new(); config.model.num_classes],
                meta: Default::default(),
            };
            unlabeled_predictions.push(predict_dataset(&model, &u, config.eval_batch_size)?.0);
        }
        log::info!(
            "epoch {epoch}: loss {:.4}, validation {:?}",
            mean_loss.total,
            validation
        );
        record.epochs.push(EpochRecord {
            epoch,
            steps: pairs.len(),
            mean_loss,
            validation: validation.clone(),
            pseudo_label_accuracy: None,
        });

        if let (Some(patience), Some(v)) = (config.early_stopping_patience, &validation) {
            let score = match config.early_stopping_metric {
                StoppingMetric::Accuracy => v.accuracy,
                StoppingMetric::MacroF1 => v.macro_f1,
            };
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, model.clone()));
            } else if epoch - best.as_ref().map_or(epoch, |b| b.1) >= patience {
                record.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, epoch, snapshot)) = best {
        record.best_epoch = Some(epoch);
        model = snapshot;
    }
    model.set_mode(Mode::Eval);
    if let Some(test) = data.test.filter(|t| !t.is_empty()) {
        let (report, _) = evaluate_model(
            &model,
            test,
            &config.weak_augmentation,
            &config.strong_augmentation,
            1,
            &root.derive(streams::EVAL),
            config.eval_batch_size,
        )?;
        record.final_test = Some(report);
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutput {
        record,
        model,
        unlabeled_predictions,
    })
}

/// Seed stream used for the final test evaluation of a run with `seed`.
pub fn evaluation_stream(seed: u64) -> SeedStream {
    SeedStream::new(seed).derive(streams::EVAL)
}

/// Fills each epoch's pseudo-label accuracy from the hidden truth.
///
/// This is the only place the unlabeled ground truth is read, and it runs
/// strictly after training.
pub fn audit_pseudo_labels(
    record: &mut RunRecord,
    predictions: &[Vec<usize>],
    unlabeled: &UnlabeledDataset,
) {
    if predictions.is_empty() {
        return;
    }
    let truth = unlabeled.hidden_truth().reveal();
    if truth.len() != unlabeled.len() {
        return;
    }
    for (epoch, pred) in record.epochs.iter_mut().zip(predictions) {
        let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
        epoch.pseudo_label_accuracy = Some(hits as f64 / truth.len().max(1) as f64);
    }
}
