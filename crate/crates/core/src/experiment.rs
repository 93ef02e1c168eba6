//! Run configuration, task data, the training loop and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::artifacts::{self, ArtifactError, CheckpointManifest, MetricRecord, RngState};
use crate::cells::{CellDims, CellError, CellKind, CellParameters, CellSpec, CellState, ParameterCounts};
use crate::diagnostics::{self, DiagError, SweepRow};
use crate::kron::{auto_2x2_shapes, FactorShape};
use crate::linalg::Field;
use crate::rng::{derive_seed, rng_from_seed, stream_rng, streams};
use crate::tasks::{self, CharWindows, CorpusSplit, DataError, MnistDataset, PixelPermutation, TaskBatch};
use crate::training::{self, LossOptions, OptimizerConfig, OptimizerState, PlateauDecay, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at update {step} (loss {loss}); see {dump}")]
    Diverged { step: u64, loss: f64, dump: PathBuf },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

impl From<CellError> for ExperimentError {
    fn from(e: CellError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Shape(s) => ExperimentError::Config(s),
            TrainError::Cell(c) => c.into(),
            other => ExperimentError::Train(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Adding,
    Mnist,
    MnistPermuted,
    Charlm,
}

impl TaskKind {
    pub fn metric(self) -> MetricKind {
        match self {
            TaskKind::Copy => MetricKind::CrossEntropy,
            TaskKind::Adding => MetricKind::Mse,
            TaskKind::Mnist | TaskKind::MnistPermuted => MetricKind::Accuracy,
            TaskKind::Charlm => MetricKind::BitsPerChar,
        }
    }

    pub fn is_synthetic(self) -> bool {
        matches!(self, TaskKind::Copy | TaskKind::Adding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    CrossEntropy,
    Mse,
    Accuracy,
    BitsPerChar,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        self == MetricKind::Accuracy
    }

    /// Whether `a` beats `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    /// Metric oriented so that lower is better.
    pub fn as_loss(self, v: f64) -> f64 {
        if self.higher_is_better() {
            -v
        } else {
            v
        }
    }
}

/// `"auto-2x2"` or an explicit list of `[p, q]` factor shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FactorShapesConfig {
    Named(String),
    Explicit(Vec<[usize; 2]>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Update budget for the synthetic tasks.
    pub updates: u64,
    /// Epoch budget for the data-backed tasks.
    pub epochs: u64,
    pub batch_size: usize,
    /// Truncated BPTT window in steps; whole sequence when absent.
    pub bptt_window: Option<usize>,
    /// Learning-rate factor applied when validation stalls.
    pub lr_decay: f64,
    pub plateau_decay: bool,
    pub gradient_clip: Option<f64>,
    /// Soft unitary penalty amplitude λ.
    pub unitary_amplitude: f64,
    pub penalize_gated: bool,
    pub log_every: u64,
    /// Validation cadence for the synthetic tasks, in updates.
    pub eval_every: u64,
    pub checkpoint_every: Option<u64>,
    /// Stop as soon as validation reaches this value.
    pub target_valid_metric: Option<f64>,
    pub max_wallclock_s: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            updates: 10_000,
            epochs: 10,
            batch_size: 20,
            bptt_window: None,
            lr_decay: 0.3,
            plateau_decay: false,
            gradient_clip: None,
            unitary_amplitude: 0.0,
            penalize_gated: false,
            log_every: 100,
            eval_every: 500,
            checkpoint_every: None,
            target_valid_metric: None,
            max_wallclock_s: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    /// Separate test files; without them the validation split doubles as test.
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    /// Samples held out from the MNIST training file for validation.
    pub valid_size: usize,
    pub train_limit: Option<usize>,
    /// Pixel permutation seed; defaults to one derived from the run seed.
    pub permutation_seed: Option<u64>,
    pub corpus_train: Option<PathBuf>,
    pub corpus_valid: Option<PathBuf>,
    pub corpus_test: Option<PathBuf>,
    /// Validation and test set size for the synthetic tasks.
    pub eval_sequences: usize,
    pub eval_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mnist_images: None,
            mnist_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
            valid_size: 1000,
            train_limit: None,
            permutation_seed: None,
            corpus_train: None,
            corpus_valid: None,
            corpus_test: None,
            eval_sequences: 1000,
            eval_batch: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub model: CellKind,
    /// Defaults to complex for KRU and real otherwise.
    #[serde(default)]
    pub field: Option<Field>,
    pub hidden: usize,
    /// Copy delay or adding-problem length.
    #[serde(default)]
    pub seq_len: Option<usize>,
    #[serde(default)]
    pub factor_shapes: Option<FactorShapesConfig>,
    #[serde(default)]
    pub frozen_recurrent: bool,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.mnist_images,
            &mut d.mnist_labels,
            &mut d.mnist_test_images,
            &mut d.mnist_test_labels,
            &mut d.corpus_train,
            &mut d.corpus_valid,
            &mut d.corpus_test,
            &mut self.resume_from,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn field(&self) -> Field {
        self.field.unwrap_or(if self.model == CellKind::Kru { Field::Complex } else { Field::Real })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len.unwrap_or(100)
    }

    pub fn factor_shapes(&self) -> Result<Option<Vec<FactorShape>>> {
        if !self.model.is_kronecker() {
            return Ok(None);
        }
        match &self.factor_shapes {
            None => auto_2x2_shapes(self.hidden)
                .map(Some)
                .ok_or_else(|| config_err(format!("hidden size {} is not a power of two; give factor_shapes", self.hidden))),
            Some(FactorShapesConfig::Named(n)) if n == "auto-2x2" => self.factor_shapes_auto(),
            Some(FactorShapesConfig::Named(n)) => Err(config_err(format!("unknown factor_shapes {n:?}"))),
            Some(FactorShapesConfig::Explicit(list)) => list
                .iter()
                .map(|&[p, q]| FactorShape::new(p, q).map_err(|e| config_err(e.to_string())))
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    fn factor_shapes_auto(&self) -> Result<Option<Vec<FactorShape>>> {
        auto_2x2_shapes(self.hidden)
            .map(Some)
            .ok_or_else(|| config_err(format!("auto-2x2 needs a power-of-two hidden size, got {}", self.hidden)))
    }

    /// Schema checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if self.hidden == 0 {
            return Err(config_err("hidden must be positive"));
        }
        if s.batch_size == 0 {
            return Err(config_err("schedule.batch_size must be positive"));
        }
        if s.log_every == 0 || s.eval_every == 0 {
            return Err(config_err("log_every and eval_every must be positive"));
        }
        if !(self.optimizer.learning_rate > 0.0) || !self.optimizer.learning_rate.is_finite() {
            return Err(config_err("optimizer.learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.optimizer.decay) {
            return Err(config_err("optimizer.decay must be in [0, 1)"));
        }
        if !(s.lr_decay > 0.0 && s.lr_decay <= 1.0) {
            return Err(config_err("schedule.lr_decay must be in (0, 1]"));
        }
        if !(s.unitary_amplitude >= 0.0) {
            return Err(config_err("schedule.unitary_amplitude must be non-negative"));
        }
        if s.bptt_window == Some(0) || s.gradient_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err("bptt_window and gradient_clip must be positive"));
        }
        if self.seq_len == Some(0) {
            return Err(config_err("seq_len must be positive"));
        }
        if self.data.eval_batch == 0 || self.data.eval_sequences == 0 {
            return Err(config_err("data.eval_batch and data.eval_sequences must be positive"));
        }
        match self.task {
            TaskKind::Mnist | TaskKind::MnistPermuted => {
                if self.data.mnist_images.is_none() || self.data.mnist_labels.is_none() {
                    return Err(config_err("mnist tasks need data.mnist_images and data.mnist_labels"));
                }
            }
            TaskKind::Charlm => {
                if self.data.corpus_train.is_none() || self.data.corpus_valid.is_none() || self.data.corpus_test.is_none() {
                    return Err(config_err("charlm needs data.corpus_train, corpus_valid and corpus_test"));
                }
            }
            _ => {}
        }
        // Check the cell description with placeholder task dimensions.
        self.cell_spec(1, 1)?.validate()?;
        Ok(())
    }

    pub fn cell_spec(&self, input: usize, output: usize) -> Result<CellSpec> {
        let spec = CellSpec {
            kind: self.model,
            field: self.field(),
            dims: CellDims {
                input,
                hidden: self.hidden,
                output,
            },
            factor_shapes: self.factor_shapes()?,
            frozen_recurrent: self.frozen_recurrent,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 over the canonical JSON of every setting that shapes the
    /// model and its data, excluding output and resume locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.resume_from = None;
        let value = serde_json::to_value(&c).expect("config serializes");
        let canonical = serde_json::to_vec(&value).expect("value serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            penalty_amplitude: self.schedule.unitary_amplitude,
            penalize_gated: self.schedule.penalize_gated,
            bptt_window: if self.task == TaskKind::Charlm { None } else { self.schedule.bptt_window },
        }
    }
}

/// Loaded evaluation sets and training sources.
pub enum TaskData {
    Synthetic {
        valid: Vec<TaskBatch>,
        test: Vec<TaskBatch>,
    },
    Mnist {
        train: MnistDataset,
        valid: MnistDataset,
        test: MnistDataset,
    },
    Char {
        corpus: CorpusSplit,
    },
}

fn synthetic_batch(cfg: &RunConfig, batch: usize, seed: u64) -> Result<TaskBatch> {
    Ok(match cfg.task {
        TaskKind::Copy => tasks::gen_copy_batch(cfg.seq_len(), batch, seed)?,
        TaskKind::Adding => tasks::gen_adding_batch(cfg.seq_len(), batch, seed)?,
        _ => unreachable!("not a synthetic task"),
    })
}

fn synthetic_set(cfg: &RunConfig, stream: u64) -> Result<Vec<TaskBatch>> {
    let total = cfg.data.eval_sequences;
    let chunk = cfg.data.eval_batch;
    (0..total.div_ceil(chunk))
        .map(|i| synthetic_batch(cfg, chunk.min(total - i * chunk), derive_seed(cfg.seed, stream, i as u64)))
        .collect()
}

pub fn load_task_data(cfg: &RunConfig) -> Result<TaskData> {
    match cfg.task {
        TaskKind::Copy | TaskKind::Adding => Ok(TaskData::Synthetic {
            valid: synthetic_set(cfg, streams::VALID_DATA)?,
            test: synthetic_set(cfg, streams::TEST_DATA)?,
        }),
        TaskKind::Mnist | TaskKind::MnistPermuted => {
            let d = &cfg.data;
            let images = d.mnist_images.as_ref().expect("validated");
            let labels = d.mnist_labels.as_ref().expect("validated");
            let full = tasks::load_mnist_idx(images, labels)?.shuffled(cfg.seed);
            let (mut train, valid) = full.split_validation(d.valid_size)?;
            if let Some(limit) = d.train_limit {
                train = train.truncate(limit);
            }
            let test = match (&d.mnist_test_images, &d.mnist_test_labels) {
                (Some(i), Some(l)) => tasks::load_mnist_idx(i, l)?,
                _ => valid.clone(),
            };
            let perm = if cfg.task == TaskKind::MnistPermuted {
                PixelPermutation::from_seed(Some(d.permutation_seed.unwrap_or(derive_seed(cfg.seed, streams::PERMUTATION, 0))))
            } else {
                PixelPermutation::identity()
            };
            Ok(TaskData::Mnist {
                train: tasks::permute_pixels(&train, &perm),
                valid: tasks::permute_pixels(&valid, &perm),
                test: tasks::permute_pixels(&test, &perm),
            })
        }
        TaskKind::Charlm => {
            let d = &cfg.data;
            let corpus = tasks::load_char_corpus(
                d.corpus_train.as_ref().expect("validated"),
                d.corpus_valid.as_ref().expect("validated"),
                d.corpus_test.as_ref().expect("validated"),
            )?;
            Ok(TaskData::Char { corpus })
        }
    }
}

impl TaskData {
    /// `(input, output)` dimensions the model must have.
    pub fn dims(&self, task: TaskKind) -> (usize, usize) {
        match (self, task) {
            (TaskData::Synthetic { .. }, TaskKind::Copy) => (tasks::COPY_CLASSES, tasks::COPY_CLASSES),
            (TaskData::Synthetic { .. }, _) => (2, 1),
            (TaskData::Mnist { .. }, _) => (1, 10),
            (TaskData::Char { corpus }, _) => (corpus.vocab.size(), corpus.vocab.size()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

#[derive(Default)]
struct MetricAccumulator {
    loss: f64,
    weight: f64,
    correct: usize,
    scored: usize,
}

impl MetricAccumulator {
    fn add(&mut self, out: &training::EvalOutput, masked: usize) {
        self.loss += out.loss * masked as f64;
        self.weight += masked as f64;
        self.correct += out.correct;
        self.scored += out.scored;
    }

    fn value(&self, metric: MetricKind) -> f64 {
        let mean = if self.weight > 0.0 { self.loss / self.weight } else { 0.0 };
        match metric {
            MetricKind::CrossEntropy | MetricKind::Mse => mean,
            MetricKind::BitsPerChar => tasks::bits_per_char(mean),
            MetricKind::Accuracy => {
                if self.scored == 0 {
                    0.0
                } else {
                    self.correct as f64 / self.scored as f64
                }
            }
        }
    }
}

/// Deterministic metric of `params` on a held-out split.
pub fn evaluate_split(cfg: &RunConfig, data: &TaskData, params: &CellParameters, split: Split) -> Result<f64> {
    let metric = cfg.task.metric();
    let mut acc = MetricAccumulator::default();
    match data {
        TaskData::Synthetic { valid, test } => {
            for batch in if split == Split::Valid { valid } else { test } {
                acc.add(&training::evaluate(params, batch, None)?, batch.masked_count());
            }
        }
        TaskData::Mnist { valid, test, .. } => {
            let set = if split == Split::Valid { valid } else { test };
            let idx: Vec<usize> = (0..set.len()).collect();
            for chunk in idx.chunks(cfg.data.eval_batch) {
                let batch = tasks::mnist_batch(set, chunk);
                acc.add(&training::evaluate(params, &batch, None)?, batch.masked_count());
            }
        }
        TaskData::Char { corpus } => {
            let text = if split == Split::Valid { &corpus.valid } else { &corpus.test };
            let window = cfg.schedule.bptt_window.unwrap_or(100);
            let lanes = cfg.data.eval_batch.min((text.len().saturating_sub(1)).max(1));
            let mut state: Option<CellState> = None;
            for batch in CharWindows::new(text, corpus.vocab.size(), lanes, window)? {
                let out = training::evaluate(params, &batch, state.as_ref())?;
                acc.add(&out, batch.masked_count());
                state = Some(out.final_state);
            }
        }
    }
    Ok(acc.value(metric))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub train_loss: f64,
    pub valid_metric: Option<f64>,
    pub lr: f64,
    pub penalty: f64,
    pub wallclock_s: f64,
}

pub const CURVE_HEADER: &str = "step,train_loss,valid_metric,lr,penalty,wallclock_s";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let valid = r.valid_metric.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.step, r.train_loss, valid, r.lr, r.penalty, r.wallclock_s
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: TaskKind,
    pub model: CellKind,
    pub field: Field,
    pub hidden: usize,
    pub metric: MetricKind,
    pub updates: u64,
    pub epochs: u64,
    pub best_valid_metric: f64,
    pub best_step: u64,
    pub final_valid_metric: f64,
    /// Test metric of the parameters with the best validation metric.
    pub test_metric: f64,
    pub parameters: ParameterCounts,
    pub config_hash: String,
    pub stop_reason: String,
    pub wallclock_s: f64,
}

pub struct RunResult {
    pub summary: RunSummary,
    pub final_params: CellParameters,
    pub best_params: CellParameters,
    pub curve: Vec<CurveRow>,
}

pub const CURVE_FILE: &str = "learning_curve.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const DIVERGENCE_FILE: &str = "divergence.json";

struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a TaskData,
    out_dir: &'a Path,
    hash: String,
    params: CellParameters,
    opt: OptimizerState,
    plateau: PlateauDecay,
    loss_opts: LossOptions,
    step: u64,
    epoch: u64,
    history: Vec<MetricRecord>,
    best: Option<(f64, u64, CellParameters)>,
    curve: Vec<CurveRow>,
    window_loss: f64,
    window_count: u64,
    last_penalty: f64,
    last_valid: Option<f64>,
    recent_losses: Vec<f64>,
    started: Instant,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: u64,
    loss: f64,
    learning_rate: f64,
    recent_train_losses: &'a [f64],
    metric_history: &'a [MetricRecord],
    spectral: Vec<diagnostics::SpectralReport>,
}

impl Trainer<'_> {
    fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            version: artifacts::CHECKPOINT_VERSION,
            config_hash: self.hash.clone(),
            step: self.step,
            learning_rate: self.opt.learning_rate(),
            best_valid_metric: self.best.as_ref().map(|b| b.0),
            metric_history: self.history.clone(),
            rng: RngState {
                seed: self.cfg.seed,
                next_batch: self.step,
                epoch: self.epoch,
            },
            cell: self.params_spec(),
            tensors: vec![],
            payload_len: 0,
            optimizer: None,
        }
    }

    fn params_spec(&self) -> CellSpec {
        let (i, o) = self.data.dims(self.cfg.task);
        self.cfg.cell_spec(i, o).expect("validated")
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn out_of_time(&self) -> bool {
        self.cfg.schedule.max_wallclock_s.is_some_and(|m| self.elapsed() >= m)
    }

    fn diverged(&self, loss: f64) -> ExperimentError {
        let dump = self.out_dir.join(DIVERGENCE_FILE);
        let spectral = diagnostics::model_reports(&self.params).unwrap_or_default();
        let report = DivergenceDump {
            step: self.step,
            loss,
            learning_rate: self.opt.learning_rate(),
            recent_train_losses: &self.recent_losses,
            metric_history: &self.history,
            spectral,
        };
        if let Err(e) = artifacts::write_json_atomic(&dump, &report) {
            log::error!("could not write divergence dump: {e}");
        }
        ExperimentError::Diverged {
            step: self.step,
            loss,
            dump,
        }
    }

    /// One optimizer update. Returns the carried state for stateful tasks.
    fn update(&mut self, batch: &TaskBatch, state: Option<&CellState>) -> Result<CellState> {
        let out = match training::bptt_loss_and_grads(&self.params, batch, state, &self.loss_opts) {
            Ok(o) => o,
            Err(TrainError::Diverged(loss)) => return Err(self.diverged(loss)),
            Err(e) => return Err(e.into()),
        };
        let mut grads = out.grads;
        let norm = match self.cfg.schedule.gradient_clip {
            Some(c) => training::clip_gradients(&mut grads, c),
            None => training::grad_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(self.diverged(norm));
        }
        self.opt.update(&mut self.params, &grads);
        self.step += 1;
        self.window_loss += out.task_loss;
        self.window_count += 1;
        self.last_penalty = out.penalty;
        if self.recent_losses.len() == 20 {
            self.recent_losses.remove(0);
        }
        self.recent_losses.push(out.loss);
        if self.step % self.cfg.schedule.log_every == 0 {
            self.log_row()?;
        }
        if let Some(every) = self.cfg.schedule.checkpoint_every {
            if self.step % every == 0 {
                self.save(FINAL_CHECKPOINT, &self.params.clone())?;
            }
        }
        Ok(out.final_state)
    }

    fn log_row(&mut self) -> Result<()> {
        if self.window_count == 0 {
            return Ok(());
        }
        let row = CurveRow {
            step: self.step,
            train_loss: self.window_loss / self.window_count as f64,
            valid_metric: self.last_valid.take(),
            lr: self.opt.learning_rate(),
            penalty: self.last_penalty,
            wallclock_s: self.elapsed(),
        };
        log::info!(
            "step {} loss {:.5} valid {:?} lr {:.2e}",
            row.step,
            row.train_loss,
            row.valid_metric,
            row.lr
        );
        self.curve.push(row);
        self.window_loss = 0.0;
        self.window_count = 0;
        artifacts::write_atomic(&self.out_dir.join(CURVE_FILE), curve_csv(&self.curve).as_bytes())?;
        Ok(())
    }

    fn save(&self, name: &str, params: &CellParameters) -> Result<()> {
        artifacts::save_checkpoint(&self.out_dir.join(name), self.manifest(), params, Some(&self.opt))?;
        Ok(())
    }

    /// Runs validation; returns true when the target metric is reached.
    fn validate(&mut self) -> Result<bool> {
        let metric = self.cfg.task.metric();
        let v = evaluate_split(self.cfg, self.data, &self.params, Split::Valid)?;
        if !v.is_finite() {
            return Err(self.diverged(v));
        }
        self.history.push(MetricRecord {
            step: self.step,
            valid_metric: v,
        });
        match self.curve.last_mut() {
            // The row for this step is already written; fill it in.
            Some(row) if row.step == self.step && row.valid_metric.is_none() => {
                row.valid_metric = Some(v);
                artifacts::write_atomic(&self.out_dir.join(CURVE_FILE), curve_csv(&self.curve).as_bytes())?;
            }
            _ => self.last_valid = Some(v),
        }
        if self.cfg.schedule.plateau_decay {
            let lr = self.plateau.observe(metric.as_loss(v), self.opt.learning_rate());
            self.opt.set_learning_rate(lr);
        }
        if self.best.as_ref().is_none_or(|b| metric.better(v, b.0)) {
            self.best = Some((v, self.step, self.params.clone()));
            self.save(BEST_CHECKPOINT, &self.params.clone())?;
        }
        Ok(self
            .cfg
            .schedule
            .target_valid_metric
            .is_some_and(|t| metric.better(v, t) || v == t))
    }

    fn run(&mut self) -> Result<String> {
        let s = self.cfg.schedule.clone();
        match self.data {
            TaskData::Synthetic { .. } => {
                while self.step < s.updates {
                    let seed = derive_seed(self.cfg.seed, streams::TRAIN_DATA, self.step);
                    let batch = synthetic_batch(self.cfg, s.batch_size, seed)?;
                    self.update(&batch, None)?;
                    if self.step % s.eval_every == 0 && self.step < s.updates && self.validate()? {
                        return Ok("target reached".into());
                    }
                    if self.out_of_time() {
                        return Ok("wallclock limit".into());
                    }
                }
                Ok("update budget".into())
            }
            TaskData::Mnist { train, .. } => {
                while self.epoch < s.epochs {
                    let mut order: Vec<usize> = (0..train.len()).collect();
                    order.shuffle(&mut rng_from_seed(derive_seed(self.cfg.seed, streams::SHUFFLE, self.epoch)));
                    for chunk in order.chunks(s.batch_size) {
                        self.update(&tasks::mnist_batch(train, chunk), None)?;
                        if self.out_of_time() {
                            return Ok("wallclock limit".into());
                        }
                    }
                    self.epoch += 1;
                    if self.epoch < s.epochs && self.validate()? {
                        return Ok("target reached".into());
                    }
                }
                Ok("epoch budget".into())
            }
            TaskData::Char { corpus } => {
                let window = s.bptt_window.unwrap_or(100);
                while self.epoch < s.epochs {
                    let mut state: Option<CellState> = None;
                    for batch in CharWindows::new(&corpus.train, corpus.vocab.size(), s.batch_size, window)? {
                        state = Some(self.update(&batch, state.as_ref())?);
                        if self.out_of_time() {
                            return Ok("wallclock limit".into());
                        }
                    }
                    self.epoch += 1;
                    if self.epoch < s.epochs && self.validate()? {
                        return Ok("target reached".into());
                    }
                }
                Ok("epoch budget".into())
            }
        }
    }
}

/// Trains one model and writes the learning curve, checkpoints and summary
/// into `out_dir`.
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<RunResult> {
    let data = load_task_data(cfg)?;
    run_training_with_data(cfg, &data, out_dir)
}

pub fn run_training_with_data(cfg: &RunConfig, data: &TaskData, out_dir: &Path) -> Result<RunResult> {
    let (input, output) = data.dims(cfg.task);
    let spec = cfg.cell_spec(input, output)?;
    let hash = cfg.hash();
    let started = Instant::now();
    let (params, opt, step, epoch, history) = match &cfg.resume_from {
        Some(path) => {
            let ckpt = artifacts::load_checkpoint(path)?;
            if ckpt.manifest.config_hash != hash {
                return Err(config_err(format!("{} was written for a different config", path.display())));
            }
            let mut opt = ckpt.optimizer.unwrap_or_else(|| OptimizerState::new(cfg.optimizer, &ckpt.params));
            opt.set_learning_rate(ckpt.manifest.learning_rate);
            let m = ckpt.manifest;
            (ckpt.params, opt, m.step, m.rng.epoch, m.metric_history)
        }
        None => {
            let params = CellParameters::init(&spec, &mut stream_rng(cfg.seed, streams::INIT))?;
            let opt = OptimizerState::new(cfg.optimizer, &params);
            (params, opt, 0, 0, vec![])
        }
    };
    let mut trainer = Trainer {
        cfg,
        data,
        out_dir,
        hash: hash.clone(),
        params,
        opt,
        plateau: PlateauDecay::new(cfg.schedule.lr_decay),
        loss_opts: cfg.loss_options(),
        step,
        epoch,
        history,
        best: None,
        curve: vec![],
        window_loss: 0.0,
        window_count: 0,
        last_penalty: 0.0,
        last_valid: None,
        recent_losses: vec![],
        started,
    };
    std::fs::create_dir_all(out_dir).map_err(|source| ArtifactError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let reason = trainer.run()?;
    // Closing validation so the final checkpoint's metric is on record.
    let reached = trainer.validate()?;
    let stop_reason = if reached && reason != "target reached" {
        "target reached".to_string()
    } else {
        reason
    };
    trainer.log_row()?;
    trainer.save(FINAL_CHECKPOINT, &trainer.params.clone())?;
    let (best_valid, best_step, best_params) = trainer.best.clone().expect("validated at least once");
    let test_metric = evaluate_split(cfg, data, &best_params, Split::Test)?;
    let summary = RunSummary {
        task: cfg.task,
        model: cfg.model,
        field: cfg.field(),
        hidden: cfg.hidden,
        metric: cfg.task.metric(),
        updates: trainer.step,
        epochs: trainer.epoch,
        best_valid_metric: best_valid,
        best_step,
        final_valid_metric: trainer.history.last().map(|r| r.valid_metric).unwrap_or(f64::NAN),
        test_metric,
        parameters: trainer.params.counts(),
        config_hash: hash,
        stop_reason,
        wallclock_s: trainer.elapsed(),
    };
    artifacts::write_json_atomic(&out_dir.join(SUMMARY_FILE), &summary)?;
    artifacts::write_atomic(&out_dir.join(CURVE_FILE), curve_csv(&trainer.curve).as_bytes())?;
    Ok(RunResult {
        summary,
        final_params: trainer.params,
        best_params,
        curve: trainer.curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub metric: MetricKind,
    pub step: u64,
    pub valid_metric: f64,
    pub test_metric: f64,
}

/// Loads a checkpoint and evaluates it on the task described by `cfg`.
pub fn evaluate_checkpoint(path: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let ckpt = artifacts::load_checkpoint(path)?;
    if ckpt.manifest.config_hash != cfg.hash() {
        return Err(config_err(format!(
            "checkpoint {} was written for config {}, not {}",
            path.display(),
            ckpt.manifest.config_hash,
            cfg.hash()
        )));
    }
    let data = load_task_data(cfg)?;
    let (input, output) = data.dims(cfg.task);
    if cfg.cell_spec(input, output)? != ckpt.manifest.cell {
        return Err(config_err("checkpoint model does not match the config"));
    }
    Ok(EvalReport {
        task: cfg.task,
        metric: cfg.task.metric(),
        step: ckpt.manifest.step,
        valid_metric: evaluate_split(cfg, &data, &ckpt.params, Split::Valid)?,
        test_metric: evaluate_split(cfg, &data, &ckpt.params, Split::Test)?,
    })
}

/// Total unitarity residual and largest spectral norm over the recurrent
/// matrices of a model.
pub fn recurrent_spectrum(params: &CellParameters) -> Result<(f64, f64)> {
    let mut residual = 0.0;
    let mut norm: f64 = 0.0;
    for w in params.recurrent_ops() {
        residual += diagnostics::unitarity_residual(w)?;
        let est = match diagnostics::spectral_norm(w, diagnostics::POWER_ITERS, diagnostics::POWER_TOL) {
            Ok(p) => p.estimate,
            Err(DiagError::NotConverged { estimate, .. }) => estimate,
            Err(e) => return Err(e.into()),
        };
        norm = norm.max(match w {
            crate::cells::Recurrent::Kron(k) => est.max(diagnostics::kron_spectral_norm(k)),
            _ => est,
        });
    }
    Ok((residual, norm))
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// One training run per amplitude, sharing the template's seed. Failed runs
/// are recorded with NaN metrics and the sweep continues.
pub fn amplitude_sweep(template: &RunConfig, lambdas: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    let data = load_task_data(template)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = template.clone();
        cfg.schedule.unitary_amplitude = lambda;
        let dir = out_dir.join(format!("lambda_{lambda:e}"));
        let row = run_training_with_data(&cfg, &data, &dir).and_then(|r| {
            let (residual, spectral_norm) = recurrent_spectrum(&r.final_params)?;
            Ok(SweepRow {
                lambda,
                residual,
                spectral_norm,
                valid_metric: r.summary.final_valid_metric,
                error: None,
            })
        });
        rows.push(row.unwrap_or_else(|e| {
            log::warn!("sweep run λ={lambda} failed: {e}");
            SweepRow {
                lambda,
                residual: f64::NAN,
                spectral_norm: f64::NAN,
                valid_metric: f64::NAN,
                error: Some(e.to_string()),
            }
        }));
        artifacts::write_atomic(&out_dir.join(SWEEP_FILE), diagnostics::sweep_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: &str, model: &str) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{"task": "{task}", "model": "{model}", "hidden": 8, "seq_len": 5,
                "schedule": {{"updates": 20, "eval_every": 10, "log_every": 5, "batch_size": 4}},
                "data": {{"eval_sequences": 8, "eval_batch": 4}}, "seed": 3}}"#
        ))
        .unwrap()
    }

    #[test]
    fn defaults_follow_documented_values() {
        let cfg = tiny("copy", "kru");
        assert_eq!(cfg.optimizer.learning_rate, 1e-3);
        assert_eq!(cfg.optimizer.decay, 0.9);
        assert_eq!(cfg.schedule.lr_decay, 0.3);
        assert_eq!(RunConfig::from_json(r#"{"task":"copy","model":"kru","hidden":8}"#).unwrap().schedule.batch_size, 20);
        assert_eq!(cfg.field(), Field::Complex);
        assert_eq!(tiny("copy", "lstm").field(), Field::Real);
    }

    #[test]
    fn schema_violations_are_rejected() {
        for bad in [
            r#"{"task":"copy","model":"kru","hidden":8,"bogus":1}"#,
            r#"{"task":"copy","model":"kru","hidden":12}"#,
            r#"{"task":"copy","model":"kru","hidden":8,"factor_shapes":[[2,2],[2,2]]}"#,
            r#"{"task":"copy","model":"lstm","hidden":8,"field":"complex"}"#,
            r#"{"task":"copy","model":"rnn","hidden":8,"frozen_recurrent":true}"#,
            r#"{"task":"mnist","model":"rnn","hidden":8}"#,
            r#"{"task":"copy","model":"rnn","hidden":8,"optimizer":{"learning_rate":-1}}"#,
            r#"{"task":"copy","model":"rnn","hidden":8,"schedule":{"batch_size":0}}"#,
            r#"{"task":"sorting","model":"rnn","hidden":8}"#,
            r#"not json"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(ExperimentError::Config(_))), "{bad}");
        }
        let ok = RunConfig::from_json(r#"{"task":"copy","model":"kru","hidden":12,"factor_shapes":[[3,3],[4,4]]}"#).unwrap();
        assert_eq!(ok.factor_shapes().unwrap().unwrap().len(), 2);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = tiny("copy", "kru");
        let mut b = a.clone();
        b.out_dir = Some("/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.hidden = 16;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn training_is_deterministic_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("adding", "kru");
        let a = run_training(&cfg, &dir.path().join("a")).unwrap();
        let b = run_training(&cfg, &dir.path().join("b")).unwrap();
        assert_eq!(a.final_params, b.final_params);
        let losses = |r: &RunResult| r.curve.iter().map(|c| c.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.curve.len(), 4);
        let csv = std::fs::read_to_string(dir.path().join("a").join(CURVE_FILE)).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CURVE_HEADER);
        assert_eq!(csv.lines().count(), 5);
        for f in [SUMMARY_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT] {
            assert!(dir.path().join("a").join(f).exists(), "{f}");
        }
        // Evaluating the saved model reproduces the closing validation.
        let report = evaluate_checkpoint(&dir.path().join("a").join(FINAL_CHECKPOINT), &cfg).unwrap();
        assert_eq!(report.valid_metric, a.summary.final_valid_metric);
        assert_eq!(report.step, 20);
    }

    #[test]
    fn frozen_copy_model_reports_no_trainable_recurrent_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("copy", "kru");
        cfg.frozen_recurrent = true;
        let r = run_training(&cfg, dir.path()).unwrap();
        assert_eq!(r.summary.parameters.recurrent_trainable, 0);
        assert_eq!(r.summary.parameters.recurrent, 3 * 8);
    }

    #[test]
    fn eval_rejects_other_configs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("adding", "rnn");
        run_training(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.hidden = 16;
        assert!(matches!(
            evaluate_checkpoint(&dir.path().join(FINAL_CHECKPOINT), &other),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let mut full = tiny("adding", "kru");
        full.schedule.eval_every = 1000;
        let straight = run_training(&full, &dir.path().join("full")).unwrap();
        let mut first = full.clone();
        first.schedule.updates = 10;
        // The budget is part of the hash, so resume under the full config.
        let half = run_training(&first, &dir.path().join("half")).unwrap();
        let mut resumed = full.clone();
        let ckpt = dir.path().join("half").join(FINAL_CHECKPOINT);
        let mut m = artifacts::load_checkpoint(&ckpt).unwrap();
        m.manifest.config_hash = full.hash();
        artifacts::save_checkpoint(&ckpt, m.manifest, &m.params, m.optimizer.as_ref()).unwrap();
        resumed.resume_from = Some(ckpt);
        let cont = run_training(&resumed, &dir.path().join("cont")).unwrap();
        assert_eq!(half.summary.updates, 10);
        assert_eq!(cont.final_params, straight.final_params);
    }

    #[test]
    fn divergence_writes_a_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("adding", "rnn");
        cfg.optimizer.learning_rate = 1e300;
        cfg.schedule.unitary_amplitude = 1e300;
        match run_training(&cfg, dir.path()) {
            Err(ExperimentError::Diverged { dump, .. }) => assert!(dump.exists()),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.summary)),
        }
    }

    #[test]
    fn sweep_emits_one_row_per_amplitude() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("adding", "kru");
        cfg.schedule.updates = 5;
        let rows = amplitude_sweep(&cfg, &[0.0, 1e-3, 1e-1], dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(rows.iter().all(|r| r.error.is_none() && r.residual.is_finite()));
    }
}
