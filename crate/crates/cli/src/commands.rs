use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use kru_core::artifacts::{self, ArtifactError, CHECKPOINT_MAGIC};
use kru_core::cells::CellParameters;
use kru_core::diagnostics::{self, GradientFlowTrace, SpectralReport, SweepRow};
use kru_core::experiment::{self, EvalReport, ExperimentError, RunConfig, RunSummary, TaskData};
use kru_core::rng::{derive_seed, stream_rng, streams};
use kru_core::tasks::{self, CharWindows};

use crate::bench::{self, BenchConfig, BenchRow};

pub const OUT_DIR_ENV: &str = "KRU_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        let msg = e.to_string();
        match e {
            ExperimentError::Config(_) => CliError::Config(msg),
            ExperimentError::Data(_) => CliError::Data(msg),
            ExperimentError::Diverged { .. } => CliError::Diverged(msg),
            ExperimentError::Artifact(ArtifactError::Corrupt { .. }) => CliError::Data(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Corrupt { .. } => CliError::Data(e.to_string()),
            ArtifactError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<diagnostics::DiagError> for CliError {
    fn from(e: diagnostics::DiagError) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    /// Explicit output directory (flag or environment).
    pub out_dir: Option<PathBuf>,
}

pub fn load_config(path: &Path, globals: &Globals) -> Result<RunConfig> {
    if !path.exists() {
        return Err(CliError::Config(format!("config {} not found", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = globals.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Flag or environment first, then the config, then a name under `runs/`.
pub fn output_dir(cfg: Option<&RunConfig>, globals: &Globals, fallback: &str) -> PathBuf {
    if let Some(d) = &globals.out_dir {
        return d.clone();
    }
    if let Some(d) = cfg.and_then(|c| c.out_dir.clone()) {
        return d;
    }
    match cfg {
        Some(c) => PathBuf::from("runs").join(format!(
            "{}-{}-s{}",
            serde_plain(&c.task),
            c.model.name(),
            c.seed
        )),
        None => PathBuf::from("runs").join(fallback),
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn cmd_train(config: &Path, globals: &Globals) -> Result<RunSummary> {
    let cfg = load_config(config, globals)?;
    let out = output_dir(Some(&cfg), globals, "train");
    log::info!("training into {}", out.display());
    Ok(experiment::run_training(&cfg, &out)?.summary)
}

pub fn cmd_eval(checkpoint: &Path, config: &Path, globals: &Globals) -> Result<EvalReport> {
    let cfg = load_config(config, globals)?;
    if !checkpoint.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", checkpoint.display())));
    }
    let report = experiment::evaluate_checkpoint(checkpoint, &cfg)?;
    if let Some(dir) = &globals.out_dir {
        artifacts::write_json_atomic(&dir.join("eval.json"), &report)?;
    }
    Ok(report)
}

pub fn cmd_bench(cfg: &BenchConfig, globals: &Globals) -> Result<Vec<BenchRow>> {
    let rows = bench::run_bench(cfg).map_err(CliError::Config)?;
    let out = output_dir(None, globals, "bench");
    artifacts::write_atomic(&out.join("bench.csv"), bench::bench_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct DiagOutput {
    pub source: String,
    pub reports: Vec<SpectralReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient_trace: Option<GradientFlowTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
}

fn is_checkpoint(path: &Path) -> bool {
    fs::read(path).map(|b| b.starts_with(CHECKPOINT_MAGIC)).unwrap_or(false)
}

/// A fresh model for `cfg` and the task data it needs.
fn model_from_config(cfg: &RunConfig) -> Result<(CellParameters, TaskData)> {
    let data = experiment::load_task_data(cfg)?;
    let (input, output) = data.dims(cfg.task);
    let spec = cfg.cell_spec(input, output)?;
    let params = CellParameters::init(&spec, &mut stream_rng(cfg.seed, streams::INIT)).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((params, data))
}

/// One training batch of the configured task, for the gradient trace.
fn probe_batch(cfg: &RunConfig, data: &TaskData) -> Result<tasks::TaskBatch> {
    let b = cfg.schedule.batch_size;
    let seed = derive_seed(cfg.seed, streams::TRAIN_DATA, 0);
    Ok(match data {
        TaskData::Synthetic { .. } if cfg.task == experiment::TaskKind::Copy => {
            tasks::gen_copy_batch(cfg.seq_len(), b, seed).map_err(|e| CliError::Data(e.to_string()))?
        }
        TaskData::Synthetic { .. } => tasks::gen_adding_batch(cfg.seq_len(), b, seed).map_err(|e| CliError::Data(e.to_string()))?,
        TaskData::Mnist { train, .. } => tasks::mnist_batch(train, &(0..b.min(train.len())).collect::<Vec<_>>()),
        TaskData::Char { corpus } => CharWindows::new(&corpus.train, corpus.vocab.size(), b, cfg.schedule.bptt_window.unwrap_or(100))
            .map_err(|e| CliError::Data(e.to_string()))?
            .next()
            .ok_or_else(|| CliError::Data("training corpus too short".into()))?,
    })
}

pub fn cmd_diag(target: &Path, sweep: Option<&[f64]>, trace: bool, globals: &Globals) -> Result<DiagOutput> {
    if !target.exists() {
        return Err(CliError::Data(format!("{} not found", target.display())));
    }
    let mut output = DiagOutput {
        source: target.display().to_string(),
        reports: vec![],
        gradient_trace: None,
        sweep: None,
    };
    let out_dir;
    if is_checkpoint(target) {
        if sweep.is_some() || trace {
            return Err(CliError::Config("--sweep and --trace need a config, not a checkpoint".into()));
        }
        let ckpt = artifacts::load_checkpoint(target)?;
        output.reports = diagnostics::model_reports(&ckpt.params)?;
        out_dir = output_dir(None, globals, "diag");
    } else {
        let cfg = load_config(target, globals)?;
        let (params, data) = model_from_config(&cfg)?;
        output.reports = diagnostics::model_reports(&params)?;
        out_dir = output_dir(Some(&cfg), globals, "diag");
        if trace {
            let batch = probe_batch(&cfg, &data)?;
            let t = diagnostics::gradient_flow_trace(&params, &batch, &cfg.loss_options())?;
            artifacts::write_json_atomic(&out_dir.join("gradient_trace.json"), &t)?;
            output.gradient_trace = Some(t);
        }
        if let Some(lambdas) = sweep {
            output.sweep = Some(experiment::amplitude_sweep(&cfg, lambdas, &out_dir)?);
        }
    }
    artifacts::write_json_atomic(&out_dir.join("diag.json"), &output)?;
    Ok(output)
}
