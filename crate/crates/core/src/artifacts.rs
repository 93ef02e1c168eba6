//! Atomic artifact writes and the binary checkpoint format.
//!
//! A checkpoint file is the 8-byte magic `KRUCKPT1`, a little-endian `u64`
//! manifest length, the JSON manifest, then the parameter payload: every
//! tensor in declaration order, row-major, one little-endian `f64` per real
//! entry and two (re, im) per complex entry. Optimizer buffers, when saved,
//! follow in the same layout (first moments, then second moments).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{CellParameters, CellSpec};
use crate::linalg::{Field, C64};
use crate::rng::rng_from_seed;
use crate::training::{OptimizerConfig, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KRUCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ArtifactError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes to a sibling temp file and renames it over `path`, so readers
/// never observe a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub field: Field,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub valid_metric: f64,
}

/// Position of the data stream so a resumed run draws the same batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_batch: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: OptimizerConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config_hash: String,
    pub step: u64,
    pub learning_rate: f64,
    pub best_valid_metric: Option<f64>,
    pub metric_history: Vec<MetricRecord>,
    pub rng: RngState,
    pub cell: CellSpec,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn entry_width(field: Field) -> usize {
    match field {
        Field::Real => 8,
        Field::Complex => 16,
    }
}

fn push_values(out: &mut Vec<u8>, values: &[C64], field: Field) {
    for z in values {
        out.extend_from_slice(&z.re.to_le_bytes());
        if field == Field::Complex {
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
}

fn read_values(bytes: &[u8], count: usize, field: Field) -> Vec<C64> {
    let f = |i: usize| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    (0..count)
        .map(|k| match field {
            Field::Real => C64::new(f(k), 0.0),
            Field::Complex => C64::new(f(2 * k), f(2 * k + 1)),
        })
        .collect()
}

/// The parameter payload alone.
pub fn parameter_payload(params: &CellParameters) -> Vec<u8> {
    let mut out = Vec::new();
    for t in params.tensors() {
        push_values(&mut out, t.matrix.data(), t.matrix.field());
    }
    out
}

pub fn tensor_entries(params: &CellParameters) -> Vec<TensorEntry> {
    params
        .tensors()
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            rows: t.matrix.rows(),
            cols: t.matrix.cols(),
            field: t.matrix.field(),
            trainable: t.trainable,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: CellParameters,
    pub optimizer: Option<OptimizerState>,
}

/// Serializes a checkpoint. `manifest.tensors`, `payload_len` and
/// `optimizer` are filled in from the arguments.
pub fn encode_checkpoint(
    mut manifest: CheckpointManifest,
    params: &CellParameters,
    optimizer: Option<&OptimizerState>,
) -> Result<Vec<u8>> {
    let payload = parameter_payload(params);
    manifest.tensors = tensor_entries(params);
    manifest.payload_len = payload.len();
    manifest.optimizer = optimizer.map(|o| OptimizerSnapshot {
        config: o.config,
        step: o.step,
    });
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    if let Some(o) = optimizer {
        let (first, second) = o.accumulators();
        for bufs in [first, second] {
            for (b, t) in bufs.iter().zip(&manifest.tensors) {
                push_values(&mut out, b, t.field);
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    manifest: CheckpointManifest,
    params: &CellParameters,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(manifest, params, optimizer)?)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |reason: String| ArtifactError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file".into()));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json_end = 16usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("manifest length exceeds file size".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..json_end])?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {}", manifest.version)));
    }
    manifest.cell.validate().map_err(|e| corrupt(e.to_string()))?;
    // Structure comes from the cell spec; values come from the payload.
    let mut params = CellParameters::init(&manifest.cell, &mut rng_from_seed(0)).map_err(|e| corrupt(e.to_string()))?;
    if tensor_entries(&params) != manifest.tensors {
        return Err(corrupt("tensor table does not match the cell description".into()));
    }
    let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * entry_width(t.field)).sum();
    if manifest.payload_len != expected {
        return Err(corrupt(format!("payload length {} but tensors need {expected}", manifest.payload_len)));
    }
    let opt_len = if manifest.optimizer.is_some() { 2 * expected } else { 0 };
    if bytes.len() != json_end + expected + opt_len {
        return Err(corrupt(format!(
            "file holds {} payload bytes, expected {}",
            bytes.len() - json_end,
            expected + opt_len
        )));
    }
    let mut offset = json_end;
    let mut take = |entry: &TensorEntry| {
        let n = entry.rows * entry.cols;
        let w = n * entry_width(entry.field);
        let v = read_values(&bytes[offset..offset + w], n, entry.field);
        offset += w;
        v
    };
    for (view, entry) in params.tensors_mut().into_iter().zip(&manifest.tensors) {
        let values = take(entry);
        view.matrix.data_mut().copy_from_slice(&values);
    }
    let optimizer = match &manifest.optimizer {
        Some(snap) => {
            let first: Vec<Vec<C64>> = manifest.tensors.iter().map(&mut take).collect();
            let second: Vec<Vec<C64>> = manifest.tensors.iter().map(&mut take).collect();
            Some(OptimizerState::from_parts(snap.config, snap.step, first, second, &params).map_err(|e| corrupt(e.to_string()))?)
        }
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(path, &bytes)
}
