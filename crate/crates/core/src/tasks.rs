//! Benchmark tasks: copy memory, adding problem, pixel-by-pixel MNIST and a
//! byte-level character corpus.
//!
//! Batches are stored time-major: `inputs[t]` is a real `B x D` matrix.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Field, Matrix, C64};
use crate::rng::{rng_from_seed, stream_rng, streams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("images are {rows}x{cols}, expected 28x28")]
    ImageShape { rows: usize, cols: usize },
    #[error("label {0} is outside 0..=9")]
    BadLabel(u8),
    #[error("corpus split '{0}' is empty")]
    EmptyCorpus(&'static str),
    #[error("invalid task parameters: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Targets {
    /// Class labels indexed `[t][b]`.
    Classes { labels: Vec<Vec<u32>>, num_classes: usize },
    /// One real target per sequence, scored at every unmasked step.
    Regression { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    /// `seq_len` matrices of shape `batch x input_dim`.
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
    /// `[t][b]`: whether step `t` of sequence `b` contributes to the loss.
    pub loss_mask: Vec<Vec<bool>>,
}

impl TaskBatch {
    pub fn seq_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::cols)
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Steps with at least one unmasked sequence.
    pub fn active_steps(&self) -> Vec<usize> {
        (0..self.seq_len()).filter(|&t| self.loss_mask[t].iter().any(|&m| m)).collect()
    }

    /// Sub-batch of steps `start..end` (used for truncated BPTT).
    pub fn window(&self, start: usize, end: usize) -> TaskBatch {
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: labels[start..end].to_vec(),
                num_classes: *num_classes,
            },
            Targets::Regression { values } => Targets::Regression { values: values.clone() },
        };
        TaskBatch {
            inputs: self.inputs[start..end].to_vec(),
            targets,
            loss_mask: self.loss_mask[start..end].to_vec(),
        }
    }

    pub fn snapshot(&self) -> BatchSnapshot {
        let (b, d) = (self.batch_size(), self.input_dim());
        let inputs = (0..b)
            .map(|i| {
                self.inputs
                    .iter()
                    .map(|m| (0..d).map(|j| m.get(i, j).re).collect())
                    .collect()
            })
            .collect();
        BatchSnapshot {
            seq_len: self.seq_len(),
            batch: b,
            input_dim: d,
            inputs,
            targets: self.targets.clone(),
            loss_mask: self.loss_mask.clone(),
        }
    }
}

/// JSON-friendly dump of a batch; `inputs` is indexed `[b][t][d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSnapshot {
    pub seq_len: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub inputs: Vec<Vec<Vec<f64>>>,
    pub targets: Targets,
    pub loss_mask: Vec<Vec<bool>>,
}

fn one_hot_step(classes: &[u32], width: usize) -> Matrix {
    let mut m = Matrix::zeros(classes.len(), width, Field::Real);
    for (b, &c) in classes.iter().enumerate() {
        m.set(b, c as usize, C64::new(1.0, 0.0));
    }
    m
}

pub const COPY_CLASSES: usize = 10;
pub const COPY_SYMBOLS: usize = 10;
pub const COPY_BLANK: u32 = 0;
pub const COPY_DELIMITER: u32 = 9;

/// Cross-entropy (nats) of the best input-independent copy-task predictor.
pub fn copy_memoryless_baseline(t: usize) -> f64 {
    COPY_SYMBOLS as f64 * 8f64.ln() / (t + 20) as f64
}

/// Copy-memory batch: 10 symbols from `1..=8`, `T-1` blanks, the delimiter,
/// then 10 blanks. Targets are `T+10` blanks followed by the 10 symbols.
/// Every step is scored.
pub fn gen_copy_batch(t: usize, batch: usize, seed: u64) -> Result<TaskBatch> {
    if t == 0 {
        return Err(DataError::Invalid("copy task needs T >= 1".into()));
    }
    let len = t + 20;
    let mut rng = rng_from_seed(seed);
    let mut input_classes = vec![vec![COPY_BLANK; batch]; len];
    let mut labels = vec![vec![COPY_BLANK; batch]; len];
    for b in 0..batch {
        for k in 0..COPY_SYMBOLS {
            let sym: u32 = rng.random_range(1..=8);
            input_classes[k][b] = sym;
            labels[t + 10 + k][b] = sym;
        }
        input_classes[t + 9][b] = COPY_DELIMITER;
    }
    Ok(TaskBatch {
        inputs: input_classes.iter().map(|c| one_hot_step(c, COPY_CLASSES)).collect(),
        targets: Targets::Classes {
            labels,
            num_classes: COPY_CLASSES,
        },
        loss_mask: vec![vec![true; batch]; len],
    })
}

/// Adding-problem batch: channel 0 holds `U[0,1]` values, channel 1 marks one
/// position in each half. The target is the sum of the two marked values,
/// scored at the last step only.
pub fn gen_adding_batch(t: usize, batch: usize, seed: u64) -> Result<TaskBatch> {
    if t < 2 {
        return Err(DataError::Invalid("adding task needs T >= 2".into()));
    }
    let mut rng = rng_from_seed(seed);
    let half = t / 2;
    let mut inputs: Vec<Matrix> = (0..t).map(|_| Matrix::zeros(batch, 2, Field::Real)).collect();
    let mut values = Vec::with_capacity(batch);
    for b in 0..batch {
        for step in inputs.iter_mut() {
            step.set(b, 0, C64::new(rng.random::<f64>(), 0.0));
        }
        let first = rng.random_range(0..half);
        let second = rng.random_range(half..t);
        inputs[first].set(b, 1, C64::new(1.0, 0.0));
        inputs[second].set(b, 1, C64::new(1.0, 0.0));
        values.push(inputs[first].get(b, 0).re + inputs[second].get(b, 0).re);
    }
    let mut loss_mask = vec![vec![false; batch]; t];
    loss_mask[t - 1] = vec![true; batch];
    Ok(TaskBatch {
        inputs,
        targets: Targets::Regression { values },
        loss_mask,
    })
}

pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct MnistDataset {
    /// Row-major pixel intensities in `[0, 1]`, `MNIST_PIXELS` per image.
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
}

impl MnistDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples, for desk-scale runs.
    pub fn truncate(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }

    /// Seeded reordering of the samples, used before splitting sorted files.
    pub fn shuffled(mut self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, streams::SHUFFLE));
        self.images = order.iter().map(|&i| std::mem::take(&mut self.images[i])).collect();
        self.labels = order.iter().map(|&i| self.labels[i]).collect();
        self
    }

    /// Splits off the last `valid` samples as a validation set.
    pub fn split_validation(mut self, valid: usize) -> Result<(MnistDataset, MnistDataset)> {
        if valid >= self.len() {
            return Err(DataError::Invalid(format!(
                "validation size {valid} leaves no training data out of {}",
                self.len()
            )));
        }
        let cut = self.len() - valid;
        let images = self.images.split_off(cut);
        let labels = self.labels.split_off(cut);
        Ok((self, MnistDataset { images, labels }))
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated {
            needed: offset + 4,
            have: bytes.len(),
        })
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok((count, rows, cols, &bytes[16..needed]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(&bytes[8..needed])
}

pub fn mnist_from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<MnistDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(DataError::ImageShape { rows, cols });
    }
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::BadLabel(bad));
    }
    Ok(MnistDataset {
        images: pixels
            .chunks_exact(MNIST_PIXELS)
            .map(|img| img.iter().map(|&p| p as f32 / 255.0).collect())
            .collect(),
        labels: labels.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistDataset> {
    mnist_from_idx_bytes(&read_file(images_path)?, &read_file(labels_path)?)
}

/// A fixed reordering of the 784 pixel positions, shared by every split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPermutation {
    pub order: Vec<usize>,
}

impl PixelPermutation {
    pub fn identity() -> Self {
        Self {
            order: (0..MNIST_PIXELS).collect(),
        }
    }

    /// `None` gives the identity (unpermuted task).
    pub fn from_seed(seed: Option<u64>) -> Self {
        let mut order: Vec<usize> = (0..MNIST_PIXELS).collect();
        if let Some(seed) = seed {
            order.shuffle(&mut stream_rng(seed, streams::PERMUTATION));
        }
        Self { order }
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Reorders every image so that step `t` shows pixel `order[t]`.
pub fn permute_pixels(dataset: &MnistDataset, permutation: &PixelPermutation) -> MnistDataset {
    MnistDataset {
        images: dataset
            .images
            .iter()
            .map(|img| permutation.order.iter().map(|&p| img[p]).collect())
            .collect(),
        labels: dataset.labels.clone(),
    }
}

/// 784-step batch of one pixel per step; the label is scored at the last step.
pub fn mnist_batch(dataset: &MnistDataset, indices: &[usize]) -> TaskBatch {
    let b = indices.len();
    let inputs = (0..MNIST_PIXELS)
        .map(|t| {
            Matrix::from_fn(b, 1, Field::Real, |r, _| {
                C64::new(dataset.images[indices[r]][t] as f64, 0.0)
            })
        })
        .collect();
    let label_row: Vec<u32> = indices.iter().map(|&i| dataset.labels[i] as u32).collect();
    let mut loss_mask = vec![vec![false; b]; MNIST_PIXELS];
    loss_mask[MNIST_PIXELS - 1] = vec![true; b];
    TaskBatch {
        inputs,
        targets: Targets::Classes {
            labels: vec![label_row; MNIST_PIXELS],
            num_classes: 10,
        },
        loss_mask,
    }
}

/// Byte-level vocabulary built from the training split. Index 0 is the
/// bucket for bytes never seen in training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    /// Known bytes in ascending order; byte `bytes[i]` maps to index `i + 1`.
    pub bytes: Vec<u8>,
}

impl CharVocab {
    pub const UNK: u32 = 0;

    pub fn from_text(text: &[u8]) -> Self {
        let mut seen = [false; 256];
        text.iter().for_each(|&b| seen[b as usize] = true);
        Self {
            bytes: (0..=255u8).filter(|&b| seen[b as usize]).collect(),
        }
    }

    /// Vocabulary size including the unknown bucket.
    pub fn size(&self) -> usize {
        self.bytes.len() + 1
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut table = [Self::UNK; 256];
        for (i, &b) in self.bytes.iter().enumerate() {
            table[b as usize] = i as u32 + 1;
        }
        text.iter().map(|&b| table[b as usize]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub vocab: CharVocab,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

pub fn char_corpus_from_texts(train: &[u8], valid: &[u8], test: &[u8]) -> Result<CorpusSplit> {
    for (name, split) in [("train", train), ("valid", valid), ("test", test)] {
        if split.is_empty() {
            return Err(DataError::EmptyCorpus(name));
        }
    }
    let vocab = CharVocab::from_text(train);
    Ok(CorpusSplit {
        train: vocab.encode(train),
        valid: vocab.encode(valid),
        test: vocab.encode(test),
        vocab,
    })
}

pub fn load_char_corpus(train: &Path, valid: &Path, test: &Path) -> Result<CorpusSplit> {
    char_corpus_from_texts(&read_file(train)?, &read_file(valid)?, &read_file(test)?)
}

/// Bits per character from a mean cross-entropy in nats.
pub fn bits_per_char(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Contiguous next-character windows. The stream is cut into `batch`
/// parallel lanes (lane `b` is row `b` of every window) so hidden state can
/// be carried from one window to the next.
#[derive(Clone, Debug)]
pub struct CharWindows<'a> {
    data: &'a [u32],
    vocab_size: usize,
    batch: usize,
    lane_len: usize,
    window: usize,
    pos: usize,
}

impl<'a> CharWindows<'a> {
    pub fn new(data: &'a [u32], vocab_size: usize, batch: usize, window: usize) -> Result<Self> {
        if batch == 0 || window == 0 {
            return Err(DataError::Invalid("batch and window must be positive".into()));
        }
        let lane_len = data.len().saturating_sub(1) / batch;
        if lane_len == 0 {
            return Err(DataError::Invalid(format!(
                "stream of {} characters is too short for {batch} lanes",
                data.len()
            )));
        }
        Ok(Self {
            data,
            vocab_size,
            batch,
            lane_len,
            window,
            pos: 0,
        })
    }

    /// Predictions per lane per epoch.
    pub fn lane_len(&self) -> usize {
        self.lane_len
    }

    pub fn num_windows(&self) -> usize {
        self.lane_len.div_ceil(self.window)
    }

    /// Position in `data` of the target at lane `b`, step `t` of the window
    /// starting at lane offset `start`.
    pub fn target_index(&self, b: usize, start: usize, t: usize) -> usize {
        b * self.lane_len + start + t + 1
    }
}

impl Iterator for CharWindows<'_> {
    type Item = TaskBatch;

    fn next(&mut self) -> Option<TaskBatch> {
        if self.pos >= self.lane_len {
            return None;
        }
        let start = self.pos;
        let steps = self.window.min(self.lane_len - start);
        self.pos += steps;
        let mut inputs = Vec::with_capacity(steps);
        let mut labels = Vec::with_capacity(steps);
        for t in 0..steps {
            let cur: Vec<u32> = (0..self.batch)
                .map(|b| self.data[b * self.lane_len + start + t])
                .collect();
            inputs.push(one_hot_step(&cur, self.vocab_size));
            labels.push((0..self.batch).map(|b| self.data[self.target_index(b, start, t)]).collect());
        }
        Some(TaskBatch {
            inputs,
            targets: Targets::Classes {
                labels,
                num_classes: self.vocab_size,
            },
            loss_mask: vec![vec![true; self.batch]; steps],
        })
    }
}
