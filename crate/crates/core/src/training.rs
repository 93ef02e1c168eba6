//! Losses, backpropagation through time, optimizers and schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{self, CellError, CellParameters, CellState, StepCache};
use crate::linalg::{Field, Matrix, C64};
use crate::tasks::{TaskBatch, Targets};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("batch does not fit the model: {0}")]
    Shape(String),
    #[error("loss became non-finite ({0})")]
    Diverged(f64),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Softmax cross-entropy (natural log) of one logit row; returns the loss
/// and `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - log_z).exp()).collect();
    grad[target] -= 1.0;
    (log_z - logits[target], grad)
}

/// Mean squared error and its gradient.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::Shape(format!(
            "mse over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Soft unitary penalty amplitude λ.
    pub penalty_amplitude: f64,
    /// Apply the penalty to LSTM variants as well.
    pub penalize_gated: bool,
    /// Truncated BPTT window; `None` backpropagates through the whole batch.
    pub bptt_window: Option<usize>,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            penalty_amplitude: 0.0,
            penalize_gated: false,
            bptt_window: None,
        }
    }
}

impl LossOptions {
    pub fn effective_amplitude(&self, params: &CellParameters) -> f64 {
        if params.kind.is_gated() && !self.penalize_gated {
            0.0
        } else {
            self.penalty_amplitude
        }
    }
}

#[derive(Clone, Debug)]
pub struct BpttOutput {
    /// Task loss plus penalty.
    pub loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
    pub grads: CellParameters,
    pub final_state: CellState,
    /// `||∂L/∂h_t||` (Frobenius over the batch) for every step.
    pub hidden_grad_norms: Vec<f64>,
    /// Correct argmax predictions among scored steps (classification only).
    pub correct: usize,
    pub scored: usize,
}

fn check_batch(params: &CellParameters, batch: &TaskBatch) -> Result<()> {
    if batch.seq_len() == 0 {
        return Err(TrainError::Shape("empty batch".into()));
    }
    if batch.input_dim() != params.dims.input {
        return Err(TrainError::Shape(format!(
            "inputs have {} features, model expects {}",
            batch.input_dim(),
            params.dims.input
        )));
    }
    match &batch.targets {
        Targets::Classes { num_classes, labels } => {
            if *num_classes != params.dims.output {
                return Err(TrainError::Shape(format!(
                    "{num_classes} classes but {} outputs",
                    params.dims.output
                )));
            }
            if labels.len() != batch.seq_len() {
                return Err(TrainError::Shape("label rows do not match sequence length".into()));
            }
        }
        Targets::Regression { values } => {
            if params.dims.output != 1 {
                return Err(TrainError::Shape("regression needs a single output".into()));
            }
            if values.len() != batch.batch_size() {
                return Err(TrainError::Shape("one regression target per sequence required".into()));
            }
        }
    }
    Ok(())
}

/// Loss contributions and output gradients at step `t` (scaled by `1/denom`).
fn score_step(batch: &TaskBatch, t: usize, y: &Matrix, denom: f64) -> (f64, Matrix, usize, usize) {
    let rows = y.rows();
    let mut g = Matrix::zeros(rows, y.cols(), Field::Real);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut scored = 0;
    for b in 0..rows {
        if !batch.loss_mask[t][b] {
            continue;
        }
        scored += 1;
        let logits: Vec<f64> = y.row(b).iter().map(|z| z.re).collect();
        match &batch.targets {
            Targets::Classes { labels, .. } => {
                let target = labels[t][b] as usize;
                let (l, grad) = cross_entropy(&logits, target);
                loss += l;
                let argmax = logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                if argmax == target {
                    correct += 1;
                }
                for (o, gv) in g.row_mut(b).iter_mut().zip(grad) {
                    o.re = gv / denom;
                }
            }
            Targets::Regression { values } => {
                let d = logits[0] - values[b];
                loss += d * d;
                g.row_mut(b)[0] = C64::new(2.0 * d / denom, 0.0);
            }
        }
    }
    (loss / denom, g, correct, scored)
}

/// Forward over the batch, reverse accumulation of all parameter gradients.
///
/// The task loss is averaged over every unmasked `(step, sequence)` pair.
/// With a BPTT window the sequence is processed in consecutive chunks: the
/// hidden state flows forward across chunk boundaries but gradients do not.
pub fn bptt_loss_and_grads(
    params: &CellParameters,
    batch: &TaskBatch,
    initial: Option<&CellState>,
    opts: &LossOptions,
) -> Result<BpttOutput> {
    check_batch(params, batch)?;
    let b = batch.batch_size();
    let t_len = batch.seq_len();
    let denom = batch.masked_count().max(1) as f64;
    let mut state = match initial {
        Some(s) => {
            if s.batch() != b {
                return Err(TrainError::Shape("initial state batch size differs".into()));
            }
            s.clone()
        }
        None => params.initial_state(b),
    };
    let window = opts.bptt_window.unwrap_or(t_len).max(1);
    let mut grads = params.zeros_like();
    let mut task_loss = 0.0;
    let mut correct = 0;
    let mut scored = 0;
    let mut norms = vec![0.0; t_len];
    let mut start = 0;
    while start < t_len {
        let end = (start + window).min(t_len);
        let mut caches: Vec<StepCache> = Vec::with_capacity(end - start);
        let mut hiddens: Vec<Matrix> = Vec::with_capacity(end - start);
        for t in start..end {
            let (next, cache) = cells::step_forward(params, &state, &batch.inputs[t])?;
            caches.push(cache);
            hiddens.push(next.h.clone());
            state = next;
        }
        let mut g_h_next: Option<Matrix> = None;
        let mut g_c_next: Option<Matrix> = None;
        for t in (start..end).rev() {
            let local = t - start;
            let h = &hiddens[local];
            let mut g_h = Matrix::zeros(b, params.dims.hidden, params.field);
            if batch.loss_mask[t].iter().any(|&m| m) {
                let y = cells::output_head(params, h)?;
                let (l, g_y, c, s) = score_step(batch, t, &y, denom);
                task_loss += l;
                correct += c;
                scored += s;
                g_h = cells::output_head_backward(params, h, &g_y, &mut grads)?;
            }
            if let Some(g) = &g_h_next {
                g_h.axpy_in_place(crate::linalg::ONE, g).map_err(CellError::from)?;
            }
            norms[t] = crate::linalg::frobenius_norm_sq(&g_h).sqrt();
            let (g_prev, g_c_prev) = cells::step_backward(params, &caches[local], &g_h, g_c_next.as_ref(), &mut grads)?;
            g_h_next = Some(g_prev);
            g_c_next = g_c_prev;
        }
        start = end;
    }
    let amplitude = opts.effective_amplitude(params);
    let mut penalty = 0.0;
    if amplitude > 0.0 {
        penalty = params.penalty(amplitude)?;
        params.add_penalty_grads(amplitude, &mut grads)?;
    }
    let loss = task_loss + penalty;
    if !loss.is_finite() {
        return Err(TrainError::Diverged(loss));
    }
    Ok(BpttOutput {
        loss,
        task_loss,
        penalty,
        grads,
        final_state: state,
        hidden_grad_norms: norms,
        correct,
        scored,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub loss: f64,
    pub correct: usize,
    pub scored: usize,
    pub final_state: CellState,
}

impl EvalOutput {
    pub fn accuracy(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.correct as f64 / self.scored as f64
        }
    }
}

/// Forward-only loss (no penalty) and accuracy.
pub fn evaluate(params: &CellParameters, batch: &TaskBatch, initial: Option<&CellState>) -> Result<EvalOutput> {
    check_batch(params, batch)?;
    let b = batch.batch_size();
    let denom = batch.masked_count().max(1) as f64;
    let mut state = initial.cloned().unwrap_or_else(|| params.initial_state(b));
    let mut loss = 0.0;
    let mut correct = 0;
    let mut scored = 0;
    for t in 0..batch.seq_len() {
        state = match params.kind.is_gated() {
            true => {
                let c = state.c.as_ref().expect("gated state");
                let (h, c) = cells::lstm_step(params, &state.h, c, &batch.inputs[t])?;
                CellState { h, c: Some(c) }
            }
            false => CellState {
                h: cells::rnn_step(params, &state.h, &batch.inputs[t])?,
                c: None,
            },
        };
        if batch.loss_mask[t].iter().any(|&m| m) {
            let y = cells::output_head(params, &state.h)?;
            let (l, _, c, s) = score_step(batch, t, &y, denom);
            loss += l;
            correct += c;
            scored += s;
        }
    }
    Ok(EvalOutput {
        loss,
        correct,
        scored,
        final_state: state,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// RMSprop decay ρ.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            learning_rate: 1e-3,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-component accumulators; real and imaginary parts of complex
/// parameters are tracked independently.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<C64>>,
    second: Vec<Vec<C64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &CellParameters) -> Self {
        let shape: Vec<Vec<C64>> = params
            .tensors()
            .iter()
            .map(|t| vec![C64::new(0.0, 0.0); t.matrix.len()])
            .collect();
        Self {
            config,
            step: 0,
            first: shape.clone(),
            second: shape,
        }
    }

    /// First- and second-moment buffers, one per tensor in declaration order.
    pub fn accumulators(&self) -> (&[Vec<C64>], &[Vec<C64>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds a state from saved buffers; shapes must mirror `params`.
    pub fn from_parts(
        config: OptimizerConfig,
        step: u64,
        first: Vec<Vec<C64>>,
        second: Vec<Vec<C64>>,
        params: &CellParameters,
    ) -> Result<Self> {
        let lens: Vec<usize> = params.tensors().iter().map(|t| t.matrix.len()).collect();
        let fits = |bufs: &[Vec<C64>]| bufs.len() == lens.len() && bufs.iter().zip(&lens).all(|(b, &l)| b.len() == l);
        if !fits(&first) || !fits(&second) {
            return Err(TrainError::Shape("optimizer buffers do not mirror the parameters".into()));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update to every trainable tensor.
    pub fn update(&mut self, params: &mut CellParameters, grads: &CellParameters) {
        self.step += 1;
        let cfg = self.config;
        let grad_views = grads.tensors();
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (idx, view) in params.tensors_mut().into_iter().enumerate() {
            if !view.trainable {
                continue;
            }
            let complex = view.matrix.field() == Field::Complex;
            let g = grad_views[idx].matrix.data();
            let m1 = &mut self.first[idx];
            let m2 = &mut self.second[idx];
            for (k, theta) in view.matrix.data_mut().iter_mut().enumerate() {
                let gk = g[k];
                theta.re -= component_step(cfg, bc1, bc2, gk.re, &mut m1[k].re, &mut m2[k].re);
                if complex {
                    theta.im -= component_step(cfg, bc1, bc2, gk.im, &mut m1[k].im, &mut m2[k].im);
                }
            }
        }
    }
}

#[inline]
fn component_step(cfg: OptimizerConfig, bc1: f64, bc2: f64, g: f64, m: &mut f64, v: &mut f64) -> f64 {
    match cfg.kind {
        OptimizerKind::Rmsprop => {
            *v = cfg.decay * *v + (1.0 - cfg.decay) * g * g;
            cfg.learning_rate * g / (v.sqrt() + cfg.epsilon)
        }
        OptimizerKind::Adam => {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon)
        }
    }
}

/// Global L2 norm over every trainable gradient component.
pub fn grad_norm(grads: &CellParameters) -> f64 {
    grads
        .tensors()
        .iter()
        .filter(|t| t.trainable)
        .map(|t| crate::linalg::frobenius_norm_sq(t.matrix))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients to global norm `threshold` when they exceed it.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut CellParameters, threshold: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > threshold && threshold > 0.0 {
        let s = threshold / norm;
        for t in grads.tensors_mut() {
            t.matrix.data_mut().iter_mut().for_each(|z| *z *= s);
        }
    }
    norm
}

/// Multiplies the learning rate by `gamma` whenever a validation metric
/// (lower is better) fails to improve on the best seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauDecay {
    pub gamma: f64,
    pub best: Option<f64>,
}

impl PlateauDecay {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, best: None }
    }

    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        match self.best {
            Some(best) if metric >= best => lr * self.gamma,
            _ => {
                self.best = Some(metric);
                lr
            }
        }
    }
}

/// Learning rate after replaying a whole validation history.
pub fn plateau_decay(history: &[f64], initial_lr: f64, gamma: f64) -> f64 {
    let mut rule = PlateauDecay::new(gamma);
    history.iter().fold(initial_lr, |lr, &m| rule.observe(m, lr))
}
