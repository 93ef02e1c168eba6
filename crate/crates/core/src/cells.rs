//! Recurrent cells: vanilla RNN, KRU, LSTM and KRU-LSTM.
//!
//! All cells work on batches: hidden states are `B x N` matrices with one
//! sequence per row, inputs are real `B x D` matrices. The recurrent matrix
//! acts on rows, `h_t = σ(h_{t-1} Wᵀ + x_t Uᵀ + b)`, which is the row-vector
//! form of `σ(W h_{t-1} + U x_t + b)`.
//!
//! Complex cells (RNN or KRU over ℂ) use modReLU and read out through
//! `[Re h, Im h]`. LSTM variants are real and use sigmoid gates with tanh.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kron::{self, FactorShape, KronError, KronForwardCache, KroneckerMatrix};
use crate::linalg::{self, Field, LinalgError, Matrix, Op, C64, ZERO};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CellError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kron(#[from] KronError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid cell configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CellError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    Rnn,
    Kru,
    Lstm,
    KruLstm,
}

impl CellKind {
    pub fn is_gated(self) -> bool {
        matches!(self, CellKind::Lstm | CellKind::KruLstm)
    }

    pub fn is_kronecker(self) -> bool {
        matches!(self, CellKind::Kru | CellKind::KruLstm)
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Kru => "kru",
            CellKind::Lstm => "lstm",
            CellKind::KruLstm => "kru-lstm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    ModRelu,
    /// Linear recurrence, used by the gradient-flow diagnostics.
    Identity,
}

/// Recurrent weight: dense `N x N` or Kronecker-factored.
#[derive(Clone, Debug, PartialEq)]
pub enum Recurrent {
    Dense(Matrix),
    Kron(KroneckerMatrix),
}

#[derive(Clone, Debug)]
pub enum RecurrentCache {
    Dense,
    Kron(KronForwardCache),
}

impl Recurrent {
    pub fn dim(&self) -> usize {
        match self {
            Recurrent::Dense(w) => w.rows(),
            Recurrent::Kron(k) => k.out_dim(),
        }
    }

    pub fn field(&self) -> Field {
        match self {
            Recurrent::Dense(w) => w.field(),
            Recurrent::Kron(k) => k.field(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, Recurrent::Kron(k) if k.is_frozen())
    }

    /// The matrices holding this operator's parameters (one for dense).
    pub fn factors(&self) -> &[Matrix] {
        match self {
            Recurrent::Dense(w) => std::slice::from_ref(w),
            Recurrent::Kron(k) => k.factors(),
        }
    }

    pub fn factors_mut(&mut self) -> &mut [Matrix] {
        match self {
            Recurrent::Dense(w) => std::slice::from_mut(w),
            Recurrent::Kron(k) => k.factors_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let width = self.field().scalar_width();
        self.factors().iter().map(Matrix::len).sum::<usize>() * width
    }

    pub fn zeros_like(&self) -> Recurrent {
        match self {
            Recurrent::Dense(w) => Recurrent::Dense(Matrix::zeros(w.rows(), w.cols(), w.field())),
            Recurrent::Kron(k) => {
                let zeros = k
                    .factors()
                    .iter()
                    .map(|f| Matrix::zeros(f.rows(), f.cols(), f.field()))
                    .collect();
                Recurrent::Kron(KroneckerMatrix::new(zeros).expect("same shapes as a valid operator"))
            }
        }
    }

    /// `h Wᵀ` plus whatever the backward pass needs.
    pub fn forward(&self, h: &Matrix) -> Result<(Matrix, RecurrentCache)> {
        match self {
            Recurrent::Dense(w) => Ok((linalg::matmul_op(h, Op::N, w, Op::T)?, RecurrentCache::Dense)),
            Recurrent::Kron(k) => {
                let (y, cache) = kron::kron_forward(h, k)?;
                Ok((y, RecurrentCache::Kron(cache)))
            }
        }
    }

    /// `h Wᵀ` without keeping intermediates.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        match self {
            Recurrent::Dense(w) => Ok(linalg::matmul_op(h, Op::N, w, Op::T)?),
            Recurrent::Kron(k) => Ok(kron::kron_apply(h, k)?),
        }
    }

    /// Accumulates `∂/∂W` into `grad` and returns `∂/∂h`.
    pub fn backward(&self, h: &Matrix, cache: &RecurrentCache, g: &Matrix, grad: &mut Recurrent) -> Result<Matrix> {
        match (self, cache, grad) {
            (Recurrent::Dense(w), RecurrentCache::Dense, Recurrent::Dense(gw)) => {
                gw.axpy_in_place(linalg::ONE, &linalg::matmul_op(g, Op::T, h, Op::C)?)?;
                Ok(linalg::matmul_op(g, Op::N, w, Op::C)?)
            }
            (Recurrent::Kron(k), RecurrentCache::Kron(cache), Recurrent::Kron(gk)) => {
                let grads = kron::kron_backward(h, k, cache, g)?;
                for (acc, gf) in gk.factors_mut().iter_mut().zip(&grads.factor_grads) {
                    acc.axpy_in_place(linalg::ONE, gf)?;
                }
                Ok(grads.input_grad)
            }
            _ => Err(CellError::Shape("recurrent cache or gradient does not match the operator".into())),
        }
    }

    pub fn penalty(&self, amplitude: f64) -> Result<f64> {
        Ok(kron::unitary_penalty(self.factors(), amplitude)?)
    }

    pub fn add_penalty_grad(&self, amplitude: f64, grad: &mut Recurrent) -> Result<()> {
        let pg = kron::unitary_penalty_grad(self.factors(), amplitude)?;
        for (acc, g) in grad.factors_mut().iter_mut().zip(&pg) {
            acc.axpy_in_place(linalg::ONE, g)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimpleCell {
    pub w: Recurrent,
    /// `N x D`, complex for complex cells.
    pub u: Matrix,
    /// `1 x N`.
    pub b: Matrix,
    /// `1 x N` real modReLU offsets (complex cells only).
    pub modrelu_bias: Option<Matrix>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub w: Recurrent,
    pub u: Matrix,
    pub b: Matrix,
}

pub const GATE_NAMES: [&str; 4] = ["forget", "input", "output", "candidate"];

#[derive(Clone, Debug, PartialEq)]
pub enum CellBody {
    Simple(SimpleCell),
    /// Gates in the order forget, input, output, candidate.
    Gated(Box<[Gate; 4]>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellParameters {
    pub kind: CellKind,
    pub field: Field,
    pub dims: CellDims,
    pub body: CellBody,
    /// Output map, real `M x N` (real cells) or `M x 2N` (complex cells).
    pub v: Matrix,
    /// `1 x M` real output bias.
    pub c: Matrix,
}

/// One parameter tensor as seen by optimizers and checkpoints.
pub struct ParamView<'a> {
    pub name: String,
    pub recurrent: bool,
    pub trainable: bool,
    pub matrix: &'a Matrix,
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub recurrent: bool,
    pub trainable: bool,
    pub matrix: &'a mut Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: CellKind,
    pub field: Field,
    pub dims: CellDims,
    /// Factor shapes for Kronecker cells; ignored by dense ones.
    pub factor_shapes: Option<Vec<FactorShape>>,
    #[serde(default)]
    pub frozen_recurrent: bool,
}

impl CellSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.input == 0 || d.hidden == 0 || d.output == 0 {
            return Err(CellError::Config("dimensions must be positive".into()));
        }
        if self.kind.is_gated() && self.field == Field::Complex {
            return Err(CellError::Config(format!("{} cells are real-valued", self.kind.name())));
        }
        if self.kind.is_kronecker() {
            let shapes = self
                .factor_shapes
                .as_ref()
                .ok_or_else(|| CellError::Config("Kronecker cells need factor shapes".into()))?;
            if shapes.is_empty() {
                return Err(CellError::Config("factor shape list is empty".into()));
            }
            for s in shapes {
                if s.p == 0 || s.q == 0 || !s.is_square() {
                    return Err(CellError::Config(format!(
                        "recurrent factors must be square and non-empty, got {}x{}",
                        s.p, s.q
                    )));
                }
            }
            let n: usize = shapes.iter().map(|s| s.p).product();
            if n != d.hidden {
                return Err(CellError::Config(format!(
                    "factor shapes multiply to {n}, hidden size is {}",
                    d.hidden
                )));
            }
        }
        if self.frozen_recurrent && self.kind != CellKind::Kru {
            return Err(CellError::Config("only KRU cells support a frozen recurrent matrix".into()));
        }
        Ok(())
    }
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, field: Field, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, field, |_, _| {
        let re = rng.random_range(-bound..=bound);
        let im = match field {
            Field::Real => 0.0,
            Field::Complex => rng.random_range(-bound..=bound),
        };
        C64::new(re, im)
    })
}

impl CellParameters {
    /// Fresh parameters. Input and output maps are uniform in
    /// `±1/sqrt(fan_in)`, biases zero. Dense recurrences start orthogonal
    /// (unitary over ℂ); KRU factors start Haar-unitary; KRU-LSTM factors
    /// start at `I + 0.01·G`.
    pub fn init<R: Rng + ?Sized>(spec: &CellSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let CellDims { input, hidden, output } = spec.dims;
        let field = spec.field;
        let make_recurrent = |rng: &mut R| -> Result<Recurrent> {
            Ok(match spec.kind {
                CellKind::Rnn | CellKind::Lstm => Recurrent::Dense(kron::random_unitary(hidden, field, rng)),
                CellKind::Kru => {
                    let shapes = spec.factor_shapes.as_deref().unwrap_or_default();
                    let mut k = kron::random_unitary_factors(shapes, field, rng)?;
                    k.set_frozen(spec.frozen_recurrent);
                    Recurrent::Kron(k)
                }
                CellKind::KruLstm => {
                    let shapes = spec.factor_shapes.as_deref().unwrap_or_default();
                    Recurrent::Kron(kron::near_identity_factors(shapes, field, 0.01, rng)?)
                }
            })
        };
        let in_bound = 1.0 / (input as f64).sqrt();
        let body = if spec.kind.is_gated() {
            let gate = |rng: &mut R| -> Result<Gate> {
                Ok(Gate {
                    w: make_recurrent(rng)?,
                    u: uniform_matrix(hidden, input, field, in_bound, rng),
                    b: Matrix::zeros(1, hidden, field),
                })
            };
            CellBody::Gated(Box::new([gate(rng)?, gate(rng)?, gate(rng)?, gate(rng)?]))
        } else {
            CellBody::Simple(SimpleCell {
                w: make_recurrent(rng)?,
                u: uniform_matrix(hidden, input, field, in_bound, rng),
                b: Matrix::zeros(1, hidden, field),
                modrelu_bias: (field == Field::Complex).then(|| Matrix::zeros(1, hidden, Field::Real)),
                activation: match field {
                    Field::Real => Activation::Tanh,
                    Field::Complex => Activation::ModRelu,
                },
            })
        };
        let features = hidden * field.scalar_width();
        let v = uniform_matrix(output, features, Field::Real, 1.0 / (features as f64).sqrt(), rng);
        Ok(Self {
            kind: spec.kind,
            field,
            dims: spec.dims,
            body,
            v,
            c: Matrix::zeros(1, output, Field::Real),
        })
    }

    pub fn simple(&self) -> Option<&SimpleCell> {
        match &self.body {
            CellBody::Simple(s) => Some(s),
            CellBody::Gated(_) => None,
        }
    }

    pub fn simple_mut(&mut self) -> Option<&mut SimpleCell> {
        match &mut self.body {
            CellBody::Simple(s) => Some(s),
            CellBody::Gated(_) => None,
        }
    }

    pub fn gates(&self) -> Option<&[Gate; 4]> {
        match &self.body {
            CellBody::Gated(g) => Some(g),
            CellBody::Simple(_) => None,
        }
    }

    pub fn recurrent_ops(&self) -> Vec<&Recurrent> {
        match &self.body {
            CellBody::Simple(s) => vec![&s.w],
            CellBody::Gated(g) => g.iter().map(|g| &g.w).collect(),
        }
    }

    pub fn recurrent_ops_mut(&mut self) -> Vec<&mut Recurrent> {
        match &mut self.body {
            CellBody::Simple(s) => vec![&mut s.w],
            CellBody::Gated(g) => g.iter_mut().map(|g| &mut g.w).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for view in out.tensors_mut() {
            view.matrix.fill_zero();
        }
        out
    }

    /// All tensors in declaration order: recurrent weight(s), input map,
    /// bias, modReLU offsets, then the output map and bias. Gated cells list
    /// `(W, U, b)` per gate in forget, input, output, candidate order.
    pub fn tensors(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        fn push_rec<'a>(out: &mut Vec<ParamView<'a>>, prefix: &str, w: &'a Recurrent) {
            let frozen = w.is_frozen();
            let dense = matches!(w, Recurrent::Dense(_));
            for (i, f) in w.factors().iter().enumerate() {
                out.push(ParamView {
                    name: if dense { format!("{prefix}W") } else { format!("{prefix}W.{i}") },
                    recurrent: true,
                    trainable: !frozen,
                    matrix: f,
                });
            }
        }
        match &self.body {
            CellBody::Simple(s) => {
                push_rec(&mut out, "", &s.w);
                out.push(view("U", &s.u));
                out.push(view("b", &s.b));
                if let Some(beta) = &s.modrelu_bias {
                    out.push(view("modrelu_bias", beta));
                }
            }
            CellBody::Gated(gates) => {
                for (g, name) in gates.iter().zip(GATE_NAMES) {
                    push_rec(&mut out, &format!("{name}."), &g.w);
                    out.push(view(&format!("{name}.U"), &g.u));
                    out.push(view(&format!("{name}.b"), &g.b));
                }
            }
        }
        out.push(view("V", &self.v));
        out.push(view("c", &self.c));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        fn push_rec<'a>(out: &mut Vec<ParamViewMut<'a>>, prefix: &str, w: &'a mut Recurrent) {
            let frozen = w.is_frozen();
            let dense = matches!(w, Recurrent::Dense(_));
            for (i, f) in w.factors_mut().iter_mut().enumerate() {
                out.push(ParamViewMut {
                    name: if dense { format!("{prefix}W") } else { format!("{prefix}W.{i}") },
                    recurrent: true,
                    trainable: !frozen,
                    matrix: f,
                });
            }
        }
        match &mut self.body {
            CellBody::Simple(s) => {
                push_rec(&mut out, "", &mut s.w);
                out.push(view_mut("U", &mut s.u));
                out.push(view_mut("b", &mut s.b));
                if let Some(beta) = &mut s.modrelu_bias {
                    out.push(view_mut("modrelu_bias", beta));
                }
            }
            CellBody::Gated(gates) => {
                for (g, name) in gates.iter_mut().zip(GATE_NAMES) {
                    push_rec(&mut out, &format!("{name}."), &mut g.w);
                    out.push(view_mut(&format!("{name}.U"), &mut g.u));
                    out.push(view_mut(&format!("{name}.b"), &mut g.b));
                }
            }
        }
        out.push(view_mut("V", &mut self.v));
        out.push(view_mut("c", &mut self.c));
        out
    }

    pub fn counts(&self) -> ParameterCounts {
        let mut counts = ParameterCounts::default();
        for t in self.tensors() {
            let n = t.matrix.len() * t.matrix.field().scalar_width();
            counts.total += n;
            if t.trainable {
                counts.trainable += n;
            }
            if t.recurrent {
                counts.recurrent += n;
                if t.trainable {
                    counts.recurrent_trainable += n;
                }
            }
        }
        counts
    }

    /// Soft unitary penalty summed over every recurrent operator.
    pub fn penalty(&self, amplitude: f64) -> Result<f64> {
        let mut total = 0.0;
        for w in self.recurrent_ops() {
            total += w.penalty(amplitude)?;
        }
        Ok(total)
    }

    pub fn add_penalty_grads(&self, amplitude: f64, grads: &mut CellParameters) -> Result<()> {
        for (w, g) in self.recurrent_ops().into_iter().zip(grads.recurrent_ops_mut()) {
            w.add_penalty_grad(amplitude, g)?;
        }
        Ok(())
    }

    pub fn initial_state(&self, batch: usize) -> CellState {
        let n = self.dims.hidden;
        CellState {
            h: Matrix::zeros(batch, n, self.field),
            c: self.kind.is_gated().then(|| Matrix::zeros(batch, n, Field::Real)),
        }
    }
}

fn view<'a>(name: &str, m: &'a Matrix) -> ParamView<'a> {
    ParamView {
        name: name.to_string(),
        recurrent: false,
        trainable: true,
        matrix: m,
    }
}

fn view_mut<'a>(name: &str, m: &'a mut Matrix) -> ParamViewMut<'a> {
    ParamViewMut {
        name: name.to_string(),
        recurrent: false,
        trainable: true,
        matrix: m,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub total: usize,
    pub trainable: usize,
    pub recurrent: usize,
    pub recurrent_trainable: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    /// `B x N` hidden state.
    pub h: Matrix,
    /// `B x N` real cell state (LSTM variants).
    pub c: Option<Matrix>,
}

impl CellState {
    pub fn batch(&self) -> usize {
        self.h.rows()
    }
}

/// modReLU: `z·(|z|+β)/|z|` where `|z|+β > 0`, else 0 (and 0 at `z = 0`).
/// `bias` is a real `1 x N` row applied to every row of `z`.
pub fn modrelu(z: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows() != 1 || bias.cols() != z.cols() {
        return Err(CellError::Shape(format!(
            "modReLU bias is {}x{}, input has {} columns",
            bias.rows(),
            bias.cols(),
            z.cols()
        )));
    }
    let n = z.cols();
    let mut out = Matrix::zeros(z.rows(), n, z.field());
    for r in 0..z.rows() {
        for (j, (o, &v)) in out.row_mut(r).iter_mut().zip(z.row(r)).enumerate() {
            *o = modrelu_scalar(v, bias.data()[j].re);
        }
    }
    Ok(out)
}

#[inline]
fn modrelu_scalar(z: C64, beta: f64) -> C64 {
    let r = (z.re * z.re + z.im * z.im).sqrt();
    if r > 0.0 && r + beta > 0.0 {
        z * ((r + beta) / r)
    } else {
        ZERO
    }
}

/// Returns `∂/∂z` and accumulates `∂/∂β` (summed over rows) into `g_bias`.
pub fn modrelu_backward(z: &Matrix, bias: &Matrix, g_out: &Matrix, g_bias: &mut Matrix) -> Matrix {
    let n = z.cols();
    let mut gz = Matrix::zeros(z.rows(), n, z.field());
    let gb = g_bias.data_mut();
    for r in 0..z.rows() {
        let zr = z.row(r);
        let gr = g_out.row(r);
        for (j, o) in gz.row_mut(r).iter_mut().enumerate() {
            let v = zr[j];
            let beta = bias.data()[j].re;
            let rad = (v.re * v.re + v.im * v.im).sqrt();
            if rad > 0.0 && rad + beta > 0.0 {
                let g = gr[j];
                let s = (rad + beta) / rad;
                let d = g.re * v.re + g.im * v.im;
                *o = g * s - v * (beta * d / (rad * rad * rad));
                gb[j].re += d / rad;
            }
        }
    }
    gz
}

/// Output map `ŷ = V·feat(h) + c` with `feat(h) = h` (real) or `[Re h, Im h]`.
pub fn output_head(params: &CellParameters, h: &Matrix) -> Result<Matrix> {
    let feat = head_features(params, h)?;
    let mut y = linalg::matmul_op(&feat, Op::N, &params.v, Op::T)?;
    y.add_row_in_place(&params.c)?;
    Ok(y)
}

fn head_features(params: &CellParameters, h: &Matrix) -> Result<Matrix> {
    if h.cols() != params.dims.hidden {
        return Err(CellError::Shape(format!(
            "hidden state has {} columns, expected {}",
            h.cols(),
            params.dims.hidden
        )));
    }
    if params.v.cols() != h.cols() * params.field.scalar_width() {
        return Err(CellError::Shape(format!(
            "output map has {} columns for hidden size {}",
            params.v.cols(),
            h.cols()
        )));
    }
    Ok(match params.field {
        Field::Real => h.real_part(),
        Field::Complex => {
            let n = h.cols();
            Matrix::from_fn(h.rows(), 2 * n, Field::Real, |r, j| {
                let z = h.get(r, j % n);
                C64::new(if j < n { z.re } else { z.im }, 0.0)
            })
        }
    })
}

/// Accumulates output-map gradients into `grads` and returns `∂/∂h`.
pub fn output_head_backward(
    params: &CellParameters,
    h: &Matrix,
    g_y: &Matrix,
    grads: &mut CellParameters,
) -> Result<Matrix> {
    let feat = head_features(params, h)?;
    grads
        .v
        .axpy_in_place(linalg::ONE, &linalg::matmul_op(g_y, Op::T, &feat, Op::N)?)?;
    grads.c.axpy_in_place(linalg::ONE, &g_y.col_sums())?;
    let g_feat = linalg::matmul(g_y, &params.v)?;
    Ok(match params.field {
        Field::Real => g_feat,
        Field::Complex => {
            let n = h.cols();
            Matrix::from_fn(h.rows(), n, Field::Complex, |r, j| {
                C64::new(g_feat.get(r, j).re, g_feat.get(r, j + n).re)
            })
        }
    })
}

/// Everything one step's backward pass needs.
#[derive(Clone, Debug)]
pub enum StepCache {
    Simple {
        h_prev: Matrix,
        x: Matrix,
        rec: RecurrentCache,
        z: Matrix,
    },
    Gated(Box<GatedCache>),
}

#[derive(Clone, Debug)]
pub struct GatedCache {
    h_prev: Matrix,
    c_prev: Matrix,
    x: Matrix,
    recs: Vec<RecurrentCache>,
    /// Activated gate values: forget, input, output, candidate.
    acts: [Matrix; 4],
    tanh_c: Matrix,
}

fn check_step_inputs(params: &CellParameters, state: &CellState, x: &Matrix) -> Result<()> {
    if x.cols() != params.dims.input {
        return Err(CellError::Shape(format!(
            "input has {} features, cell expects {}",
            x.cols(),
            params.dims.input
        )));
    }
    if state.h.cols() != params.dims.hidden || state.h.rows() != x.rows() {
        return Err(CellError::Shape(format!(
            "hidden state is {}x{}, expected {}x{}",
            state.h.rows(),
            state.h.cols(),
            x.rows(),
            params.dims.hidden
        )));
    }
    Ok(())
}

fn activate(act: Activation, z: &Matrix, modrelu_bias: Option<&Matrix>) -> Result<Matrix> {
    Ok(match act {
        Activation::Tanh => z.map(|v| v.tanh()),
        Activation::Identity => z.clone(),
        Activation::ModRelu => {
            let bias = modrelu_bias.ok_or_else(|| CellError::Config("modReLU needs a bias row".into()))?;
            modrelu(z, bias)?
        }
    })
}

/// Pre-activation `h Wᵀ + x Uᵀ + b` for one recurrent/input/bias triple.
fn preactivation(w: &Recurrent, u: &Matrix, b: &Matrix, h: &Matrix, x: &Matrix) -> Result<(Matrix, RecurrentCache)> {
    let (mut z, rec) = w.forward(h)?;
    let ux = linalg::matmul_op(x, Op::N, u, Op::T)?;
    z.axpy_in_place(linalg::ONE, &ux)?;
    z.add_row_in_place(b)?;
    Ok((z, rec))
}

/// Advances every row of `state` by one step on inputs `x` (`B x D`).
pub fn step_forward(params: &CellParameters, state: &CellState, x: &Matrix) -> Result<(CellState, StepCache)> {
    check_step_inputs(params, state, x)?;
    match &params.body {
        CellBody::Simple(cell) => {
            let (z, rec) = preactivation(&cell.w, &cell.u, &cell.b, &state.h, x)?;
            let h = activate(cell.activation, &z, cell.modrelu_bias.as_ref())?;
            let cache = StepCache::Simple {
                h_prev: state.h.clone(),
                x: x.clone(),
                rec,
                z,
            };
            Ok((CellState { h, c: None }, cache))
        }
        CellBody::Gated(gates) => {
            let c_prev = state
                .c
                .as_ref()
                .ok_or_else(|| CellError::Shape("gated cell needs a cell state".into()))?;
            let mut recs = Vec::with_capacity(4);
            let mut acts: Vec<Matrix> = Vec::with_capacity(4);
            for (k, gate) in gates.iter().enumerate() {
                let (z, rec) = preactivation(&gate.w, &gate.u, &gate.b, &state.h, x)?;
                recs.push(rec);
                acts.push(if k == 3 { z.map(|v| v.tanh()) } else { z.map(|v| C64::new(sigmoid(v.re), 0.0)) });
            }
            let [f, i, o, cand]: [Matrix; 4] = acts.try_into().expect("four gates");
            let c = linalg::add(
                &linalg::elementwise_mul(c_prev, &f)?,
                &linalg::elementwise_mul(&cand, &i)?,
            )?;
            let tanh_c = c.map(|v| v.tanh());
            let h = linalg::elementwise_mul(&tanh_c, &o)?;
            let cache = GatedCache {
                h_prev: state.h.clone(),
                c_prev: c_prev.clone(),
                x: x.clone(),
                recs,
                acts: [f, i, o, cand],
                tanh_c,
            };
            Ok((CellState { h, c: Some(c) }, StepCache::Gated(Box::new(cache))))
        }
    }
}

/// Reverse-mode step: accumulates parameter gradients into `grads` and
/// returns gradients for the previous hidden (and cell) state.
pub fn step_backward(
    params: &CellParameters,
    cache: &StepCache,
    g_h: &Matrix,
    g_c: Option<&Matrix>,
    grads: &mut CellParameters,
) -> Result<(Matrix, Option<Matrix>)> {
    match (&params.body, cache, &mut grads.body) {
        (CellBody::Simple(cell), StepCache::Simple { h_prev, x, rec, z }, CellBody::Simple(gcell)) => {
            if g_h.shape() != z.shape() {
                return Err(CellError::Shape("hidden gradient does not match cached step".into()));
            }
            let g_z = match cell.activation {
                Activation::Tanh => {
                    let mut g = g_h.clone();
                    for (gv, zv) in g.data_mut().iter_mut().zip(z.data()) {
                        let t = zv.re.tanh();
                        gv.re *= 1.0 - t * t;
                        gv.im = 0.0;
                    }
                    g
                }
                Activation::Identity => g_h.clone(),
                Activation::ModRelu => {
                    let bias = cell.modrelu_bias.as_ref().expect("modReLU cell has a bias");
                    let gbias = gcell.modrelu_bias.as_mut().expect("gradient mirrors parameters");
                    modrelu_backward(z, bias, g_h, gbias)
                }
            };
            let g_z = g_z.with_field(params.field);
            gcell.u.axpy_in_place(linalg::ONE, &linalg::matmul_op(&g_z, Op::T, x, Op::C)?)?;
            gcell.b.axpy_in_place(linalg::ONE, &g_z.col_sums())?;
            let g_prev = cell.w.backward(h_prev, rec, &g_z, &mut gcell.w)?;
            Ok((g_prev, None))
        }
        (CellBody::Gated(gates), StepCache::Gated(cache), CellBody::Gated(ggates)) => {
            let [f, i, o, cand] = &cache.acts;
            let n = params.dims.hidden;
            let rows = cache.h_prev.rows();
            if g_h.shape() != (rows, n) {
                return Err(CellError::Shape("hidden gradient does not match cached step".into()));
            }
            let mut g_pre: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(rows, n, Field::Real));
            let mut g_c_prev = Matrix::zeros(rows, n, Field::Real);
            for idx in 0..rows * n {
                let gh = g_h.data()[idx].re;
                let tc = cache.tanh_c.data()[idx].re;
                let (fv, iv, ov, cv) = (f.data()[idx].re, i.data()[idx].re, o.data()[idx].re, cand.data()[idx].re);
                let mut gc = gh * ov * (1.0 - tc * tc);
                if let Some(g_c) = g_c {
                    gc += g_c.data()[idx].re;
                }
                let g_o = gh * tc;
                let g_f = gc * cache.c_prev.data()[idx].re;
                let g_i = gc * cv;
                let g_cand = gc * iv;
                g_c_prev.data_mut()[idx].re = gc * fv;
                g_pre[0].data_mut()[idx].re = g_f * fv * (1.0 - fv);
                g_pre[1].data_mut()[idx].re = g_i * iv * (1.0 - iv);
                g_pre[2].data_mut()[idx].re = g_o * ov * (1.0 - ov);
                g_pre[3].data_mut()[idx].re = g_cand * (1.0 - cv * cv);
            }
            let mut g_h_prev = Matrix::zeros(rows, n, Field::Real);
            for k in 0..4 {
                let gate = &gates[k];
                let ggate = &mut ggates[k];
                ggate
                    .u
                    .axpy_in_place(linalg::ONE, &linalg::matmul_op(&g_pre[k], Op::T, &cache.x, Op::N)?)?;
                ggate.b.axpy_in_place(linalg::ONE, &g_pre[k].col_sums())?;
                let gh = gate.w.backward(&cache.h_prev, &cache.recs[k], &g_pre[k], &mut ggate.w)?;
                g_h_prev.axpy_in_place(linalg::ONE, &gh)?;
            }
            Ok((g_h_prev, Some(g_c_prev)))
        }
        _ => Err(CellError::Shape("step cache does not match the cell type".into())),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One RNN/KRU step without caching.
pub fn rnn_step(params: &CellParameters, h_prev: &Matrix, x: &Matrix) -> Result<Matrix> {
    let cell = params
        .simple()
        .ok_or_else(|| CellError::Config("rnn_step needs an RNN or KRU cell".into()))?;
    let state = CellState {
        h: h_prev.clone(),
        c: None,
    };
    check_step_inputs(params, &state, x)?;
    let mut z = cell.w.apply(h_prev)?;
    z.axpy_in_place(linalg::ONE, &linalg::matmul_op(x, Op::N, &cell.u, Op::T)?)?;
    z.add_row_in_place(&cell.b)?;
    activate(cell.activation, &z, cell.modrelu_bias.as_ref())
}

/// One LSTM/KRU-LSTM step returning `(h_t, c_t)`.
pub fn lstm_step(params: &CellParameters, h_prev: &Matrix, c_prev: &Matrix, x: &Matrix) -> Result<(Matrix, Matrix)> {
    if !params.kind.is_gated() {
        return Err(CellError::Config("lstm_step needs an LSTM or KRU-LSTM cell".into()));
    }
    let state = CellState {
        h: h_prev.clone(),
        c: Some(c_prev.clone()),
    };
    let (next, _) = step_forward(params, &state, x)?;
    Ok((next.h, next.c.expect("gated cells carry a cell state")))
}
