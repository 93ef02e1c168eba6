//! Kronecker-factored matrices.
//!
//! A [`KroneckerMatrix`] holds factors `W_0, ..., W_{F-1}` with
//! `W_f in C^{P_f x Q_f}` and represents `W = W_0 ⊗ ... ⊗ W_{F-1}` of shape
//! `N x K` (`N = Π P_f`, `K = Π Q_f`) without ever materializing it.
//!
//! [`kron_forward`] computes `Y = X Wᵀ` for a dense `X` (`M x K`) by
//! contracting one factor at a time. Pass `f` treats its input as
//! `M·P_0···P_{f-1}` row blocks of `Q_f x stride` entries and produces blocks of
//! `P_f x stride`, where `stride = Q_{f+1}···Q_{F-1}`:
//!
//! ```text
//! Y_f[r, p, s] = Σ_q Y_{f-1}[r, q, s] · W_f[p, q]
//! ```
//!
//! The transpose is plain (no conjugation) in complex mode. For all-`2x2`
//! factors each pass costs `Θ(M·N)`, giving `Θ(M·N·log N)` overall.
//!
//! Gradients use the split-real convention: for a complex parameter `z` the
//! reported gradient is `∂L/∂Re z + i·∂L/∂Im z`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Field, LinalgError, Matrix, C64, ONE, ZERO};
use crate::rng::{complex_gaussian, gaussian};

/// Upper bound on `N·K` for [`kron_expand`].
pub const EXPAND_LIMIT: usize = 1 << 26;

// Below this many multiply-adds per pass the rayon split costs more than it saves.
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum KronError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("a Kronecker matrix needs at least one factor")]
    NoFactors,
    #[error("factor shape {p}x{q} is invalid (both dimensions must be >= 1)")]
    BadFactorShape { p: usize, q: usize },
    #[error("factor {index} has field {found:?}, expected {expected:?}")]
    FieldMismatch {
        index: usize,
        expected: Field,
        found: Field,
    },
    #[error("input field {input:?} does not match operator field {operator:?}")]
    InputFieldMismatch { input: Field, operator: Field },
    #[error("expansion would need {entries} entries (limit {limit})")]
    TooLarge { entries: usize, limit: usize },
    #[error("factor {index} is {p}x{q}; the unitary penalty needs square factors")]
    NonSquareFactor { index: usize, p: usize, q: usize },
    #[error("input has {found} columns but the operator expects {expected}")]
    InputDimension { expected: usize, found: usize },
    #[error("forward cache does not match: {0}")]
    CacheMismatch(String),
    #[error("negative penalty amplitude {0}")]
    NegativeAmplitude(f64),
    #[error("payload has {found} bytes, expected {expected}")]
    PayloadLength { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, KronError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorShape {
    /// Output (row) dimension of the factor.
    pub p: usize,
    /// Input (column) dimension of the factor.
    pub q: usize,
}

impl FactorShape {
    pub fn new(p: usize, q: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(KronError::BadFactorShape { p, q });
        }
        Ok(Self { p, q })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn is_square(&self) -> bool {
        self.p == self.q
    }
}

/// `log2(n)` square `2x2` factors; `None` unless `n` is a power of two >= 2.
pub fn auto_2x2_shapes(n: usize) -> Option<Vec<FactorShape>> {
    if n < 2 || !n.is_power_of_two() {
        return None;
    }
    let count = n.trailing_zeros() as usize;
    Some(vec![FactorShape { p: 2, q: 2 }; count])
}

#[derive(Clone, Debug, PartialEq)]
pub struct KroneckerMatrix {
    factors: Vec<Matrix>,
    field: Field,
    frozen: bool,
}

impl KroneckerMatrix {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        let first = factors.first().ok_or(KronError::NoFactors)?;
        let field = first.field();
        for (index, f) in factors.iter().enumerate() {
            if f.rows() == 0 || f.cols() == 0 {
                return Err(KronError::BadFactorShape {
                    p: f.rows(),
                    q: f.cols(),
                });
            }
            if f.field() != field {
                return Err(KronError::FieldMismatch {
                    index,
                    expected: field,
                    found: f.field(),
                });
            }
        }
        Ok(Self {
            factors,
            field,
            frozen: false,
        })
    }

    pub fn identity(shapes: &[FactorShape], field: Field) -> Result<Self> {
        let factors = shapes
            .iter()
            .map(|s| {
                if !s.is_square() {
                    return Err(KronError::NonSquareFactor {
                        index: 0,
                        p: s.p,
                        q: s.q,
                    });
                }
                Ok(Matrix::identity(s.p, field))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(factors)
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    /// Mutable factor access; callers must keep each factor's shape and field.
    pub fn factors_mut(&mut self) -> &mut [Matrix] {
        &mut self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn shapes(&self) -> Vec<FactorShape> {
        self.factors
            .iter()
            .map(|f| FactorShape {
                p: f.rows(),
                q: f.cols(),
            })
            .collect()
    }

    pub fn out_dim(&self) -> usize {
        self.factors.iter().map(Matrix::rows).product()
    }

    pub fn in_dim(&self) -> usize {
        self.factors.iter().map(Matrix::cols).product()
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn is_square(&self) -> bool {
        self.factors.iter().all(|f| f.rows() == f.cols())
    }

    /// Frozen operators still produce gradients; optimizers skip them.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }

    /// Number of `f64` values in the serialized payload.
    pub fn payload_len(&self) -> usize {
        self.factors.iter().map(Matrix::len).sum::<usize>() * self.field.scalar_width()
    }

    pub fn manifest(&self) -> KronManifest {
        KronManifest {
            num_factors: self.factors.len(),
            shapes: self.shapes(),
            field: self.field,
            frozen: self.frozen,
        }
    }

    /// Appends the factor entries as little-endian `f64`: factors in order,
    /// entries row-major, `re` then `im` for complex fields (`re` only for real).
    pub fn write_payload(&self, out: &mut Vec<u8>) {
        for f in &self.factors {
            write_matrix_payload(f, out);
        }
    }

    pub fn from_payload(manifest: &KronManifest, bytes: &[u8]) -> Result<Self> {
        if manifest.shapes.len() != manifest.num_factors {
            return Err(KronError::CacheMismatch(format!(
                "manifest lists {} shapes for {} factors",
                manifest.shapes.len(),
                manifest.num_factors
            )));
        }
        let width = manifest.field.scalar_width();
        let expected: usize = manifest.shapes.iter().map(|s| s.p * s.q * width * 8).sum();
        if bytes.len() != expected {
            return Err(KronError::PayloadLength {
                expected,
                found: bytes.len(),
            });
        }
        let mut offset = 0;
        let mut factors = Vec::with_capacity(manifest.num_factors);
        for s in &manifest.shapes {
            let n = s.p * s.q * width * 8;
            factors.push(read_matrix_payload(s.p, s.q, manifest.field, &bytes[offset..offset + n])?);
            offset += n;
        }
        let mut k = Self::new(factors)?;
        k.frozen = manifest.frozen;
        Ok(k)
    }
}

/// JSON-side description of a serialized [`KroneckerMatrix`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KronManifest {
    pub num_factors: usize,
    pub shapes: Vec<FactorShape>,
    pub field: Field,
    #[serde(default)]
    pub frozen: bool,
}

pub fn write_matrix_payload(m: &Matrix, out: &mut Vec<u8>) {
    for z in m.data() {
        out.extend_from_slice(&z.re.to_le_bytes());
        if m.field() == Field::Complex {
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
}

pub fn read_matrix_payload(rows: usize, cols: usize, field: Field, bytes: &[u8]) -> Result<Matrix> {
    let width = field.scalar_width();
    let expected = rows * cols * width * 8;
    if bytes.len() != expected {
        return Err(KronError::PayloadLength {
            expected,
            found: bytes.len(),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let data = match field {
        Field::Real => vals.into_iter().map(|v| C64::new(v, 0.0)).collect(),
        Field::Complex => vals.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect(),
    };
    Ok(Matrix::from_data(rows, cols, data, field)?)
}

/// Intermediate outputs of one forward pass. `outputs[f]` is `Y_f` stored as
/// an `M x (P_0···P_f · Q_{f+1}···Q_{F-1})` matrix; the last one is `M x N`.
#[derive(Clone, Debug)]
pub struct KronForwardCache {
    input_rows: usize,
    input_cols: usize,
    shapes: Vec<FactorShape>,
    outputs: Vec<Matrix>,
}

impl KronForwardCache {
    pub fn outputs(&self) -> &[Matrix] {
        &self.outputs
    }

    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("cache holds at least one output")
    }

    pub fn into_output(mut self) -> Matrix {
        self.outputs.pop().expect("cache holds at least one output")
    }
}

#[derive(Clone, Debug)]
pub struct KronGradients {
    /// One gradient per factor, shaped like the factor.
    pub factor_grads: Vec<Matrix>,
    /// Gradient with respect to the dense input (`M x K`).
    pub input_grad: Matrix,
}

/// Materializes the full `N x K` product.
pub fn kron_expand(w: &KroneckerMatrix) -> Result<Matrix> {
    let entries = w.out_dim().saturating_mul(w.in_dim());
    if entries > EXPAND_LIMIT {
        return Err(KronError::TooLarge {
            entries,
            limit: EXPAND_LIMIT,
        });
    }
    let mut acc = w.factors[0].clone();
    for f in &w.factors[1..] {
        acc = kron2(&acc, f);
    }
    Ok(acc)
}

fn kron2(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let field = a.field().join(b.field());
    let mut out = Matrix::zeros(ar * br, ac * bc, field);
    let cols = ac * bc;
    let data = out.data_mut();
    for i in 0..ar {
        for j in 0..ac {
            let aij = a.get(i, j);
            for k in 0..br {
                let row = (i * br + k) * cols + j * bc;
                for (o, &bv) in data[row..row + bc].iter_mut().zip(b.row(k)) {
                    *o = aij * bv;
                }
            }
        }
    }
    out
}

fn check_input(x: &Matrix, w: &KroneckerMatrix) -> Result<()> {
    if x.cols() != w.in_dim() {
        return Err(KronError::InputDimension {
            expected: w.in_dim(),
            found: x.cols(),
        });
    }
    if x.field() != w.field() {
        return Err(KronError::InputFieldMismatch {
            input: x.field(),
            operator: w.field(),
        });
    }
    Ok(())
}

/// One factor pass: `blocks` row blocks of `q x stride` become `p x stride`.
/// The result replaces the contents of `out`.
fn factor_pass(input: &[C64], out: &mut Vec<C64>, factor: &Matrix, stride: usize) {
    let (p, q) = factor.shape();
    let real = factor.is_real();
    let w = factor.data();
    let in_block = q * stride;
    let out_block = p * stride;
    let len = input.len() / in_block.max(1) * out_block;
    out.clear();
    if len * q >= PARALLEL_THRESHOLD && rayon::current_num_threads() > 1 {
        out.resize(len, ZERO);
        out.par_chunks_mut(out_block)
            .zip(input.par_chunks(in_block))
            .for_each(|(ob, ib)| pass_block(ob, ib, w, p, q, stride, real));
    } else {
        out.reserve(len);
        for ib in input.chunks_exact(in_block) {
            extend_block(out, ib, w, p, q, stride, real);
        }
    }
}

/// Sequential variant of [`pass_block`] that appends instead of overwriting.
#[inline(always)]
fn extend_block(out: &mut Vec<C64>, ib: &[C64], w: &[C64], p: usize, q: usize, stride: usize, real: bool) {
    if p == 2 && q == 2 {
        let (i0, i1) = ib.split_at(stride);
        if real {
            let (w00, w01, w10, w11) = (w[0].re, w[1].re, w[2].re, w[3].re);
            out.extend(i0.iter().zip(i1).map(|(&a, &b)| scale_real(w00, a) + scale_real(w01, b)));
            out.extend(i0.iter().zip(i1).map(|(&a, &b)| scale_real(w10, a) + scale_real(w11, b)));
        } else {
            let (w00, w01, w10, w11) = (w[0], w[1], w[2], w[3]);
            out.extend(i0.iter().zip(i1).map(|(&a, &b)| w00 * a + w01 * b));
            out.extend(i0.iter().zip(i1).map(|(&a, &b)| w10 * a + w11 * b));
        }
        return;
    }
    for row in w.chunks_exact(q) {
        out.extend((0..stride).map(|s| {
            let mut acc = ZERO;
            for (qi, &wv) in row.iter().enumerate() {
                let x = ib[qi * stride + s];
                acc += if real { scale_real(wv.re, x) } else { wv * x };
            }
            acc
        }));
    }
}

#[inline(always)]
fn scale_real(w: f64, x: C64) -> C64 {
    C64::new(w * x.re, w * x.im)
}

#[inline(always)]
fn pass_block(ob: &mut [C64], ib: &[C64], w: &[C64], p: usize, q: usize, stride: usize, real: bool) {
    if p == 2 && q == 2 {
        let (i0, i1) = ib.split_at(stride);
        let (o0, o1) = ob.split_at_mut(stride);
        if real {
            let (w00, w01, w10, w11) = (w[0].re, w[1].re, w[2].re, w[3].re);
            for s in 0..stride {
                let (a, b) = (i0[s], i1[s]);
                o0[s] = scale_real(w00, a) + scale_real(w01, b);
                o1[s] = scale_real(w10, a) + scale_real(w11, b);
            }
        } else {
            let (w00, w01, w10, w11) = (w[0], w[1], w[2], w[3]);
            for s in 0..stride {
                let (a, b) = (i0[s], i1[s]);
                o0[s] = w00 * a + w01 * b;
                o1[s] = w10 * a + w11 * b;
            }
        }
        return;
    }
    if stride == 1 {
        for (o, row) in ob.iter_mut().zip(w.chunks_exact(q)) {
            *o = row.iter().zip(ib).map(|(&a, &b)| a * b).sum();
        }
        return;
    }
    for pi in 0..p {
        let orow = &mut ob[pi * stride..(pi + 1) * stride];
        for qi in 0..q {
            let wv = w[pi * q + qi];
            let irow = &ib[qi * stride..(qi + 1) * stride];
            match (qi, real) {
                (0, true) => orow.iter_mut().zip(irow).for_each(|(o, &x)| *o = scale_real(wv.re, x)),
                (0, false) => orow.iter_mut().zip(irow).for_each(|(o, &x)| *o = wv * x),
                (_, true) => orow.iter_mut().zip(irow).for_each(|(o, &x)| *o += scale_real(wv.re, x)),
                (_, false) => orow.iter_mut().zip(irow).for_each(|(o, &x)| *o += wv * x),
            }
        }
    }
}

/// Backward through one factor pass: accumulates the factor gradient into
/// `gw` and writes the gradient of the pass input into `g_in`.
fn factor_pass_backward(g: &[C64], input: &[C64], factor: &[C64], gw: &mut [C64], g_in: &mut [C64], p: usize, q: usize, stride: usize) {
    let blocks = g.chunks_exact(p * stride).zip(input.chunks_exact(q * stride)).zip(g_in.chunks_exact_mut(q * stride));
    if p == 2 && q == 2 {
        let (c00, c01, c10, c11) = (factor[0].conj(), factor[1].conj(), factor[2].conj(), factor[3].conj());
        let mut acc = [ZERO; 4];
        for ((gb, ib), gib) in blocks {
            let (g0, g1) = gb.split_at(stride);
            let (x0, x1) = ib.split_at(stride);
            let (o0, o1) = gib.split_at_mut(stride);
            for s in 0..stride {
                let (a, b) = (g0[s], g1[s]);
                let (u, v) = (x0[s].conj(), x1[s].conj());
                acc[0] += a * u;
                acc[1] += a * v;
                acc[2] += b * u;
                acc[3] += b * v;
                o0[s] = a * c00 + b * c10;
                o1[s] = a * c01 + b * c11;
            }
        }
        gw.iter_mut().zip(acc).for_each(|(o, a)| *o += a);
        return;
    }
    for ((gb, ib), gib) in blocks {
        gib.iter_mut().for_each(|z| *z = ZERO);
        for pi in 0..p {
            let grow = &gb[pi * stride..(pi + 1) * stride];
            for qi in 0..q {
                let irow = &ib[qi * stride..(qi + 1) * stride];
                let mut acc = ZERO;
                for (&gv, &xv) in grow.iter().zip(irow) {
                    acc += gv * xv.conj();
                }
                gw[pi * q + qi] += acc;
                let wc = factor[pi * q + qi].conj();
                let girow = &mut gib[qi * stride..(qi + 1) * stride];
                for (o, &gv) in girow.iter_mut().zip(grow) {
                    *o += gv * wc;
                }
            }
        }
    }
}

/// Row counts and strides of each pass: `(blocks_f, stride_f)`.
fn pass_layout(m: usize, shapes: &[FactorShape]) -> Vec<(usize, usize)> {
    let f_count = shapes.len();
    let mut layout = Vec::with_capacity(f_count);
    let mut blocks = m;
    for f in 0..f_count {
        let stride: usize = shapes[f + 1..].iter().map(|s| s.q).product();
        layout.push((blocks, stride));
        blocks *= shapes[f].p;
    }
    layout
}

/// `Y = X Wᵀ` keeping every intermediate output for the backward pass.
pub fn kron_forward(x: &Matrix, w: &KroneckerMatrix) -> Result<(Matrix, KronForwardCache)> {
    check_input(x, w)?;
    let m = x.rows();
    let shapes = w.shapes();
    let layout = pass_layout(m, &shapes);
    let mut outputs: Vec<Matrix> = Vec::with_capacity(shapes.len());
    for (f, factor) in w.factors.iter().enumerate() {
        let (blocks, stride) = layout[f];
        let len = blocks * factor.rows() * stride;
        let mut data = Vec::new();
        if m > 0 {
            let input = if f == 0 { x.data() } else { outputs[f - 1].data() };
            factor_pass(input, &mut data, factor, stride);
        }
        outputs.push(Matrix::from_data(m, len / m.max(1), data, w.field)?);
    }
    let cache = KronForwardCache {
        input_rows: m,
        input_cols: x.cols(),
        shapes,
        outputs,
    };
    Ok((cache.output().clone(), cache))
}

/// `Y = X Wᵀ` using two ping-pong buffers and no cache.
pub fn kron_apply(x: &Matrix, w: &KroneckerMatrix) -> Result<Matrix> {
    check_input(x, w)?;
    let m = x.rows();
    let (in_dim, out_dim) = (w.in_dim(), w.out_dim());
    let shapes = w.shapes();
    // Strides do not depend on the row count, so one row's layout serves all.
    let layout = pass_layout(1, &shapes);
    let max_len = layout
        .iter()
        .zip(&shapes)
        .map(|(&(blocks, stride), s)| blocks * s.p * stride)
        .max()
        .unwrap_or(0)
        .max(in_dim);
    let mut out = vec![ZERO; m * out_dim];
    if m == 0 || out_dim == 0 {
        return Ok(Matrix::from_data(m, out_dim, out, w.field)?);
    }
    // Rows go through every factor one at a time, so the intermediates stay in cache.
    let apply_row = |xr: &[C64], yr: &mut [C64], a: &mut Vec<C64>, b: &mut Vec<C64>| {
        a.clear();
        a.extend_from_slice(xr);
        for (factor, &(_, stride)) in w.factors.iter().zip(&layout) {
            let (p, q) = factor.shape();
            b.resize(a.len() / (q * stride) * p * stride, ZERO);
            for (ob, ib) in b.chunks_exact_mut(p * stride).zip(a.chunks_exact(q * stride)) {
                pass_block(ob, ib, factor.data(), p, q, stride, factor.is_real());
            }
            std::mem::swap(a, b);
        }
        yr.copy_from_slice(a);
    };
    if m * max_len * shapes.len() >= PARALLEL_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(out_dim).zip(x.data().par_chunks(in_dim)).for_each_init(
            || (Vec::with_capacity(max_len), Vec::with_capacity(max_len)),
            |(a, b), (yr, xr)| apply_row(xr, yr, a, b),
        );
    } else {
        let (mut a, mut b) = (Vec::with_capacity(max_len), Vec::with_capacity(max_len));
        for (yr, xr) in out.chunks_mut(out_dim).zip(x.data().chunks(in_dim)) {
            apply_row(xr, yr, &mut a, &mut b);
        }
    }
    Ok(Matrix::from_data(m, out_dim, out, w.field)?)
}

/// Gradients of `⟨gY, X Wᵀ⟩` (real inner product over re/im parts).
pub fn kron_backward(
    x: &Matrix,
    w: &KroneckerMatrix,
    cache: &KronForwardCache,
    grad_output: &Matrix,
) -> Result<KronGradients> {
    check_input(x, w)?;
    let m = x.rows();
    let shapes = w.shapes();
    if cache.input_rows != m || cache.input_cols != x.cols() {
        return Err(KronError::CacheMismatch(format!(
            "cache was built for a {}x{} input, got {}x{}",
            cache.input_rows,
            cache.input_cols,
            m,
            x.cols()
        )));
    }
    if cache.shapes != shapes || cache.outputs.len() != shapes.len() {
        return Err(KronError::CacheMismatch("factor shapes differ".into()));
    }
    if grad_output.shape() != (m, w.out_dim()) {
        return Err(KronError::CacheMismatch(format!(
            "output gradient is {}x{}, expected {}x{}",
            grad_output.rows(),
            grad_output.cols(),
            m,
            w.out_dim()
        )));
    }
    let field = w.field.join(grad_output.field());
    let layout = pass_layout(m, &shapes);
    let mut factor_grads: Vec<Matrix> = shapes.iter().map(|s| Matrix::zeros(s.p, s.q, field)).collect();
    let mut g: Vec<C64> = grad_output.data().to_vec();
    let mut g_in: Vec<C64> = Vec::new();
    for f in (0..shapes.len()).rev() {
        let (blocks, stride) = layout[f];
        let FactorShape { p, q } = shapes[f];
        let input = if f == 0 { x.data() } else { cache.outputs[f - 1].data() };
        let factor = w.factors[f].data();
        let gw = factor_grads[f].data_mut();
        g_in.resize(blocks * q * stride, ZERO);
        factor_pass_backward(&g, input, factor, gw, &mut g_in, p, q, stride);
        std::mem::swap(&mut g, &mut g_in);
    }
    if field == Field::Real {
        factor_grads.iter_mut().for_each(|m| m.data_mut().iter_mut().for_each(|z| z.im = 0.0));
        g.iter_mut().for_each(|z| z.im = 0.0);
    }
    let input_grad = Matrix::from_data(m, x.cols(), g, field)?;
    Ok(KronGradients {
        factor_grads,
        input_grad,
    })
}

fn check_square(factors: &[Matrix]) -> Result<()> {
    for (index, f) in factors.iter().enumerate() {
        if f.rows() != f.cols() {
            return Err(KronError::NonSquareFactor {
                index,
                p: f.rows(),
                q: f.cols(),
            });
        }
    }
    Ok(())
}

/// `W^H W - I` for one square factor.
fn gram_residual(f: &Matrix) -> Matrix {
    let mut g = linalg::matmul_op(f, linalg::Op::H, f, linalg::Op::N).expect("square factor");
    for i in 0..f.cols() {
        let z = g.get(i, i);
        g.set(i, i, z - ONE);
    }
    g
}

/// `amplitude · Σ_f ||W_f^H W_f - I||_F²` over arbitrary square matrices.
pub fn unitary_penalty(factors: &[Matrix], amplitude: f64) -> Result<f64> {
    if amplitude < 0.0 {
        return Err(KronError::NegativeAmplitude(amplitude));
    }
    check_square(factors)?;
    Ok(amplitude * factors.iter().map(|f| linalg::frobenius_norm_sq(&gram_residual(f))).sum::<f64>())
}

/// Gradient of [`unitary_penalty`]: `4·amplitude·W_f (W_f^H W_f - I)` per factor.
pub fn unitary_penalty_grad(factors: &[Matrix], amplitude: f64) -> Result<Vec<Matrix>> {
    if amplitude < 0.0 {
        return Err(KronError::NegativeAmplitude(amplitude));
    }
    check_square(factors)?;
    Ok(factors
        .iter()
        .map(|f| {
            let prod = linalg::matmul(f, &gram_residual(f)).expect("square factor");
            linalg::scale(&prod, C64::new(4.0 * amplitude, 0.0))
        })
        .collect())
}

pub fn soft_unitary_penalty(w: &KroneckerMatrix, amplitude: f64) -> Result<f64> {
    unitary_penalty(&w.factors, amplitude)
}

pub fn soft_unitary_grad(w: &KroneckerMatrix, amplitude: f64) -> Result<Vec<Matrix>> {
    unitary_penalty_grad(&w.factors, amplitude)
}

/// Haar-random unitary (complex) or orthogonal (real) `n x n` matrix:
/// Gram-Schmidt on a Gaussian matrix, which fixes `diag(R) > 0`.
pub fn random_unitary<R: Rng + ?Sized>(n: usize, field: Field, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<C64>> = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| match field {
                    Field::Real => C64::new(gaussian(rng), 0.0),
                    Field::Complex => complex_gaussian(rng),
                })
                .collect()
        })
        .collect();
    for j in 0..n {
        // Two sweeps of modified Gram-Schmidt keep the residual at rounding level.
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let qi = &done[i];
                let v = &mut rest[0];
                let proj: C64 = qi.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
                for (vk, &qk) in v.iter_mut().zip(qi) {
                    *vk -= proj * qk;
                }
            }
        }
        let norm = cols[j].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|z| *z /= norm);
    }
    Matrix::from_fn(n, n, field, |i, j| cols[j][i])
}

pub fn random_unitary_factors<R: Rng + ?Sized>(
    shapes: &[FactorShape],
    field: Field,
    rng: &mut R,
) -> Result<KroneckerMatrix> {
    let mut factors = Vec::with_capacity(shapes.len());
    for (index, s) in shapes.iter().enumerate() {
        if !s.is_square() {
            return Err(KronError::NonSquareFactor { index, p: s.p, q: s.q });
        }
        factors.push(random_unitary(s.p, field, rng));
    }
    KroneckerMatrix::new(factors)
}

/// Factors `I + noise·G` with Gaussian `G`.
pub fn near_identity_factors<R: Rng + ?Sized>(
    shapes: &[FactorShape],
    field: Field,
    noise: f64,
    rng: &mut R,
) -> Result<KroneckerMatrix> {
    let mut factors = Vec::with_capacity(shapes.len());
    for (index, s) in shapes.iter().enumerate() {
        if !s.is_square() {
            return Err(KronError::NonSquareFactor { index, p: s.p, q: s.q });
        }
        factors.push(Matrix::from_fn(s.p, s.q, field, |i, j| {
            let base = if i == j { ONE } else { ZERO };
            let g = match field {
                Field::Real => C64::new(gaussian(rng), 0.0),
                Field::Complex => complex_gaussian(rng),
            };
            base + g * noise
        }));
    }
    KroneckerMatrix::new(factors)
}

/// Real parameter count `c · Σ_f P_f·Q_f` with `c = 2` for complex factors.
pub fn parameter_count(w: &KroneckerMatrix) -> usize {
    w.field.scalar_width() * w.factors.iter().map(Matrix::len).sum::<usize>()
}
