//! Dense real/complex matrices.
//!
//! Every matrix stores interleaved `(re, im)` pairs in row-major order. A
//! matrix tagged [`Field::Real`] keeps all imaginary parts at exactly zero;
//! the kernels take cheaper real paths when both operands are real.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Real,
    Complex,
}

impl Field {
    /// Number of real parameters carried by one scalar entry.
    pub fn scalar_width(self) -> usize {
        match self {
            Field::Real => 1,
            Field::Complex => 2,
        }
    }

    pub fn join(self, other: Field) -> Field {
        if self == Field::Complex || other == Field::Complex {
            Field::Complex
        } else {
            Field::Real
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    DimensionMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: field mismatch ({lhs:?} vs {rhs:?})")]
    FieldMismatch {
        op: &'static str,
        lhs: Field,
        rhs: Field,
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("real-field matrix has a nonzero imaginary part at index {index}")]
    ImaginaryInRealField { index: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// How an operand enters a product: as is, transposed, conjugated, or
/// conjugate-transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
    C,
    H,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
    field: Field,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, field: Field) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
            field,
        }
    }

    pub fn identity(n: usize, field: Field) -> Self {
        let mut m = Self::zeros(n, n, field);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(value, 0.0); rows * cols],
            field: Field::Real,
        }
    }

    pub fn from_real(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: values.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data: values.into_iter().map(|v| C64::new(v, 0.0)).collect(),
            field: Field::Real,
        })
    }

    pub fn from_complex(rows: usize, cols: usize, values: Vec<C64>) -> Result<Self> {
        Self::from_data(rows, cols, values, Field::Complex)
    }

    /// Builds a matrix from raw entries, checking the real-field invariant.
    pub fn from_data(rows: usize, cols: usize, data: Vec<C64>, field: Field) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if field == Field::Real {
            if let Some(index) = data.iter().position(|z| z.im != 0.0) {
                return Err(LinalgError::ImaginaryInRealField { index });
            }
        }
        Ok(Self {
            rows,
            cols,
            data,
            field,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, field: Field, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let z = f(i, j);
                data.push(match field {
                    Field::Real => C64::new(z.re, 0.0),
                    Field::Complex => z,
                });
            }
        }
        Self {
            rows,
            cols,
            data,
            field,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn is_real(&self) -> bool {
        self.field == Field::Real
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    /// Mutable access to the raw entries. Callers writing into a real-field
    /// matrix must leave every imaginary part at zero.
    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: C64) {
        debug_assert!(self.field == Field::Complex || value.im == 0.0);
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [C64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Same shape and entries, reinterpreted with a different row count.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: self.data.len(),
            });
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn to_complex(&self) -> Matrix {
        Matrix {
            field: Field::Complex,
            ..self.clone()
        }
    }

    /// Promotes a real matrix to complex; complex matrices are returned as is.
    pub fn with_field(&self, field: Field) -> Matrix {
        match (self.field, field) {
            (Field::Real, Field::Complex) => self.to_complex(),
            (Field::Complex, Field::Real) => self.real_part(),
            _ => self.clone(),
        }
    }

    pub fn real_part(&self) -> Matrix {
        self.map_field(Field::Real, |z| C64::new(z.re, 0.0))
    }

    pub fn imag_part(&self) -> Matrix {
        self.map_field(Field::Real, |z| C64::new(z.im, 0.0))
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Matrix {
        self.map_field(self.field, f)
    }

    fn map_field(&self, field: Field, f: impl Fn(C64) -> C64) -> Matrix {
        let data = self
            .data
            .iter()
            .map(|&z| {
                let w = f(z);
                match field {
                    Field::Real => C64::new(w.re, 0.0),
                    Field::Complex => w,
                }
            })
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
            field,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows, self.field);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn conj(&self) -> Matrix {
        match self.field {
            Field::Real => self.clone(),
            Field::Complex => self.map(|z| z.conj()),
        }
    }

    pub fn apply_op(&self, op: Op) -> Matrix {
        match op {
            Op::N => self.clone(),
            Op::T => self.transpose(),
            Op::C => self.conj(),
            Op::H => hermitian(self),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Sum over rows, producing a `1 x cols` matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols, self.field);
        for i in 0..self.rows {
            for (o, &z) in out.data.iter_mut().zip(self.row(i)) {
                *o += z;
            }
        }
        out
    }

    /// Adds a `1 x cols` row vector to every row in place.
    pub fn add_row_in_place(&mut self, row: &Matrix) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(mismatch("add_row", self, row));
        }
        self.field = self.field.join(row.field);
        let cols = self.cols;
        for chunk in self.data.chunks_mut(cols) {
            for (o, &z) in chunk.iter_mut().zip(&row.data) {
                *o += z;
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, in place.
    pub fn axpy_in_place(&mut self, alpha: C64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(mismatch("axpy", self, other));
        }
        if alpha.im != 0.0 || other.field == Field::Complex {
            self.field = Field::Complex;
        }
        for (o, &z) in self.data.iter_mut().zip(&other.data) {
            *o += alpha * z;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|z| *z = ZERO);
    }
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> LinalgError {
    LinalgError::DimensionMismatch {
        op,
        lhs_rows: a.rows,
        lhs_cols: a.cols,
        rhs_rows: b.rows,
        rhs_cols: b.cols,
    }
}

fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    Ok(())
}

/// Standard product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(mismatch("matmul", a, b));
    }
    if a.field != b.field {
        return Err(LinalgError::FieldMismatch {
            op: "matmul",
            lhs: a.field,
            rhs: b.field,
        });
    }
    Ok(gemm_nn(a, b))
}

/// Product `op_a(a) * op_b(b)`. Operands of different fields are promoted
/// to complex.
pub fn matmul_op(a: &Matrix, op_a: Op, b: &Matrix, op_b: Op) -> Result<Matrix> {
    let (ar, ac) = match op_a {
        Op::N | Op::C => (a.rows, a.cols),
        Op::T | Op::H => (a.cols, a.rows),
    };
    let (br, bc) = match op_b {
        Op::N | Op::C => (b.rows, b.cols),
        Op::T | Op::H => (b.cols, b.rows),
    };
    if ac != br {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_op",
            lhs_rows: ar,
            lhs_cols: ac,
            rhs_rows: br,
            rhs_cols: bc,
        });
    }
    let field = a.field.join(b.field);
    let lhs = with_op(a, op_a, field);
    let rhs = with_op(b, op_b, field);
    Ok(gemm_nn(&lhs, &rhs))
}

fn with_op(m: &Matrix, op: Op, field: Field) -> std::borrow::Cow<'_, Matrix> {
    use std::borrow::Cow;
    let m: Cow<'_, Matrix> = if m.field == field {
        Cow::Borrowed(m)
    } else {
        Cow::Owned(m.with_field(field))
    };
    match op {
        Op::N => m,
        Op::C if field == Field::Real => m,
        other => Cow::Owned(m.apply_op(other)),
    }
}

// i-k-j loop order keeps the inner loop contiguous in both `b` and the output.
fn gemm_nn(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let field = a.field.join(b.field);
    if field == Field::Real {
        let bre: Vec<f64> = b.data.iter().map(|z| z.re).collect();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = a.data[i * k + kk].re;
                if aik == 0.0 {
                    continue;
                }
                let brow = &bre[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        return Matrix {
            rows: m,
            cols: n,
            data: out.into_iter().map(|v| C64::new(v, 0.0)).collect(),
            field,
        };
    }
    let mut out = vec![ZERO; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            if aik == ZERO {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
        field,
    }
}

/// Conjugate transpose. Plain transpose for real matrices.
pub fn hermitian(a: &Matrix) -> Matrix {
    let mut t = a.transpose();
    if t.field == Field::Complex {
        t.data.iter_mut().for_each(|z| *z = z.conj());
    }
    t
}

pub fn frobenius_norm_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|z| z.norm_sqr()).sum()
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn elementwise_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_with("elementwise_mul", a, b, |x, y| x * y)
}

pub fn neg(a: &Matrix) -> Matrix {
    a.map(|z| -z)
}

pub fn scale(a: &Matrix, alpha: C64) -> Matrix {
    let field = if alpha.im != 0.0 { Field::Complex } else { a.field };
    a.map_field(field, |z| alpha * z)
}

/// `alpha * x + y`.
pub fn axpy(alpha: C64, x: &Matrix, y: &Matrix) -> Result<Matrix> {
    check_same_shape("axpy", x, y)?;
    let mut out = y.clone();
    out.axpy_in_place(alpha, x)?;
    Ok(out)
}

fn zip_with(op: &'static str, a: &Matrix, b: &Matrix, f: impl Fn(C64, C64) -> C64) -> Result<Matrix> {
    check_same_shape(op, a, b)?;
    let field = a.field.join(b.field);
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
        field,
    })
}

/// Relative Frobenius distance `||a - b|| / max(||b||, tiny)`.
pub fn rel_frobenius_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm_sqr()).sum();
    let base = frobenius_norm_sq(b).max(1e-300);
    (diff / base).sqrt()
}
