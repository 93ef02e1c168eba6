//! Spectral and gradient-flow instrumentation for recurrent operators.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{CellError, CellParameters, Recurrent};
use crate::kron::{self, KronError, KroneckerMatrix};
use crate::linalg::{self, Field, LinalgError, Matrix, Op, C64};
use crate::rng::{complex_gaussian, rng_from_seed};
use crate::tasks::TaskBatch;
use crate::training::{self, LossOptions, TrainError};

/// Largest dimension for which dense SVD and eigensolves are attempted.
pub const DENSE_LIMIT: usize = 128;
/// Largest dimension for which the factor-wise residual is cross-checked
/// against the expanded matrix.
pub const RESIDUAL_CROSS_CHECK_LIMIT: usize = 256;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiagError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kron(#[from] KronError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("operator is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("power iteration did not converge in {iters} iterations (last estimate {estimate})")]
    NotConverged { iters: usize, estimate: f64 },
    #[error("factor-wise residual {factored} disagrees with dense residual {dense}")]
    ResidualMismatch { factored: f64, dense: f64 },
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, DiagError>;

fn square_dim(w: &Recurrent) -> Result<usize> {
    let (rows, cols) = match w {
        Recurrent::Dense(m) => m.shape(),
        Recurrent::Kron(k) => (k.out_dim(), k.in_dim()),
    };
    if rows != cols {
        return Err(DiagError::NotSquare { rows, cols });
    }
    Ok(rows)
}

fn adjoint(w: &Recurrent) -> Result<Recurrent> {
    Ok(match w {
        Recurrent::Dense(m) => Recurrent::Dense(linalg::hermitian(m)),
        Recurrent::Kron(k) => Recurrent::Kron(KroneckerMatrix::new(k.factors().iter().map(linalg::hermitian).collect())?),
    })
}

fn normalize(v: &mut Matrix) -> f64 {
    let norm = linalg::frobenius_norm_sq(v).sqrt();
    if norm > 0.0 {
        v.data_mut().iter_mut().for_each(|z| *z /= norm);
    }
    norm
}

fn start_vector(n: usize, field: Field) -> Matrix {
    let mut rng = rng_from_seed(0x5eed);
    let mut v = Matrix::from_fn(1, n, Field::Complex, |_, _| complex_gaussian(&mut rng));
    if field == Field::Real {
        v = v.real_part();
    }
    normalize(&mut v);
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub estimate: f64,
    pub iterations: usize,
}

/// Largest singular value by power iteration on `WᴴW`.
///
/// Kronecker operators are applied factor by factor and never expanded.
/// Each estimate `||W v||` with unit `v` is a lower bound on the true norm.
pub fn spectral_norm(w: &Recurrent, iters: usize, tol: f64) -> Result<PowerIteration> {
    let n = square_dim(w)?;
    let wh = adjoint(w)?;
    let mut v = start_vector(n, w.field());
    let mut prev = f64::NAN;
    for it in 1..=iters {
        let y = w.apply(&v)?;
        let est = linalg::frobenius_norm_sq(&y).sqrt();
        if est == 0.0 || (est - prev).abs() <= tol * est {
            return Ok(PowerIteration {
                estimate: est,
                iterations: it,
            });
        }
        prev = est;
        v = wh.apply(&y)?;
        normalize(&mut v);
    }
    Err(DiagError::NotConverged {
        iters,
        estimate: prev,
    })
}

/// `||⊗W_f||₂ = Π ||W_f||₂`, with each factor norm from a dense SVD.
pub fn kron_spectral_norm(w: &KroneckerMatrix) -> f64 {
    w.factors().iter().map(|f| singular_values(f)[0]).product()
}

/// Singular values in descending order by one-sided Jacobi rotations.
///
/// Meant for small matrices: used as an oracle and for condition numbers.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    // Orthogonalize rows of A (or of Aᵀ when that has fewer rows); the
    // resulting row norms are the singular values.
    let work = if a.rows() <= a.cols() { a.to_complex() } else { a.transpose().to_complex() };
    let (m, n) = work.shape();
    let mut rows: Vec<Vec<C64>> = (0..m).map(|i| work.row(i).to_vec()).collect();
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..m {
            for j in i + 1..m {
                let alpha: f64 = rows[i].iter().map(|z| z.norm_sqr()).sum();
                let beta: f64 = rows[j].iter().map(|z| z.norm_sqr()).sum();
                let gamma: C64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| x.conj() * y).sum();
                let g = gamma.norm();
                if g <= 1e-15 * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let x = rows[i][k];
                    let y = rows[j][k] * phase.conj();
                    rows[i][k] = x * c - y * s;
                    rows[j][k] = x * s + y * c;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = rows.iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// `σ_max / σ_min` of a square matrix (infinite when singular).
pub fn condition_number(a: &Matrix) -> f64 {
    let sv = singular_values(a);
    let min = *sv.last().unwrap_or(&0.0);
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv[0] / min
    }
}

/// Eigenvalue magnitudes from a dense complex Schur decomposition.
pub fn eigenvalue_magnitudes(a: &Matrix) -> Result<Vec<f64>> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(DiagError::NotSquare { rows, cols });
    }
    let m = DMatrix::from_fn(rows, cols, |i, j| {
        let z = a.get(i, j);
        Complex::new(z.re, z.im)
    });
    let schur = nalgebra::linalg::Schur::try_new(m, 1e-14, 10_000).ok_or(DiagError::NotConverged {
        iters: 10_000,
        estimate: f64::NAN,
    })?;
    let (_, t) = schur.unpack();
    Ok((0..rows).map(|i| t[(i, i)].norm()).collect())
}

/// Dominant eigenvalue magnitude. Exact (dense Schur) up to [`DENSE_LIMIT`];
/// above that, the mean growth rate of `||W^k v||` over the second half of
/// `iters` power steps, which tends to `|λ_max|` for a generic start vector.
pub fn spectral_radius_lower_bound(w: &Recurrent, iters: usize) -> Result<f64> {
    let n = square_dim(w)?;
    if n <= DENSE_LIMIT {
        let dense = dense_of(w)?;
        return Ok(eigenvalue_magnitudes(&dense)?.into_iter().fold(0.0, f64::max));
    }
    let iters = iters.max(2);
    let mut v = start_vector(n, Field::Complex);
    let mut log_growth = 0.0;
    for k in 0..iters {
        v = w.apply(&v)?;
        let g = normalize(&mut v);
        if g == 0.0 {
            return Ok(0.0);
        }
        if k >= iters / 2 {
            log_growth += g.ln();
        }
    }
    Ok((log_growth / (iters - iters / 2) as f64).exp())
}

fn dense_of(w: &Recurrent) -> Result<Matrix> {
    Ok(match w {
        Recurrent::Dense(m) => m.clone(),
        Recurrent::Kron(k) => kron::kron_expand(k)?,
    })
}

/// `||WᴴW − I||_F` of a dense matrix.
pub fn dense_unitarity_residual(w: &Matrix) -> Result<f64> {
    let mut g = linalg::matmul_op(w, Op::H, w, Op::N)?;
    for i in 0..g.rows().min(g.cols()) {
        let d = g.get(i, i);
        g.set(i, i, d - C64::new(1.0, 0.0));
    }
    Ok(linalg::frobenius_norm_sq(&g).sqrt())
}

/// `||WᴴW − I||_F` of a Kronecker product without expanding it.
///
/// With `A_f = W_fᴴW_f = I + E_f`, the deviation of a partial product
/// `A ⊗ A_f − I = E ⊗ I + A ⊗ E_f` is tracked through its trace and squared
/// Frobenius norm only. Every quantity stays small near unitarity, so no
/// cancellation between O(N) terms occurs.
pub fn kron_unitarity_residual(w: &KroneckerMatrix) -> Result<f64> {
    if !w.is_square() {
        return Err(DiagError::NotSquare {
            rows: w.out_dim(),
            cols: w.in_dim(),
        });
    }
    // Running dimension, trace of E and ||E||² for the product so far.
    let (mut n, mut tr, mut sq) = (1.0f64, 0.0f64, 0.0f64);
    for f in w.factors() {
        let mut e = linalg::matmul_op(f, Op::H, f, Op::N)?;
        let nf = e.rows() as f64;
        for i in 0..e.rows() {
            let d = e.get(i, i);
            e.set(i, i, d - C64::new(1.0, 0.0));
        }
        let tr_f: f64 = (0..e.rows()).map(|i| e.get(i, i).re).sum();
        let sq_f = linalg::frobenius_norm_sq(&e);
        // ||A||² = n + 2 tr E + ||E||², <E, A> = tr E + ||E||² (Hermitian E).
        let a_sq = n + 2.0 * tr + sq;
        let e_dot_a = tr + sq;
        let new_sq = sq * nf + a_sq * sq_f + 2.0 * e_dot_a * tr_f;
        let new_tr = n * tr_f + tr * nf + tr * tr_f;
        n *= nf;
        tr = new_tr;
        sq = new_sq;
    }
    Ok(sq.max(0.0).sqrt())
}

/// Unitarity residual of any recurrent operator. Kronecker operators small
/// enough to expand are cross-checked against the dense computation.
pub fn unitarity_residual(w: &Recurrent) -> Result<f64> {
    match w {
        Recurrent::Dense(m) => dense_unitarity_residual(m),
        Recurrent::Kron(k) => {
            let factored = kron_unitarity_residual(k)?;
            if k.out_dim() <= RESIDUAL_CROSS_CHECK_LIMIT {
                let dense = dense_unitarity_residual(&kron::kron_expand(k)?)?;
                let scale = 1.0 + k.out_dim() as f64;
                if (factored - dense).abs() > 1e-9 * scale.max(factored) {
                    return Err(DiagError::ResidualMismatch { factored, dense });
                }
            }
            Ok(factored)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub name: String,
    pub dim: usize,
    pub spectral_norm: f64,
    pub spectral_radius_lower_bound: f64,
    pub unitarity_residual: f64,
    /// `σ_max/σ_min` of the expanded matrix; only computed for small N.
    pub condition_number: Option<f64>,
    pub note: Option<String>,
}

pub const POWER_ITERS: usize = 20_000;
pub const POWER_TOL: f64 = 1e-13;

pub fn spectral_report(name: &str, w: &Recurrent) -> Result<SpectralReport> {
    let dim = square_dim(w)?;
    let norm = match spectral_norm(w, POWER_ITERS, POWER_TOL) {
        Ok(p) => p.estimate,
        Err(DiagError::NotConverged { estimate, .. }) => {
            log::warn!("{name}: power iteration stopped at {estimate}");
            estimate
        }
        Err(e) => return Err(e),
    };
    let norm = match w {
        // The factor-product norm is exact; keep the larger of the two.
        Recurrent::Kron(k) => norm.max(kron_spectral_norm(k)),
        Recurrent::Dense(_) => norm,
    };
    let radius = spectral_radius_lower_bound(w, 200)?.min(norm);
    let (condition_number, note) = if dim <= DENSE_LIMIT {
        (Some(condition_number(&dense_of(w)?)), None)
    } else {
        (None, Some(format!("condition number omitted for N={dim} > {DENSE_LIMIT}")))
    };
    Ok(SpectralReport {
        name: name.to_string(),
        dim,
        spectral_norm: norm,
        spectral_radius_lower_bound: radius,
        unitarity_residual: unitarity_residual(w)?,
        condition_number,
        note,
    })
}

/// One report per recurrent matrix (four for the gated cells).
pub fn model_reports(params: &CellParameters) -> Result<Vec<SpectralReport>> {
    let ops = params.recurrent_ops();
    let names: Vec<String> = if ops.len() == 1 {
        vec!["W".into()]
    } else {
        crate::cells::GATE_NAMES.iter().map(|g| format!("{g}.W")).collect()
    };
    ops.iter().zip(names).map(|(w, name)| spectral_report(&name, w)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub grad_norm: f64,
}

/// `||∂L/∂h_t||₂` for every step of one BPTT pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradientFlowTrace {
    pub entries: Vec<TraceEntry>,
}

impl GradientFlowTrace {
    pub fn norms(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.grad_norm).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn gradient_flow_trace(params: &CellParameters, batch: &TaskBatch, opts: &LossOptions) -> Result<GradientFlowTrace> {
    let out = training::bptt_loss_and_grads(params, batch, None, opts)?;
    Ok(GradientFlowTrace {
        entries: out
            .hidden_grad_norms
            .into_iter()
            .enumerate()
            .map(|(step, grad_norm)| TraceEntry { step, grad_norm })
            .collect(),
    })
}

/// One row of an amplitude sweep. Failed runs keep their λ and an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub residual: f64,
    pub spectral_norm: f64,
    pub valid_metric: f64,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: &str = "lambda,residual,spectral_norm,valid_metric";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.lambda, r.residual, r.spectral_norm, r.valid_metric));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{Activation, CellDims, CellKind, CellSpec};
    use crate::kron::{random_unitary, random_unitary_factors, FactorShape};
    use crate::rng::gaussian;
    use crate::tasks::Targets;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, field: Field, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_fn(rows, cols, field, |_, _| match field {
            Field::Real => C64::new(gaussian(&mut rng), 0.0),
            Field::Complex => complex_gaussian(&mut rng),
        })
    }

    fn random_kron(shapes: &[usize], field: Field, seed: u64) -> KroneckerMatrix {
        let factors = shapes
            .iter()
            .enumerate()
            .map(|(i, &n)| random_matrix(n, n, field, seed * 31 + i as u64))
            .collect();
        KroneckerMatrix::new(factors).unwrap()
    }

    fn nalgebra_singular_values(a: &Matrix) -> Vec<f64> {
        let m = DMatrix::from_fn(a.rows(), a.cols(), |i, j| Complex::new(a.get(i, j).re, a.get(i, j).im));
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    #[test]
    fn jacobi_matches_library_svd() {
        for (r, c, field, seed) in [(5, 5, Field::Real, 1), (7, 4, Field::Complex, 2), (3, 9, Field::Complex, 3), (16, 16, Field::Complex, 4)] {
            let a = random_matrix(r, c, field, seed);
            let ours = singular_values(&a);
            let theirs = nalgebra_singular_values(&a);
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() <= 1e-10 * theirs[0], "{x} vs {y}");
            }
        }
    }

    #[test]
    fn trivial_spectral_norms() {
        let u = Recurrent::Dense(random_unitary(16, Field::Complex, &mut rng_from_seed(1)));
        assert!((spectral_norm(&u, 1000, 1e-12).unwrap().estimate - 1.0).abs() < 1e-8);
        let d = Recurrent::Dense(Matrix::from_real(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap());
        assert!((spectral_norm(&d, 1000, 1e-14).unwrap().estimate - 3.0).abs() < 1e-10);
        let shapes = vec![FactorShape::square(2).unwrap(); 5];
        let k = random_unitary_factors(&shapes, Field::Complex, &mut rng_from_seed(2)).unwrap();
        let r = Recurrent::Kron(k);
        assert!((spectral_norm(&r, 1000, 1e-12).unwrap().estimate - 1.0).abs() < 1e-8);
    }

    #[test]
    fn kron_power_iteration_matches_dense_svd() {
        for (shapes, field, seed) in [
            (vec![2, 2, 2, 2, 2, 2], Field::Complex, 5),
            (vec![4, 4, 4], Field::Real, 6),
            (vec![8, 2, 4], Field::Complex, 7),
            (vec![2; 7], Field::Complex, 8),
        ] {
            let k = random_kron(&shapes, field, seed);
            let oracle = singular_values(&kron::kron_expand(&k).unwrap())[0];
            let power = spectral_norm(&Recurrent::Kron(k.clone()), 100_000, 1e-14).unwrap().estimate;
            assert!((power - oracle).abs() <= 1e-6 * oracle, "{power} vs {oracle}");
            assert!((kron_spectral_norm(&k) - oracle).abs() <= 1e-8 * oracle);
        }
    }

    #[test]
    fn spectral_norm_is_multiplicative() {
        let mut rng = rng_from_seed(9);
        for i in 0..10 {
            let p = rng.random_range(1..5);
            let q = rng.random_range(1..5);
            let a = random_matrix(p, p, Field::Complex, 100 + i);
            let b = random_matrix(q, q, Field::Complex, 200 + i);
            let ab = kron::kron_expand(&KroneckerMatrix::new(vec![a.clone(), b.clone()]).unwrap()).unwrap();
            let lhs = singular_values(&ab)[0];
            let rhs = singular_values(&a)[0] * singular_values(&b)[0];
            assert!((lhs - rhs).abs() <= 1e-8 * rhs);
        }
    }

    #[test]
    fn non_square_and_non_convergence_are_errors() {
        let r = Recurrent::Dense(Matrix::zeros(2, 3, Field::Real));
        assert!(matches!(spectral_norm(&r, 10, 1e-8), Err(DiagError::NotSquare { .. })));
        let a = random_matrix(32, 32, Field::Complex, 10);
        match spectral_norm(&Recurrent::Dense(a), 2, 0.0) {
            Err(DiagError::NotConverged { iters: 2, estimate }) => assert!(estimate > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn residual_examples() {
        let k = KroneckerMatrix::new(vec![Matrix::from_real(1, 1, vec![2.0]).unwrap()]).unwrap();
        assert!((kron_unitarity_residual(&k).unwrap() - 3.0).abs() < 1e-15);
        let shapes = vec![FactorShape::square(2).unwrap(); 6];
        let u = random_unitary_factors(&shapes, Field::Complex, &mut rng_from_seed(3)).unwrap();
        assert!(unitarity_residual(&Recurrent::Kron(u)).unwrap() <= 1e-12);
    }

    #[test]
    fn factorwise_residual_matches_expansion() {
        for (shapes, field, seed) in [
            (vec![2, 2, 2, 2, 2, 2], Field::Complex, 11),
            (vec![4, 4, 4], Field::Real, 12),
            (vec![3, 5], Field::Complex, 13),
            (vec![8, 8], Field::Complex, 14),
        ] {
            let k = random_kron(&shapes, field, seed);
            let dense = dense_unitarity_residual(&kron::kron_expand(&k).unwrap()).unwrap();
            let fact = kron_unitarity_residual(&k).unwrap();
            assert!((dense - fact).abs() <= 1e-10 * dense, "{fact} vs {dense}");
        }
        // Near-unitary factors keep full relative precision.
        let shapes = vec![FactorShape::square(2).unwrap(); 6];
        let mut rng = rng_from_seed(15);
        let mut k = random_unitary_factors(&shapes, Field::Complex, &mut rng).unwrap();
        for f in k.factors_mut() {
            for z in f.data_mut() {
                *z += C64::new(rng.random_range(-1e-7..1e-7), rng.random_range(-1e-7..1e-7));
            }
        }
        let fact = kron_unitarity_residual(&k).unwrap();
        let dense = dense_unitarity_residual(&kron::kron_expand(&k).unwrap()).unwrap();
        assert!((dense - fact).abs() <= 1e-6 * dense, "{fact} vs {dense}");
    }

    #[test]
    fn radius_and_condition_number() {
        let d = Matrix::from_real(2, 2, vec![0.5, 2.0, 0.0, 0.25]).unwrap();
        let mags = eigenvalue_magnitudes(&d).unwrap();
        assert!((mags.iter().fold(0.0f64, |a, &b| a.max(b)) - 0.5).abs() < 1e-12);
        let report = spectral_report("W", &Recurrent::Dense(d.clone())).unwrap();
        assert!(report.spectral_norm >= report.spectral_radius_lower_bound);
        assert!((report.spectral_radius_lower_bound - 0.5).abs() < 1e-12);
        let sv = singular_values(&d);
        assert!((report.condition_number.unwrap() - sv[0] / sv[1]).abs() < 1e-9);
        assert!(report.condition_number.unwrap() >= 1.0);

        let shapes = vec![FactorShape::square(2).unwrap(); 8];
        let u = random_unitary_factors(&shapes, Field::Complex, &mut rng_from_seed(4)).unwrap();
        let big = spectral_report("W", &Recurrent::Kron(u)).unwrap();
        assert!(big.condition_number.is_none() && big.note.is_some());
        assert!((big.spectral_norm - 1.0).abs() < 1e-8);
        assert!(big.spectral_radius_lower_bound <= big.spectral_norm);
        assert!(big.spectral_radius_lower_bound > 0.9);
    }

    fn linear_rnn(w: Matrix, n: usize) -> CellParameters {
        let spec = CellSpec {
            kind: CellKind::Rnn,
            field: w.field(),
            dims: CellDims {
                input: 2,
                hidden: n,
                output: 1,
            },
            factor_shapes: None,
            frozen_recurrent: false,
        };
        let mut p = CellParameters::init(&spec, &mut rng_from_seed(1)).unwrap();
        let cell = p.simple_mut().unwrap();
        cell.activation = Activation::Identity;
        cell.w = Recurrent::Dense(w);
        p
    }

    fn last_step_batch(t: usize, seed: u64) -> TaskBatch {
        crate::tasks::gen_adding_batch(t, 4, seed).unwrap()
    }

    #[test]
    fn gradient_trace_single_step() {
        let n = 6;
        let p = linear_rnn(random_unitary(n, Field::Real, &mut rng_from_seed(2)), n);
        let batch = last_step_batch(2, 3).window(1, 2);
        let trace = gradient_flow_trace(&p, &batch, &LossOptions::default()).unwrap();
        assert_eq!(trace.len(), 1);
        // Oracle: d/dh of mean squared error through y = h Vᵀ + c.
        let state = p.initial_state(4);
        let h = crate::cells::rnn_step(&p, &state.h, &batch.inputs[0]).unwrap();
        let y = crate::cells::output_head(&p, &h).unwrap();
        let Targets::Regression { values } = &batch.targets else { unreachable!() };
        let mut sq = 0.0;
        for b in 0..4 {
            let g = 2.0 * (y.get(b, 0).re - values[b]) / 4.0;
            sq += g * g * (0..n).map(|j| p.v.get(0, j).re.powi(2)).sum::<f64>();
        }
        assert!((trace.entries[0].grad_norm - sq.sqrt()).abs() < 1e-12);
        let json = serde_json::to_string(&trace).unwrap();
        assert!(json.starts_with("[{\"step\":0,"));
    }

    #[test]
    fn gradient_trace_respects_norm_bound() {
        let n = 8;
        let mut a = random_matrix(n, n, Field::Real, 21);
        let s = singular_values(&a)[0];
        a.data_mut().iter_mut().for_each(|z| *z *= 0.5 / s);
        let p = linear_rnn(a, n);
        let trace = gradient_flow_trace(&p, &last_step_batch(20, 4), &LossOptions::default()).unwrap().norms();
        for t in 0..19 {
            assert!(trace[t] <= trace[t + 1] * (0.5 + 1e-6));
        }
        let u = linear_rnn(random_unitary(n, Field::Real, &mut rng_from_seed(5)), n);
        let trace = gradient_flow_trace(&u, &last_step_batch(20, 4), &LossOptions::default()).unwrap().norms();
        for v in &trace {
            assert!((v - trace[19]).abs() <= 1e-8 * trace[19]);
        }
    }

    #[test]
    fn sweep_csv_layout() {
        let rows: Vec<SweepRow> = [1e-6, 1e-1]
            .iter()
            .map(|&lambda| SweepRow {
                lambda,
                residual: 0.5,
                spectral_norm: 1.0,
                valid_metric: 0.1,
                error: None,
            })
            .collect();
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0.000001,0.5,1,0.1");
    }
}
