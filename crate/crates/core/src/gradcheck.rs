//! Central finite differences for checking analytic gradients.
//!
//! Gradients of complex entries follow the split-real convention used
//! throughout the crate: `∂L/∂Re z + i·∂L/∂Im z`.

use crate::linalg::{Field, C64};

/// Central-difference gradient of `loss` with respect to every entry that
/// `select` exposes. Imaginary parts are only perturbed for complex fields.
pub fn numeric_grad<P>(
    params: &mut P,
    select: impl Fn(&mut P) -> &mut [C64],
    field: Field,
    eps: f64,
    loss: impl Fn(&P) -> f64,
) -> Vec<C64> {
    let len = select(params).len();
    let mut out = vec![C64::new(0.0, 0.0); len];
    for (i, slot) in out.iter_mut().enumerate() {
        slot.re = central(params, &select, &loss, i, eps, false);
        if field == Field::Complex {
            slot.im = central(params, &select, &loss, i, eps, true);
        }
    }
    out
}

fn central<P>(
    params: &mut P,
    select: &impl Fn(&mut P) -> &mut [C64],
    loss: &impl Fn(&P) -> f64,
    index: usize,
    eps: f64,
    imag: bool,
) -> f64 {
    let nudge = |params: &mut P, delta: f64| {
        let z = &mut select(params)[index];
        if imag {
            z.im += delta;
        } else {
            z.re += delta;
        }
    };
    let original = select(params)[index];
    nudge(params, eps);
    let plus = loss(params);
    select(params)[index] = original;
    nudge(params, -eps);
    let minus = loss(params);
    select(params)[index] = original;
    (plus - minus) / (2.0 * eps)
}

/// Largest per-entry relative error between analytic and numeric gradients.
///
/// Each entry is measured against `max(|a|, |n|, 1e-3·max_j |n_j|, 1e-8)`, so
/// entries that are tiny next to the gradient's overall scale are judged
/// against that scale instead of against finite-difference noise.
pub fn max_rel_error(analytic: &[C64], numeric: &[C64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = numeric.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).norm() / a.norm().max(n.norm()).max(floor))
        .fold(0.0, f64::max)
}

/// Normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over one tensor.
///
/// Unlike [`max_rel_error`] this is not dominated by entries whose size is
/// below the finite-difference rounding level `ulp(L)/ε`.
pub fn norm_rel_error(analytic: &[C64], numeric: &[C64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).norm_sqr()).sum();
    let na: f64 = analytic.iter().map(|a| a.norm_sqr()).sum();
    let nn: f64 = numeric.iter().map(|n| n.norm_sqr()).sum();
    let den = na.max(nn);
    if den == 0.0 {
        return diff.sqrt();
    }
    (diff / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut v = vec![C64::new(3.0, 1.0), C64::new(-2.0, 0.5)];
        // L = Σ |z|² ⇒ split-real gradient 2z.
        let g = numeric_grad(
            &mut v,
            |v| v.as_mut_slice(),
            Field::Complex,
            1e-5,
            |v| v.iter().map(|z| z.norm_sqr()).sum(),
        );
        let want: Vec<C64> = v.iter().map(|z| z * 2.0).collect();
        assert!(max_rel_error(&want, &g) < 1e-9);
    }

    #[test]
    fn real_field_leaves_imaginary_zero() {
        let mut v = vec![C64::new(2.0, 0.0)];
        let g = numeric_grad(&mut v, |v| v.as_mut_slice(), Field::Real, 1e-5, |v| v[0].re.powi(3));
        assert!((g[0].re - 12.0).abs() < 1e-8);
        assert_eq!(g[0].im, 0.0);
        assert_eq!(v[0], C64::new(2.0, 0.0));
    }

    #[test]
    fn normwise_error() {
        let a = [C64::new(3.0, 0.0), C64::new(0.0, 4.0)];
        assert_eq!(norm_rel_error(&a, &a), 0.0);
        let n = [C64::new(3.0, 0.0), C64::new(0.0, 4.5)];
        assert!((norm_rel_error(&a, &n) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
        assert_eq!(norm_rel_error(&[C64::new(0.0, 0.0)], &[C64::new(0.0, 0.0)]), 0.0);
        // One noisy tiny entry does not dominate.
        let a = [C64::new(1.0, 0.0), C64::new(1e-12, 0.0)];
        let n = [C64::new(1.0, 0.0), C64::new(2e-12, 0.0)];
        assert!(norm_rel_error(&a, &n) < 1e-11);
        assert!(max_rel_error(&a, &n) > 1e-10);
    }
}
