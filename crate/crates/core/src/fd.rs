//! Central finite differences, the gradient-check oracle.

use crate::error::{Error, Result};

/// Central-difference gradient of `loss` at `params` with step `h`.
///
/// Each coordinate is evaluated as `(loss(p + h e_j) - loss(p - h e_j)) / 2h`.
/// A non-finite loss evaluation aborts with the offending coordinate.
pub fn finite_diff<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        let orig = p[j];
        p[j] = orig + h;
        let plus = loss(&p);
        p[j] = orig - h;
        let minus = loss(&p);
        p[j] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(Error::Oracle {
                    coordinate: j,
                    value: v,
                });
            }
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst per-coordinate relative error between an analytic and a numeric
/// gradient, together with the coordinate where it occurs.
///
/// The denominator is `max(|a|, |n|, floor)` where `floor` is
/// `floor_frac * max_j |n_j|` (and at least `1e-300`), so coordinates whose
/// true gradient is essentially zero are compared on the scale of the whole
/// vector instead of their own round-off.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor_frac: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor_frac * scale).max(1e-300);
    let mut worst = (0.0, 0);
    for (j, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > worst.0 || err.is_nan() {
            worst = (err, j);
        }
    }
    worst
}

/// Default floor fraction used by the gradient-check suites.
pub const REL_FLOOR: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_gives_zero() {
        let g = finite_diff(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn polynomial_error_is_second_order() {
        // f = x^3, f' = 3x^2, central error = h^2 (exactly, for a cubic)
        let x = 1.7;
        for h in [1e-2, 1e-3] {
            let g = finite_diff(|p| p[0].powi(3), &[x], h).unwrap();
            let err = (g[0] - 3.0 * x * x).abs();
            assert!((err - h * h).abs() < 1e-9, "h = {h}: err {err}");
        }
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let err = finite_diff(|p| if p[1] > 1.0 { f64::NAN } else { p[0] }, &[0.0, 1.0], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::Oracle { coordinate: 1, .. }));
    }

    #[test]
    fn rel_error_uses_vector_scale_floor() {
        let (e, _) = max_rel_error(&[1.0, 1e-12], &[1.0, 0.0], 1e-3);
        assert!(e < 1e-8);
        let (e, j) = max_rel_error(&[1.0, 2.0], &[1.0, 2.02], 1e-3);
        assert_eq!(j, 1);
        assert!((e - 0.02 / 2.02).abs() < 1e-12);
    }
}
