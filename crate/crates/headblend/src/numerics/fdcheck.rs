//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: it only evaluates a black-box scalar function at
//! perturbed points. Tests use it to cross-check every analytic gradient.

use super::real::Real;
use super::tape::NumericsError;

/// Central-difference gradient estimate `(f(x+h·e_i) − f(x−h·e_i)) / 2h`
/// per element. Rejects non-positive `h` and non-finite probe values.
pub fn finite_difference_gradient<R, F>(
    mut f: F,
    x: &[R],
    h: f64,
) -> Result<Vec<R>, NumericsError>
where
    R: Real,
    F: FnMut(&[R]) -> R,
{
    if h.is_nan() || h <= 0.0 {
        return Err(NumericsError::BadStep { h });
    }
    let step = R::from_f64(h);
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFiniteProbe);
        }
        grad.push((plus - minus) / (step + step));
    }
    Ok(grad)
}

/// Largest relative error between two gradient vectors, with a unit floor so
/// near-zero components compare absolutely.
pub fn max_rel_err<R: Real>(a: &[R], b: &[R]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = finite_difference_gradient(|v: &[f64]| v[0] * v[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_sum_is_constant() {
        use crate::numerics::tape::{Tape, TensorData};
        let x = vec![0.3, -1.2, 2.0, 0.7];
        let g = finite_difference_gradient(
            |v: &[f64]| {
                let mut t = Tape::new();
                let a = t.leaf(TensorData::new(vec![v.len()], v.to_vec()).unwrap());
                let s = t.softmax_last(a).unwrap();
                let total = t.sum(s);
                t.scalar(total)
            },
            &x,
            1e-5,
        )
        .unwrap();
        for v in g {
            assert!(v.abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_difference_gradient(|v: &[f64]| v[0], &[1.0], 0.0).is_err());
        assert!(finite_difference_gradient(|v: &[f64]| v[0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn rejects_non_finite_probe() {
        let r = finite_difference_gradient(|v: &[f64]| v[0].ln(), &[0.0], 1e-5);
        assert!(r.is_err());
    }
}
