//! Central-difference gradient oracle.
//!
//! Lives beside the tape but never calls into it: gradient checks compare
//! tape output against this independent estimate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate of d f / d p, one coordinate at a time:
/// (f(p+δ) − f(p−δ)) / 2δ.
pub fn finite_difference_gradient(
    f: impl Fn(&Tensor) -> f64,
    p: &Tensor,
    step: f64,
) -> Result<Tensor> {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let mut plus = p.data().to_vec();
        let mut minus = p.data().to_vec();
        plus[i] += step;
        minus[i] -= step;
        let fp = f(&Tensor::new(p.shape().to_vec(), plus));
        let fm = f(&Tensor::new(p.shape().to_vec(), minus));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient"));
        }
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(Tensor::new(p.shape().to_vec(), grad))
}

/// Largest relative error between an analytic gradient and the central
/// difference, with an absolute floor so near-zero entries do not explode
/// the ratio.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_difference() {
        let p = Tensor::new(vec![1], vec![3.0]);
        let g = finite_difference_gradient(|t| t.data()[0] * t.data()[0], &p, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        for step in [1e-4, 1e-2, 0.5] {
            let g = finite_difference_gradient(
                |t| 2.0 * t.data()[0] - 3.0 * t.data()[1] + 7.0 * t.data()[2],
                &p,
                step,
            )
            .unwrap();
            assert!((g.data()[0] - 2.0).abs() < 1e-9);
            assert!((g.data()[1] + 3.0).abs() < 1e-9);
            assert!((g.data()[2] - 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let p = Tensor::new(vec![1], vec![0.0]);
        let r = finite_difference_gradient(|t| 1.0 / t.data()[0].abs().ln(), &p, 1e-5);
        assert!(r.is_err() || r.unwrap().data()[0].is_finite());
        let r2 = finite_difference_gradient(|_| f64::NAN, &p, 1e-5);
        assert!(r2.is_err());
    }
}
