//! Central finite-difference gradient oracle.
//!
//! Kept independent of the graph machinery: it only evaluates a black-box
//! scalar function at perturbed points, so it can vouch for the autodiff path
//! without sharing any code with it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-entry central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite_diff_gradient: h must be > 0, got {h}")));
    }
    let mut out = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle { entry: i });
        }
        out[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest entrywise deviation `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps the ratio meaningful where both gradients are near zero;
/// 1e-2 is small enough to catch a wrong small gradient and large enough to
/// ignore double-precision quadrature noise.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    const FLOOR: f64 = 1e-2;
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap();
        let g = finite_diff_gradient(&mut |t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_gradient(&mut |t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_evaluation_names_entry() {
        // Perturbing entry 0 leaves entry 1 at zero, so 1/x[1] is the first
        // non-finite evaluation.
        let x = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let res = finite_diff_gradient(&mut |t| Ok(1.0 / t.data()[1]), &x, 1e-5);
        match res {
            Err(Error::Oracle { entry }) => assert_eq!(entry, 0),
            other => panic!("expected oracle error, got {other:?}"),
        }
    }

    #[test]
    fn bad_h_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_gradient(&mut |_| Ok(0.0), &x, 0.0).is_err());
    }
}
