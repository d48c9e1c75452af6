//! Central finite differences, used by tests to check analytic gradients.

use alloc::vec::Vec;

use crate::tensor::Matrix;

/// Numerical gradient of `f` at `x` by central differences with step `eps`.
pub fn numerical_gradient(x: &Matrix, eps: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Matrix::from_vec(x.rows(), x.cols(), out)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference norm when both
/// gradients vanish.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let denom = libm::sqrt(analytic.norm_sq()).max(libm::sqrt(numeric.norm_sq()));
    if denom < 1e-12 {
        libm::sqrt(diff)
    } else {
        libm::sqrt(diff) / denom
    }
}
