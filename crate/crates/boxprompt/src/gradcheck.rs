//! Finite-difference gradient checking used by the loss and backbone tests.
//!
//! Central differences: `df/dx_i ≈ (f(x + h e_i) - f(x - h e_i)) / 2h`.
//! With f64 arithmetic and `h` around 1e-5..1e-6 the truncation and rounding
//! errors both sit far below the 1e-4 relative tolerance the test suites
//! demand, provided the function is smooth in an `h`-neighbourhood (inputs
//! must stay away from clamp boundaries and penalty junctions).

use ndarray::Array2;

/// Numerically differentiate `f` at `x`, perturbing one element at a time.
pub fn central_diff_grad(
    mut f: impl FnMut(&Array2<f64>) -> f64,
    x: &Array2<f64>,
    h: f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut work = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = work[idx];
        work[idx] = orig + h;
        let plus = f(&work);
        work[idx] = orig - h;
        let minus = f(&work);
        work[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between two scalars, with an absolute floor so that
/// near-zero values compare absolutely instead of blowing up.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Largest per-element [`relative_error`] between two gradients.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recovers_the_gradient_of_a_quadratic() {
        // f(x) = sum(x^2) has gradient 2x.
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let num = central_diff_grad(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        let ana = x.mapv(|v| 2.0 * v);
        assert!(max_relative_error(&ana, &num, 1e-9) < 1e-8);
    }

    #[test]
    fn relative_error_uses_the_floor_near_zero() {
        let a = array![[0.0]];
        let n = array![[1e-9]];
        // Without the floor this would be a 100% relative error.
        assert!(max_relative_error(&a, &n, 1e-6) < 1e-2);
    }
}
