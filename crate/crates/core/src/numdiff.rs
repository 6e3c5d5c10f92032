//! Central finite differences used by the derivative self-tests.

use nalgebra::DMatrix;

const REL_STEP: f64 = 1e-5;

fn step_for(x: f64) -> f64 {
    REL_STEP * x.abs().max(1.0)
}

/// Jacobian of `f` at `at` by central differences; rows index outputs.
pub fn jacobian<F>(f: F, at: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let base = f(at);
    let mut jac = DMatrix::zeros(base.len(), at.len());
    let mut probe = at.to_vec();
    for j in 0..at.len() {
        let h = step_for(at[j]);
        probe[j] = at[j] + h;
        let plus = f(&probe);
        probe[j] = at[j] - h;
        let minus = f(&probe);
        probe[j] = at[j];
        for i in 0..base.len() {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

/// Gradient of a scalar function by central differences.
pub fn gradient<F>(f: F, at: &[f64]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let jac = jacobian(|x| vec![f(x)], at);
    jac.row(0).iter().copied().collect()
}

/// `max|a - b| / max(1, max|b|)`: relative to the reference magnitude, with
/// a unit floor so identically-zero derivatives are compared absolutely.
pub fn mixed_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}
