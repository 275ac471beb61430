//! Central finite-difference oracle for checking tape gradients.
//!
//! Only forward evaluations of `f` are used, never the reverse sweep.

use super::Tensor;

/// Default step for `f64` checks.
pub const STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `∂f/∂inputs` by central differences `(f(x+h) − f(x−h)) / 2h`.
pub fn numeric_gradients(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work);
            work[t].data_mut()[i] = orig - h;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Largest element-wise `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape());
            a.data().iter().zip(n.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        })
        .fold(0.0, f64::max)
}
