//! Central finite-difference gradients, used as the independent oracle for
//! every backward implementation. Only forward evaluations are involved, so
//! the result does not depend on any backward-pass code.

use super::{Scalar, Tensor};

/// Central-difference gradient of `f` with respect to every element of every
/// input, evaluated at `inputs`. `f` must be a pure function of the inputs.
pub fn gradients<E: Scalar>(
    mut f: impl FnMut(&[Tensor<E>]) -> f64,
    inputs: &[Tensor<E>],
    step: f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let n = inputs[which].numel();
        let mut g = vec![0.0; n];
        for idx in 0..n {
            let mut plus: Vec<Tensor<E>> = inputs.to_vec();
            plus[which].data_mut()[idx] += E::from_f64(step);
            let fp = f(&plus);
            let mut minus: Vec<Tensor<E>> = inputs.to_vec();
            minus[which].data_mut()[idx] -= E::from_f64(step);
            let fm = f(&minus);
            g[idx] = (fp - fm) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise relative error between an analytic gradient and its
/// finite-difference counterpart.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
