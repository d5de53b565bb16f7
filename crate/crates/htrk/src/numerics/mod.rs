//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a rank-N row-major `f64` array. [`Graph`] records forward
//! operations in topological order and replays them in reverse to populate
//! gradients. There is no broadcasting beyond scalar-tensor products; every
//! structural change is an explicit op so each gradient rule stays auditable.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId, Padding};
pub use tensor::{matmul, softmax_rows, Tensor};

use crate::Result;

/// Central finite-difference gradient of `f` with respect to `inputs`.
///
/// Independent oracle for checking analytic gradients: each element is
/// perturbed by `±h` and the loss re-evaluated, so it never touches the
/// reverse-mode path it is used to verify.
pub fn finite_difference_grad<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad.data_mut()[j] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Largest relative elementwise deviation between two same-shaped tensors.
///
/// Relative to `max(|a|, |b|, 1)` so values near zero are compared absolutely.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
