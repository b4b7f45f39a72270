use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient of [`relu`] given its forward output; the subgradient at 0 is 0.
pub fn relu_backward<T: Element>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != output.shape() {
        return Err(Error::dim(format!(
            "relu grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }
    grad_out.zip_map(output, |g, y| if y > T::zero() { g } else { T::zero() })
}
