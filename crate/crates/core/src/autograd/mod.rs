//! Dense tensors with tape-based reverse-mode differentiation.

mod gemm;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Gradients, Mode, Reduction, Tape, Var, BCE_EPS};
pub use tensor::{Element, Tensor};

use crate::error::Result;

/// `d loss / d input`. Zero when the loss does not depend on `input`.
pub fn grad_wrt_input<T: Element>(tape: &Tape<T>, loss: Var, input: Var) -> Result<Tensor<T>> {
    let mut grads = tape.backward(loss)?;
    Ok(grads
        .take(input)
        .unwrap_or_else(|| Tensor::zeros(tape.value(input).shape())))
}

/// `d loss / d p` for every parameter leaf in `params`, in order.
pub fn grad_wrt_params<T: Element>(
    tape: &Tape<T>,
    loss: Var,
    params: &[Var],
) -> Result<Vec<Tensor<T>>> {
    let mut grads = tape.backward(loss)?;
    Ok(params
        .iter()
        .map(|&p| {
            grads
                .take(p)
                .unwrap_or_else(|| Tensor::zeros(tape.value(p).shape()))
        })
        .collect())
}

#[cfg(test)]
mod tests;
