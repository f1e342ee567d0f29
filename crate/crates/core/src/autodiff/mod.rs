//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`]; `Tape::backward` pushes gradients back into the store for
//! the parameters flagged trainable and leaves frozen ones untouched.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_FLOOR};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{GateAxis, Tape, Var};

pub(crate) use tape::softmax_in_place;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// Row-wise softmax of a `[N, C]` matrix.
pub fn softmax_rows(logits: &crate::tensor::Tensor) -> crate::tensor::Tensor {
    let c = *logits.shape().last().expect("softmax of a scalar");
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

#[cfg(test)]
mod tests;
