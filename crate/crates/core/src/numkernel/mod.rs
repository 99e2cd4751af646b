//! Dense tensors, a gradient tape, and the eager kernels both share.

mod kernels;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradReport};
pub use tape::{Gradients, Mask, Tape, Var, GATHER_ZERO};
pub use tensor::Tensor;


use crate::error::{Error, Result};

/// Eager matrix product without a tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone())?;
    let bv = tape.constant(b.clone())?;
    let c = tape.matmul(av, bv)?;
    Ok(tape.value(c).clone())
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(Error::Range(format!(
            "softmax axis {axis} invalid for shape {:?}",
            x.shape()
        )));
    }
    let data = kernels::softmax_axis(x.data(), x.shape(), axis);
    Tensor::new(x.shape().to_vec(), data)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let cols = x.cols();
    if gain.numel() != cols || bias.numel() != cols {
        return Err(Error::Dimension(format!(
            "layer_norm: last dimension {cols} vs gain {:?} / bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let out = kernels::layer_norm(x.data(), cols, gain.data(), bias.data(), eps);
    Tensor::new(x.shape().to_vec(), out.y)
}

/// Stride-1, unpadded sum over every `w x w` window of a matrix.
pub fn window_sum_2d(grid: &Tensor, w: usize) -> Result<Tensor> {
    if grid.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "window_sum_2d expects a matrix, got {:?}",
            grid.shape()
        )));
    }
    let (h, wd) = (grid.shape()[0], grid.shape()[1]);
    if w == 0 || w > h.min(wd) {
        return Err(Error::Range(format!(
            "window size {w} must lie in 1..={}",
            h.min(wd)
        )));
    }
    let data = kernels::window_sum_2d(grid.data(), h, wd, w);
    Tensor::new(vec![h - w + 1, wd - w + 1], data)
}

#[cfg(test)]
mod tests;
