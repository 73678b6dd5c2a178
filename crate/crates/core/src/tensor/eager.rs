//! Tape-free evaluation of the forward kernels.
//!
//! Results are bit-identical to the corresponding [`Tape`](super::Tape)
//! operators, but nothing is recorded, so intermediates are freed as soon as
//! the caller drops them.

use super::{conv, ops, Scalar, Tensor};
use crate::error::Result;

pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    conv::conv3d_forward(x, w, bias, stride, pad)
}

pub fn instance_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(ops::instance_norm_forward(x, gamma, beta, eps)?.0)
}

pub fn leaky_relu_inplace<T: Scalar>(x: &mut Tensor<T>, slope: f64) {
    let slope = T::from_f64_lossy(slope);
    for v in x.data_mut() {
        if *v <= T::zero() {
            *v *= slope;
        }
    }
}

pub fn upsample_trilinear2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ops::upsample2_forward(x)
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ops::concat_channels(a, b)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ops::zip_same(a, b, |p, q| p + q)
}

pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ops::softmax_forward(x)
}
