//! A small dense tensor engine with tape-based reverse-mode autodiff.
//!
//! Only the operators the segmentation network needs are provided. All
//! tensors are row-major; spatial tensors use the `N x C x D x H x W`
//! layout. Graphs are recorded on a [`Tape`]; values and gradients are
//! addressed through copyable [`Var`] handles, so the graph is acyclic by
//! construction (a node can only refer to earlier nodes).
//!
//! The engine is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks run the identical code in `f64`.

mod conv;
pub mod eager;
mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::conv_output_len;

/// Floating-point element type of the engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c <- a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary non-negative strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds ({last} >= {len})");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every element addressed by the strides was bounds
                // checked above; `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Reverses the spatial axes of an `N x C x D x H x W` tensor selected by
    /// `mask` (bit 0 = W, bit 1 = H, bit 2 = D).
    pub fn flip_spatial(&self, mask: u8) -> Result<Self> {
        let [n, c, d, h, w] = spatial5(&self.shape)?;
        if mask & 7 == 0 {
            return Ok(self.clone());
        }
        let (fw, fh, fd) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let mut out = Vec::with_capacity(self.data.len());
        for plane in self.data.chunks_exact(d * h * w).take(n * c) {
            for z in 0..d {
                let sz = if fd { d - 1 - z } else { z };
                for y in 0..h {
                    let sy = if fh { h - 1 - y } else { y };
                    let row = &plane[(sz * h + sy) * w..][..w];
                    if fw {
                        out.extend(row.iter().rev());
                    } else {
                        out.extend_from_slice(row);
                    }
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

pub(crate) fn spatial5(shape: &[usize]) -> Result<[usize; 5]> {
    match shape {
        &[n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(Error::ShapeMismatch(format!(
            "expected N x C x D x H x W, got {shape:?}"
        ))),
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    SoftDice {
        u: Var,
        target: Tensor<T>,
        intersections: Vec<f64>,
        denominators: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    /// true if this node or any ancestor requires a gradient
    tracks: bool,
    op: Op<T>,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are accumulated for it on
    /// [`backward`](Self::backward) when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            tracks: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks);
        // intermediate buffers are only kept when something will need them
        let op = if tracks { op } else { strip(op) };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            tracks,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, accumulating into the gradients
    /// of every `requires_grad` leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape.clone()));
        }
        if !node.tracks {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (tracks, is_leaf, requires_grad) = {
                let node = &self.nodes[id];
                (node.tracks, matches!(node.op, Op::Leaf), node.requires_grad)
            };
            if !tracks {
                continue;
            }
            if is_leaf {
                if requires_grad {
                    let slot = &mut self.nodes[id].grad;
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                continue;
            }
            for (var, contribution) in self.op_backward(id, &g) {
                if !self.nodes[var.0].tracks {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    /// Gradient contributions of node `id` to its inputs.
    fn op_backward(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv3d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = conv::conv3d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    self.tracks(x),
                    self.tracks(w),
                );
                if let Some(gx) = gx {
                    out.push((x, gx));
                }
                if let Some(gw) = gw {
                    out.push((w, gw));
                }
                if let Some(b) = bias {
                    out.push((b, gb));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (gx, gg, gbeta) = ops::instance_norm_backward(
                    self.shape(*x),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    g,
                );
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gbeta));
            }
            &Op::LeakyRelu { x, slope } => {
                let gx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { gi * slope })
                    .collect();
                out.push((x, gx));
            }
            &Op::Upsample2 { x } => out.push((x, ops::upsample2_backward(self.shape(x), g))),
            &Op::Concat { a, b } => {
                let (ga, gb) = ops::split_channels(self.shape(a), self.shape(b), g);
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::SliceChannels { x, start } => {
                out.push((x, ops::slice_channels_backward(self.shape(x), &node.value.shape, start, g)));
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                out.push((a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect()));
                out.push((b, g.iter().zip(va).map(|(&gi, &y)| gi * y).collect()));
            }
            &Op::Scale { x, factor } => out.push((x, g.iter().map(|&gi| gi * factor).collect())),
            &Op::Sum { x } => out.push((x, vec![g[0]; self.value(x).numel()])),
            &Op::Softmax { x } => {
                out.push((x, ops::softmax_backward(&node.value, g)));
            }
            Op::SoftDice {
                u,
                target,
                intersections,
                denominators,
            } => {
                out.push((
                    *u,
                    ops::soft_dice_backward(self.value(*u), target, intersections, denominators, g[0]),
                ));
            }
        }
        out
    }

    // ----- operators -----

    /// 3D cross-correlation. `x`: N x Ci x D x H x W, `w`: Co x Ci x k x k x k,
    /// `bias`: Co.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = conv::conv3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv3d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Per-sample, per-channel normalisation over the spatial axes with a
    /// learnable affine (`gamma`, `beta` of length C).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) =
            ops::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64_lossy(slope);
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Trilinear x2 upsampling (half-pixel centres, clamped borders).
    pub fn upsample_trilinear2(&mut self, x: Var) -> Result<Var> {
        let value = ops::upsample2_forward(self.value(x))?;
        Ok(self.push(value, Op::Upsample2 { x }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_same(self.value(a), self.value(b), |p, q| p + q)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_same(self.value(a), self.value(b), |p, q| p * q)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64_lossy(factor);
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v * factor).collect(),
        };
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(0.0, |acc, v| acc + v.as_f64());
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum { x }, &[x])
    }

    /// Softmax across axis 1 at every spatial position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax_forward(self.value(x))?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Soft dice loss of probabilities `u` (N x K x ...) against the one-hot
    /// `target`, averaged over the batch:
    /// `-(2/K) * sum_k (sum_i u*v) / (sum_i u + sum_i v)`.
    pub fn soft_dice_loss(&mut self, u: Var, target: &Tensor<T>) -> Result<Var> {
        let (loss, intersections, denominators) = ops::soft_dice_forward(self.value(u), target)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SoftDice {
                u,
                target: target.clone(),
                intersections,
                denominators,
            },
            &[u],
        ))
    }
}

fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::InstanceNorm { x, gamma, beta, .. } => Op::InstanceNorm {
            x,
            gamma,
            beta,
            xhat: Vec::new(),
            inv_std: Vec::new(),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests;
