//! Forward and backward kernels for the non-convolution operators.

use super::{spatial5, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn zip_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "elementwise op on {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `(N, C, spatial)` view of an `N x C x ...` tensor.
fn ncs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!("need N x C x ..., got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

// ----- instance norm -----

pub(crate) type NormParts<T> = (Tensor<T>, Vec<T>, Vec<T>);

pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<NormParts<T>> {
    let (n, c, s) = ncs(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "instance_norm: {c} channels but gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("instance_norm eps must be > 0, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(n * c);
    for (idx, group) in x.data().chunks_exact(s.max(1)).take(n * c).enumerate() {
        let ch = idx % c;
        let mean = group.iter().fold(0.0, |acc, v| acc + v.as_f64()) / s as f64;
        let var = group
            .iter()
            .fold(0.0, |acc, v| acc + (v.as_f64() - mean).powi(2))
            / s as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let mean_t = T::from_f64_lossy(mean);
        let istd_t = T::from_f64_lossy(istd);
        inv_std.push(istd_t);
        for &v in group {
            let h = (v - mean_t) * istd_t;
            xhat.push(h);
            out.push(g * h + b);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std))
}

pub(crate) fn instance_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = ncs(shape).expect("validated in forward");
    let mut dx = Vec::with_capacity(g.len());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for idx in 0..n * c {
        let ch = idx % c;
        let gs = &g[idx * s..][..s];
        let hs = &xhat[idx * s..][..s];
        let (mut sum_g, mut sum_gh) = (0.0f64, 0.0f64);
        for (&gi, &hi) in gs.iter().zip(hs) {
            sum_g += gi.as_f64();
            sum_gh += (gi * hi).as_f64();
        }
        dgamma[ch] += sum_gh;
        dbeta[ch] += sum_g;
        // with dxhat = gamma * g:
        // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let gm = gamma[ch];
        let scale = gm * inv_std[idx];
        let m1 = T::from_f64_lossy(sum_g / s as f64);
        let m2 = T::from_f64_lossy(sum_gh / s as f64);
        for (&gi, &hi) in gs.iter().zip(hs) {
            dx.push(scale * (gi - m1 - hi * m2));
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect();
    (dx, cast(dgamma), cast(dbeta))
}

// ----- trilinear x2 upsampling -----

/// Linear interpolation taps `(i0, i1, w1)` for doubling an axis of length
/// `n` with half-pixel centres: output `o` samples input coordinate
/// `(o + 0.5) / 2 - 0.5`, clamped to `[0, n - 1]`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resamples axis `axis` of a row-major array with `taps`.
fn resize_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize, taps: &[(usize, usize, f64)]) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out = vec![T::zero(); outer * taps.len() * inner];
    let ws: Vec<(T, T)> = taps
        .iter()
        .map(|&(_, _, w)| (T::from_f64_lossy(1.0 - w), T::from_f64_lossy(w)))
        .collect();
    for o in 0..outer {
        let src = &data[o * len * inner..][..len * inner];
        let dst = &mut out[o * taps.len() * inner..][..taps.len() * inner];
        for (t, (&(i0, i1, _), &(w0, w1))) in taps.iter().zip(&ws).enumerate() {
            let a = &src[i0 * inner..][..inner];
            let b = &src[i1 * inner..][..inner];
            for ((d, &p), &q) in dst[t * inner..][..inner].iter_mut().zip(a).zip(b) {
                *d = w0 * p + w1 * q;
            }
        }
    }
    out
}

/// Adjoint of [`resize_axis`]; `shape` is the *input* shape.
fn resize_axis_adjoint<T: Scalar>(g: &[T], shape: &[usize], axis: usize, taps: &[(usize, usize, f64)]) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out = vec![T::zero(); outer * len * inner];
    let ws: Vec<(T, T)> = taps
        .iter()
        .map(|&(_, _, w)| (T::from_f64_lossy(1.0 - w), T::from_f64_lossy(w)))
        .collect();
    for o in 0..outer {
        let src = &g[o * taps.len() * inner..][..taps.len() * inner];
        let dst = &mut out[o * len * inner..][..len * inner];
        for (t, (&(i0, i1, _), &(w0, w1))) in taps.iter().zip(&ws).enumerate() {
            let gs = &src[t * inner..][..inner];
            for (k, &gv) in gs.iter().enumerate() {
                dst[i0 * inner + k] += w0 * gv;
                dst[i1 * inner + k] += w1 * gv;
            }
        }
    }
    out
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = spatial5(x.shape())?;
    let mut shape = vec![n, c, d, h, w];
    let mut data = x.data().to_vec();
    for axis in [4, 3, 2] {
        let taps = upsample_taps(shape[axis]);
        data = resize_axis(&data, &shape, axis, &taps);
        shape[axis] *= 2;
    }
    Tensor::new(shape, data)
}

pub(crate) fn upsample2_backward<T: Scalar>(in_shape: &[usize], g: &[T]) -> Vec<T> {
    let mut shapes = Vec::new();
    let mut shape = in_shape.to_vec();
    for axis in [4, 3, 2] {
        shapes.push((shape.clone(), axis));
        shape[axis] *= 2;
    }
    let mut grad = g.to_vec();
    for (shape, axis) in shapes.into_iter().rev() {
        let taps = upsample_taps(shape[axis]);
        grad = resize_axis_adjoint(&grad, &shape, axis, &taps);
    }
    grad
}

// ----- channel concat / slice -----

pub(crate) fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, sa) = ncs(a.shape())?;
    let (nb, cb, sb) = ncs(b.shape())?;
    if na != nb || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..na {
        data.extend_from_slice(&a.data()[i * ca * sa..][..ca * sa]);
        data.extend_from_slice(&b.data()[i * cb * sb..][..cb * sb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, data)
}

pub(crate) fn split_channels<T: Scalar>(a: &[usize], b: &[usize], g: &[T]) -> (Vec<T>, Vec<T>) {
    let (n, ca, s) = ncs(a).expect("validated");
    let cb = b[1];
    let mut ga = Vec::with_capacity(n * ca * s);
    let mut gb = Vec::with_capacity(n * cb * s);
    for chunk in g.chunks_exact((ca + cb) * s) {
        ga.extend_from_slice(&chunk[..ca * s]);
        gb.extend_from_slice(&chunk[ca * s..]);
    }
    (ga, gb)
}

pub(crate) fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, s) = ncs(x.shape())?;
    if start + len > c || len == 0 {
        return Err(Error::ShapeMismatch(format!(
            "slice_channels {start}..{} of {c} channels",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(n * len * s);
    for chunk in x.data().chunks_exact(c * s) {
        data.extend_from_slice(&chunk[start * s..(start + len) * s]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Tensor::new(shape, data)
}

pub(crate) fn slice_channels_backward<T: Scalar>(in_shape: &[usize], out_shape: &[usize], start: usize, g: &[T]) -> Vec<T> {
    let (n, c, s) = ncs(in_shape).expect("validated");
    let len = out_shape[1];
    let mut out = vec![T::zero(); n * c * s];
    for (i, chunk) in g.chunks_exact(len * s).enumerate() {
        out[i * c * s + start * s..][..len * s].copy_from_slice(chunk);
    }
    out
}

// ----- softmax over channels -----

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s) = ncs(x.shape())?;
    if c == 0 {
        return Err(Error::ShapeMismatch("softmax over zero channels".into()));
    }
    let mut out = vec![T::zero(); x.numel()];
    for i in 0..n {
        let xs = &x.data()[i * c * s..][..c * s];
        let ys = &mut out[i * c * s..][..c * s];
        for v in 0..s {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xs[ch * s + v]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xs[ch * s + v] - m).exp();
                ys[ch * s + v] = e;
                total += e;
            }
            for ch in 0..c {
                ys[ch * s + v] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let (n, c, s) = ncs(y.shape()).expect("validated");
    let mut out = vec![T::zero(); y.numel()];
    for i in 0..n {
        let base = i * c * s;
        for v in 0..s {
            let mut dot = T::zero();
            for ch in 0..c {
                let k = base + ch * s + v;
                dot += y.data()[k] * g[k];
            }
            for ch in 0..c {
                let k = base + ch * s + v;
                out[k] = y.data()[k] * (g[k] - dot);
            }
        }
    }
    out
}

// ----- soft dice -----

pub(crate) fn soft_dice_forward<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "soft dice: prediction {:?} vs reference {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let (n, k, s) = ncs(u.shape())?;
    let mut inter = Vec::with_capacity(n * k);
    let mut denom = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (uc, vc) in u.data().chunks_exact(s).zip(v.data().chunks_exact(s)).take(n * k) {
        let (mut i, mut su, mut sv) = (0.0, 0.0, 0.0);
        for (&a, &b) in uc.iter().zip(vc) {
            let (a, b) = (a.as_f64(), b.as_f64());
            i += a * b;
            su += a;
            sv += b;
        }
        let d = su + sv;
        if d > 0.0 {
            loss += i / d;
        }
        inter.push(i);
        denom.push(d);
    }
    let loss = -(2.0 / k as f64) * loss / n as f64;
    Ok((loss, inter, denom))
}

pub(crate) fn soft_dice_backward<T: Scalar>(
    u: &Tensor<T>,
    v: &Tensor<T>,
    inter: &[f64],
    denom: &[f64],
    g: T,
) -> Vec<T> {
    let (n, k, s) = ncs(u.shape()).expect("validated");
    let coef = g.as_f64() * -(2.0 / k as f64) / n as f64;
    let mut out = Vec::with_capacity(u.numel());
    for (idx, vc) in v.data().chunks_exact(s).take(n * k).enumerate() {
        let (i, d) = (inter[idx], denom[idx]);
        if d > 0.0 {
            // d/du (I/S) = (v*S - I) / S^2
            let inv = coef / (d * d);
            out.extend(vc.iter().map(|&b| T::from_f64_lossy(inv * (b.as_f64() * d - i))));
        } else {
            out.extend(std::iter::repeat_n(T::zero(), s));
        }
    }
    out
}
