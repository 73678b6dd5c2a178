//! 3D convolution via im2col + GEMM.
//!
//! Samples of a batch are processed independently (and in parallel); the
//! weight gradient is reduced over samples in index order, so results do not
//! depend on the number of worker threads. Column matrices are built a few
//! output planes at a time to stay cache-resident.

use rayon::prelude::*;

use super::{spatial5, Scalar, Tensor};
use crate::error::{Error, Result};

/// `floor((len + 2 * pad - k) / stride) + 1`, or `None` if the kernel does
/// not fit.
pub fn conv_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    let [_, cin, d, h, wd] = spatial5(x)?;
    let [cout, wcin, k0, k1, k2] = spatial5(w)?;
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv3d: input has {cin} channels, kernel expects {wcin}"
        )));
    }
    if k0 != k1 || k1 != k2 || k0 % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv3d: kernel must be cubic and odd, got {k0}x{k1}x{k2}"
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch("conv3d: stride must be positive".into()));
    }
    let out = |n| {
        conv_output_len(n, k0, stride, pad)
            .ok_or_else(|| Error::ShapeMismatch(format!("conv3d: kernel {k0} larger than padded axis {n}")))
    };
    Ok(Geometry {
        cin,
        cout,
        k: k0,
        stride,
        pad,
        input: [d, h, wd],
        output: [out(d)?, out(h)?, out(wd)?],
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`, i.e.
/// where `o * stride + kk - pad` lands inside `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o * stride + kk >= pad  and  o * stride + kk < n + pad
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    let hi = if n + pad > kk {
        ((n + pad - kk - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Target size, in elements, of one column buffer chunk.
const CHUNK_ELEMS: usize = 1 << 16;

/// Output z-planes processed per chunk.
fn planes_per_chunk(g: &Geometry) -> usize {
    let plane = g.output[1] * g.output[2];
    (CHUNK_ELEMS / (g.rows() * plane)).max(1)
}

/// Column matrix for output planes `z0..z1`: `rows x ((z1 - z0) * oh * ow)`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, z0: usize, z1: usize, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let p = (z1 - z0) * oh * ow;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * d * h * w..][..d * h * w];
        for kd in 0..k {
            let (zd_lo, zd_hi) = valid_range(d, od, kd, s, pad);
            for kh in 0..k {
                let (yh_lo, yh_hi) = valid_range(h, oh, kh, s, pad);
                for kw in 0..k {
                    let (xw_lo, xw_hi) = valid_range(w, ow, kw, s, pad);
                    let dst = &mut cols[row * p..][..p];
                    row += 1;
                    dst.fill(T::zero());
                    for z in zd_lo.max(z0)..zd_hi.min(z1) {
                        let iz = z * s + kd - pad;
                        for y in yh_lo..yh_hi {
                            let iy = y * s + kh - pad;
                            let src = &plane[(iz * h + iy) * w..][..w];
                            let seg = &mut dst[((z - z0) * oh + y) * ow..][..ow];
                            if s == 1 {
                                let off = xw_lo + kw - pad;
                                seg[xw_lo..xw_hi].copy_from_slice(&src[off..off + (xw_hi - xw_lo)]);
                            } else {
                                for xo in xw_lo..xw_hi {
                                    seg[xo] = src[xo * s + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, z0: usize, z1: usize, dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let p = (z1 - z0) * oh * ow;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * d * h * w..][..d * h * w];
        for kd in 0..k {
            let (zd_lo, zd_hi) = valid_range(d, od, kd, s, pad);
            for kh in 0..k {
                let (yh_lo, yh_hi) = valid_range(h, oh, kh, s, pad);
                for kw in 0..k {
                    let (xw_lo, xw_hi) = valid_range(w, ow, kw, s, pad);
                    let src = &cols[row * p..][..p];
                    row += 1;
                    for z in zd_lo.max(z0)..zd_hi.min(z1) {
                        let iz = z * s + kd - pad;
                        for y in yh_lo..yh_hi {
                            let iy = y * s + kh - pad;
                            let dst = &mut plane[(iz * h + iy) * w..][..w];
                            let seg = &src[((z - z0) * oh + y) * ow..][..ow];
                            for xo in xw_lo..xw_hi {
                                dst[xo * s + kw - pad] += seg[xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(z0, z1)` for consecutive chunks of output planes.
fn for_each_chunk(g: &Geometry, mut f: impl FnMut(usize, usize)) {
    let step = planes_per_chunk(g);
    let od = g.output[0];
    let mut z0 = 0;
    while z0 < od {
        let z1 = (z0 + step).min(od);
        f(z0, z1);
        z0 = z1;
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d: bias shape {:?}, expected [{}]",
                b.shape(),
                g.cout
            )));
        }
    }
    let n = x.shape()[0];
    let (p, rows) = (g.out_len(), g.rows());
    let plane = g.output[1] * g.output[2];
    let in_stride = g.cin * g.in_len();
    let mut out = vec![T::zero(); n * g.cout * p];
    out.par_chunks_mut(g.cout * p)
        .zip(x.data().par_chunks(in_stride))
        .for_each(|(dst, xs)| {
            if g.is_pointwise() {
                T::gemm(g.cout, rows, p, w.data(), (rows, 1), xs, (p, 1), T::zero(), dst, (p, 1));
            } else {
                let mut buf = vec![T::zero(); rows * planes_per_chunk(&g).min(g.output[0]) * plane];
                for_each_chunk(&g, |z0, z1| {
                    let cp = (z1 - z0) * plane;
                    let cols = &mut buf[..rows * cp];
                    im2col(xs, &g, z0, z1, cols);
                    let out = &mut dst[z0 * plane..];
                    T::gemm(g.cout, rows, cp, w.data(), (rows, 1), cols, (cp, 1), T::zero(), out, (p, 1));
                });
            }
            if let Some(b) = bias {
                for (chunk, &bv) in dst.chunks_exact_mut(p).zip(b.data()) {
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    let [od, oh, ow] = g.output;
    Tensor::new(vec![n, g.cout, od, oh, ow], out)
}

/// Returns `(dx, dw, dbias)`; `dx`/`dw` are skipped when not needed.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let g = geometry(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let n = x.shape()[0];
    let (p, rows) = (g.out_len(), g.rows());
    let plane = g.output[1] * g.output[2];
    let in_stride = g.cin * g.in_len();

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = grad_out
        .par_chunks(g.cout * p)
        .zip(x.data().par_chunks(in_stride))
        .map(|(gy, xs)| {
            let mut dw = need_dw.then(|| vec![T::zero(); g.cout * rows]);
            let mut dx = need_dx.then(|| vec![T::zero(); in_stride]);
            if g.is_pointwise() {
                if let Some(dw) = dw.as_mut() {
                    // dW[co, r] = sum_p gy[co, p] * x[r, p]
                    T::gemm(g.cout, p, rows, gy, (p, 1), xs, (1, p), T::zero(), dw, (rows, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(rows, g.cout, p, w.data(), (1, rows), gy, (p, 1), T::zero(), dx, (p, 1));
                }
                return (dx, dw);
            }
            let cap = rows * planes_per_chunk(&g).min(g.output[0]) * plane;
            let mut cols = if need_dw { vec![T::zero(); cap] } else { Vec::new() };
            let mut dcols = if need_dx { vec![T::zero(); cap] } else { Vec::new() };
            let mut first = true;
            for_each_chunk(&g, |z0, z1| {
                let cp = (z1 - z0) * plane;
                let gy_chunk = &gy[z0 * plane..];
                if let Some(dw) = dw.as_mut() {
                    let c = &mut cols[..rows * cp];
                    im2col(xs, &g, z0, z1, c);
                    let beta = if first { T::zero() } else { T::one() };
                    T::gemm(g.cout, cp, rows, gy_chunk, (p, 1), c, (1, cp), beta, dw, (rows, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols[r, q] = sum_co W[co, r] * gy[co, q]
                    let dc = &mut dcols[..rows * cp];
                    T::gemm(rows, g.cout, cp, w.data(), (1, rows), gy_chunk, (p, 1), T::zero(), dc, (cp, 1));
                    col2im(dc, &g, z0, z1, dx);
                }
                first = false;
            });
            (dx, dw)
        })
        .collect();

    let mut db = vec![T::zero(); g.cout];
    for gy in grad_out.chunks_exact(g.cout * p) {
        for (acc, chunk) in db.iter_mut().zip(gy.chunks_exact(p)) {
            *acc += T::from_f64_lossy(chunk.iter().fold(0.0, |s, v| s + v.as_f64()));
        }
    }

    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * in_stride));
    let mut dw_all: Option<Vec<T>> = None;
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let Some(dw) = dw {
            match dw_all.as_mut() {
                Some(acc) => acc.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b),
                None => dw_all = Some(dw),
            }
        }
    }
    (dx_all, dw_all, db)
}
