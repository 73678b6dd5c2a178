//! Stochastic training augmentation.
//!
//! Every random choice for a sample is drawn up front into an
//! [`AugmentPlan`] from a stream seeded by [`sample_seed`], so the output is a
//! pure function of the input patch, the config and the seed. Stages run in a
//! fixed order: mirror, spatial, gamma, noise, blur, renormalise.
//!
//! Patches are stored x-fastest like [`Volume`](crate::Volume) data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};

/// An image patch with its reference mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub dims: [usize; 3],
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Patch {
    pub fn new(dims: [usize; 3], image: Vec<f32>, mask: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || image.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "patch {dims:?} with {} image and {} mask values",
                image.len(),
                mask.len()
            )));
        }
        Ok(Patch { dims, image, mask })
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_mirror: f64,
    pub p_spatial: f64,
    pub scale_range: (f64, f64),
    /// Draw one factor for all axes instead of one per axis.
    pub isotropic_scale: bool,
    pub rot_range_deg: (f64, f64),
    pub elastic_sigma: (f64, f64),
    pub elastic_alpha: (f64, f64),
    pub p_gamma: f64,
    pub gamma_range: (f64, f64),
    pub p_noise: f64,
    pub noise_sigma: f64,
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_mirror: 0.5,
            p_spatial: 0.5,
            scale_range: (0.75, 1.25),
            isotropic_scale: true,
            rot_range_deg: (-180.0, 180.0),
            elastic_sigma: (9.0, 13.0),
            elastic_alpha: (0.0, 900.0),
            p_gamma: 0.5,
            gamma_range: (0.8, 1.5),
            p_noise: 0.3,
            noise_sigma: 0.2,
            p_blur: 0.3,
            blur_sigma: (0.2, 1.5),
        }
    }
}

impl AugmentConfig {
    /// Every stage gated off; only renormalisation remains.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_mirror: 0.0,
            p_spatial: 0.0,
            p_gamma: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_mirror", self.p_mirror),
            ("p_spatial", self.p_spatial),
            ("p_gamma", self.p_gamma),
            ("p_noise", self.p_noise),
            ("p_blur", self.p_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, (lo, hi)) in [
            ("scale_range", self.scale_range),
            ("rot_range_deg", self.rot_range_deg),
            ("elastic_sigma", self.elastic_sigma),
            ("elastic_alpha", self.elastic_alpha),
            ("gamma_range", self.gamma_range),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name}: need low <= high, got ({lo}, {hi})")));
            }
        }
        let positive = [
            ("scale_range", self.scale_range.0),
            ("elastic_sigma", self.elastic_sigma.0),
            ("gamma_range", self.gamma_range.0),
            ("blur_sigma", self.blur_sigma.0),
        ];
        for (name, lo) in positive {
            if lo <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.elastic_alpha.0 < 0.0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("elastic_alpha and noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let pair = |(a, b): (f64, f64)| [a, b];
        KvWriter::new()
            .put("p_mirror", self.p_mirror)
            .put("p_spatial", self.p_spatial)
            .put_list("scale_range", &pair(self.scale_range))
            .put("isotropic_scale", self.isotropic_scale)
            .put_list("rot_range_deg", &pair(self.rot_range_deg))
            .put_list("elastic_sigma", &pair(self.elastic_sigma))
            .put_list("elastic_alpha", &pair(self.elastic_alpha))
            .put("p_gamma", self.p_gamma)
            .put_list("gamma_range", &pair(self.gamma_range))
            .put("p_noise", self.p_noise)
            .put("noise_sigma", self.noise_sigma)
            .put("p_blur", self.p_blur)
            .put_list("blur_sigma", &pair(self.blur_sigma))
            .finish()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut c = AugmentConfig::default();
        let range = |kv: &mut KvMap, key: &str, slot: &mut (f64, f64)| -> Result<()> {
            if let Some(v) = kv.take_list::<f64>(key)? {
                match v[..] {
                    [a, b] => *slot = (a, b),
                    _ => return Err(Error::Parse(format!("{key}: expected two values"))),
                }
            }
            Ok(())
        };
        kv.take("p_mirror", &mut c.p_mirror)?;
        kv.take("p_spatial", &mut c.p_spatial)?;
        range(&mut kv, "scale_range", &mut c.scale_range)?;
        kv.take("isotropic_scale", &mut c.isotropic_scale)?;
        range(&mut kv, "rot_range_deg", &mut c.rot_range_deg)?;
        range(&mut kv, "elastic_sigma", &mut c.elastic_sigma)?;
        range(&mut kv, "elastic_alpha", &mut c.elastic_alpha)?;
        kv.take("p_gamma", &mut c.p_gamma)?;
        range(&mut kv, "gamma_range", &mut c.gamma_range)?;
        kv.take("p_noise", &mut c.p_noise)?;
        kv.take("noise_sigma", &mut c.noise_sigma)?;
        kv.take("p_blur", &mut c.p_blur)?;
        range(&mut kv, "blur_sigma", &mut c.blur_sigma)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one training sample.
pub fn sample_seed(global: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(global) ^ epoch) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialParams {
    /// Per-axis scale factors (all equal when isotropic).
    pub scale: [f64; 3],
    /// Rotation angles about axes 0, 1, 2 in radians.
    pub angles: [f64; 3],
    pub elastic_sigma: f64,
    pub elastic_alpha: f64,
    /// Seed of the displacement noise.
    pub field_seed: u64,
}

impl SpatialParams {
    pub fn identity() -> Self {
        SpatialParams {
            scale: [1.0; 3],
            angles: [0.0; 3],
            elastic_sigma: 10.0,
            elastic_alpha: 0.0,
            field_seed: 0,
        }
    }
}

/// All random decisions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub mirror: [bool; 3],
    pub spatial: Option<SpatialParams>,
    pub gamma: Option<f64>,
    /// Seed of the noise field when noise fires.
    pub noise: Option<u64>,
    pub blur: Option<f64>,
}

impl AugmentPlan {
    pub fn draw(cfg: &AugmentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi { lo } else { rng.random_range(lo..=hi) }
        };
        let mirror = [0; 3].map(|_| rng.random_bool(cfg.p_mirror));
        let spatial = rng.random_bool(cfg.p_spatial).then(|| {
            let scale = if cfg.isotropic_scale {
                [uniform(&mut rng, cfg.scale_range); 3]
            } else {
                [0; 3].map(|_| uniform(&mut rng, cfg.scale_range))
            };
            let angles = [0; 3].map(|_| uniform(&mut rng, cfg.rot_range_deg).to_radians());
            SpatialParams {
                scale,
                angles,
                elastic_sigma: uniform(&mut rng, cfg.elastic_sigma),
                elastic_alpha: uniform(&mut rng, cfg.elastic_alpha),
                field_seed: rng.random(),
            }
        });
        let gamma = rng.random_bool(cfg.p_gamma).then(|| uniform(&mut rng, cfg.gamma_range));
        let noise = rng.random_bool(cfg.p_noise).then(|| rng.random());
        let blur = rng.random_bool(cfg.p_blur).then(|| uniform(&mut rng, cfg.blur_sigma));
        AugmentPlan {
            mirror,
            spatial,
            gamma,
            noise,
            blur,
        }
    }
}

/// Flips the selected axes of image and mask.
pub fn mirror(p: &Patch, axes: [bool; 3]) -> Patch {
    if !axes.iter().any(|&a| a) {
        return p.clone();
    }
    let [nx, ny, nz] = p.dims;
    let f = |v: usize, n: usize, flip: bool| if flip { n - 1 - v } else { v };
    let mut out = p.clone();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let src = p.index(f(i, nx, axes[0]), f(j, ny, axes[1]), f(k, nz, axes[2]));
                let dst = p.index(i, j, k);
                out.image[dst] = p.image[src];
                out.mask[dst] = p.mask[src];
            }
        }
    }
    out
}

/// Normalised Gaussian taps on `[-ceil(4 sigma), ceil(4 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let w: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Boundary {
    Replicate,
    Zero,
}

/// Separable filtering with the same kernel along every axis.
fn separable(data: &[f64], dims: [usize; 3], kernel: &[f64], boundary: Boundary) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let st = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / st) % dims[axis]) as isize;
            let base = idx - pos as usize * st;
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let q = pos + t as isize - r;
                let q = match boundary {
                    Boundary::Replicate => q.clamp(0, n - 1),
                    Boundary::Zero if q < 0 || q >= n => continue,
                    Boundary::Zero => q,
                };
                acc += w * cur[base + q as usize * st];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

const BSPLINE_POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// In-place conversion of samples to cubic B-spline coefficients along one
/// line, mirror-symmetric boundary.
fn prefilter_line(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = BSPLINE_POLE;
    let lambda = (1.0 - z) * (1.0 - 1.0 / z);
    c.iter_mut().for_each(|v| *v *= lambda);
    let horizon = (1e-12f64.ln() / z.abs().ln()).ceil() as usize;
    c[0] = if horizon < n {
        let mut zn = z;
        let mut sum = c[0];
        for v in &c[1..horizon] {
            sum += zn * v;
            zn *= z;
        }
        sum
    } else {
        let iz = 1.0 / z;
        let mut zn = z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n *= z2n * iz;
        for v in &c[1..n - 1] {
            sum += (zn + z2n) * v;
            zn *= z;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    };
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

fn bspline_coefficients(image: &[f32], dims: [usize; 3]) -> Vec<f64> {
    let mut c: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let st = strides[axis];
        let mut line = vec![0.0; n];
        for start in 0..c.len() {
            if !(start / st).is_multiple_of(n) {
                continue;
            }
            for (t, v) in line.iter_mut().enumerate() {
                *v = c[start + t * st];
            }
            prefilter_line(&mut line);
            for (t, v) in line.iter().enumerate() {
                c[start + t * st] = *v;
            }
        }
    }
    c
}

#[inline]
fn mirror_index(k: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let k = k.rem_euclid(period);
    (if k >= n as isize { period - k } else { k }) as usize
}

#[inline]
fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0,
        (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
fn inside(p: [f64; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= -0.5 && p[a] < dims[a] as f64 - 0.5)
}

fn sample_bspline(coef: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    if !inside(p, dims) {
        return 0.0;
    }
    let mut idx = [[0usize; 4]; 3];
    let mut w = [[0.0; 4]; 3];
    for a in 0..3 {
        let f = p[a].floor();
        w[a] = bspline_weights(p[a] - f);
        for (t, slot) in idx[a].iter_mut().enumerate() {
            *slot = mirror_index(f as isize - 1 + t as isize, dims[a]);
        }
    }
    let mut acc = 0.0;
    for (tz, &wz) in w[2].iter().enumerate() {
        for (ty, &wy) in w[1].iter().enumerate() {
            let row = (idx[2][tz] * dims[1] + idx[1][ty]) * dims[0];
            let mut line = 0.0;
            for (tx, &wx) in w[0].iter().enumerate() {
                line += wx * coef[row + idx[0][tx]];
            }
            acc += wz * wy * line;
        }
    }
    acc
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (s0, c0) = angles[0].sin_cos();
    let (s1, c1) = angles[1].sin_cos();
    let (s2, c2) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, c0, -s0], [0.0, s0, c0]];
    let ry = [[c1, 0.0, s1], [0.0, 1.0, 0.0], [-s1, 0.0, c1]];
    let rz = [[c2, -s2, 0.0], [s2, c2, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    };
    mul(rz, mul(ry, rx))
}

/// Smoothed, scaled Gaussian displacement field, one component per axis.
fn elastic_field(dims: [usize; 3], sigma: f64, alpha: f64, seed: u64) -> [Vec<f64>; 3] {
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = gaussian_kernel(sigma);
    [0; 3].map(|_| {
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut f = separable(&noise, dims, &kernel, Boundary::Zero);
        f.iter_mut().for_each(|v| *v *= alpha);
        f
    })
}

/// Rotation, scaling and elastic deformation about the patch centre. The
/// image is read through cubic B-splines and the mask by nearest neighbour;
/// points outside the patch read as 0.
pub fn spatial_transform(p: &Patch, sp: &SpatialParams) -> Patch {
    let dims = p.dims;
    let centre = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let r = rotation(sp.angles);
    let field = (sp.elastic_alpha != 0.0).then(|| elastic_field(dims, sp.elastic_sigma, sp.elastic_alpha, sp.field_seed));
    let coef = bspline_coefficients(&p.image, dims);
    let [nx, ny, _] = dims;
    let slab = nx * ny;
    let mut image = vec![0f32; p.image.len()];
    let mut mask = vec![0u8; p.mask.len()];
    image
        .par_chunks_mut(slab)
        .zip(mask.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(k, (img, msk))| {
            for j in 0..ny {
                for i in 0..nx {
                    let local = j * nx + i;
                    let mut q = [i as f64 - centre[0], j as f64 - centre[1], k as f64 - centre[2]];
                    if let Some(f) = &field {
                        let idx = k * slab + local;
                        for a in 0..3 {
                            q[a] += f[a][idx];
                        }
                    }
                    let mut src = [0.0; 3];
                    for a in 0..3 {
                        let rotated: f64 = (0..3).map(|b| r[a][b] * q[b]).sum();
                        src[a] = centre[a] + sp.scale[a] * rotated;
                    }
                    img[local] = sample_bspline(&coef, dims, src) as f32;
                    msk[local] = if inside(src, dims) {
                        let n = [0, 1, 2].map(|a| (src[a].round() as isize).clamp(0, dims[a] as isize - 1) as usize);
                        p.mask[p.index(n[0], n[1], n[2])]
                    } else {
                        0
                    };
                }
            }
        });
    Patch {
        dims,
        image,
        mask,
    }
}

/// Power-law intensity transform on the `[min, max]`-normalised patch. A
/// constant patch passes through unchanged.
pub fn gamma_augment(image: &mut [f32], gamma: f64) {
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return;
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    for v in image.iter_mut() {
        let t = ((*v as f64 - lo) / range).clamp(0.0, 1.0);
        *v = (t.powf(gamma) * range + lo) as f32;
    }
}

pub fn gaussian_noise(image: &mut [f32], sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in image.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + sigma * n) as f32;
    }
}

/// Separable Gaussian blur truncated at 4 sigma, replicating edges.
pub fn gaussian_blur(image: &mut [f32], dims: [usize; 3], sigma: f64) {
    let data: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let out = separable(&data, dims, &gaussian_kernel(sigma), Boundary::Replicate);
    for (v, o) in image.iter_mut().zip(out) {
        *v = o as f32;
    }
}

/// Zero mean, unit variance; a constant patch becomes all zeros.
pub fn renormalize(image: &mut [f32]) {
    let n = image.len() as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-8 {
        image.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
    } else {
        image.fill(0.0);
    }
}

/// Applies a drawn plan.
pub fn apply_plan(p: &Patch, plan: &AugmentPlan, cfg: &AugmentConfig) -> Patch {
    let mut out = mirror(p, plan.mirror);
    if let Some(sp) = &plan.spatial {
        out = spatial_transform(&out, sp);
    }
    if let Some(g) = plan.gamma {
        gamma_augment(&mut out.image, g);
    }
    if let Some(seed) = plan.noise {
        gaussian_noise(&mut out.image, cfg.noise_sigma, seed);
    }
    if let Some(s) = plan.blur {
        gaussian_blur(&mut out.image, out.dims, s);
    }
    renormalize(&mut out.image);
    out
}

/// Full pipeline for one sample.
pub fn augment(p: &Patch, cfg: &AugmentConfig, seed: u64) -> Patch {
    apply_plan(p, &AugmentPlan::draw(cfg, seed), cfg)
}
