//! Seeded synthetic head phantoms with an analytically known brain mask.
//!
//! Each phantom is an ellipsoidal brain wrapped in a CSF layer and a bright
//! skull shell on a dark background, optionally with spherical lesions
//! strictly inside the brain, plus additive Gaussian noise. Everything is a
//! pure function of `(seed, index)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::metrics::Sequence;
use crate::volume::{write_mask, write_nifti, BrainMask, Grid, Volume};

/// Tissue contrast of one phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrast {
    /// Bright skull, mid-grey brain, dark CSF.
    T1,
    /// CSF brighter than brain.
    T2,
}

impl Contrast {
    pub fn sequence(self) -> Sequence {
        match self {
            Contrast::T1 => Sequence::T1w,
            Contrast::T2 => Sequence::T2w,
        }
    }

    /// Base intensities `[background, skull, csf, brain]`.
    pub fn levels(self) -> [f64; 4] {
        match self {
            Contrast::T1 => [10.0, 900.0, 150.0, 550.0],
            Contrast::T2 => [10.0, 600.0, 1000.0, 400.0],
        }
    }
}

/// Named recipe for the per-case contrast and jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    T1,
    T2,
    /// T1 or T2 per case with equal probability.
    Mixed,
    /// Centred, axis-aligned, lesion- and noise-free T1 phantoms whose
    /// image and mask are invariant under every axis mirror.
    Symmetric,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::T1 => "t1",
            Preset::T2 => "t2",
            Preset::Mixed => "mixed",
            Preset::Symmetric => "symmetric",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Preset::T1),
            "t2" => Ok(Preset::T2),
            "mixed" => Ok(Preset::Mixed),
            "symmetric" => Ok(Preset::Symmetric),
            _ => Err(Error::Parse(format!("unknown phantom preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: f64,
    /// Brain semi-axes as fractions of the field of view.
    pub semi_axis_frac: (f64, f64),
    pub csf_mm: (f64, f64),
    pub skull_mm: (f64, f64),
    /// Relative jitter applied to each tissue level.
    pub intensity_jitter: f64,
    pub lesions: (usize, usize),
    pub lesion_radius_mm: (f64, f64),
    /// Relative intensity change of a lesion; the sign is drawn per lesion.
    pub lesion_contrast: (f64, f64),
    pub noise_sigma: f64,
    /// Maximum ellipsoid centre offset in voxels.
    pub center_jitter: f64,
    pub rotation_deg: f64,
    pub preset: Preset,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [48, 48, 48],
            spacing: 1.5,
            semi_axis_frac: (0.24, 0.32),
            csf_mm: (1.5, 3.0),
            skull_mm: (3.0, 6.0),
            intensity_jitter: 0.1,
            lesions: (0, 3),
            lesion_radius_mm: (2.0, 5.0),
            lesion_contrast: (0.3, 0.7),
            noise_sigma: 25.0,
            center_jitter: 1.5,
            rotation_deg: 10.0,
            preset: Preset::T1,
            seed: 0,
        }
    }
}

fn ordered(name: &str, (a, b): (f64, f64)) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(Error::Config(format!("{name}: invalid range ({a}, {b})")));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("phantom dims {:?} must be at least 8", self.dims)));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(Error::Config(format!("spacing {} must be positive", self.spacing)));
        }
        for (name, r) in [
            ("semi_axis_frac", self.semi_axis_frac),
            ("csf_mm", self.csf_mm),
            ("skull_mm", self.skull_mm),
            ("lesion_radius_mm", self.lesion_radius_mm),
            ("lesion_contrast", self.lesion_contrast),
        ] {
            ordered(name, r)?;
            if r.0 < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if self.semi_axis_frac.0 <= 0.0 {
            return Err(Error::Config("semi_axis_frac must be positive".into()));
        }
        if self.lesions.0 > self.lesions.1 {
            return Err(Error::Config("lesions: min exceeds max".into()));
        }
        for (name, v) in [
            ("intensity_jitter", self.intensity_jitter),
            ("noise_sigma", self.noise_sigma),
            ("center_jitter", self.center_jitter),
            ("rotation_deg", self.rotation_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.intensity_jitter >= 0.5 {
            return Err(Error::Config("intensity_jitter must be below 0.5".into()));
        }
        // the outer skull surface has to stay inside the grid
        let half_fov = self.dims.iter().map(|&d| d as f64 * self.spacing / 2.0).fold(f64::INFINITY, f64::min);
        let fov = self.dims.iter().map(|&d| d as f64 * self.spacing).fold(0.0, f64::max);
        let reach = self.semi_axis_frac.1 * fov
            + self.csf_mm.1
            + self.skull_mm.1
            + self.center_jitter * self.spacing;
        if reach > half_fov - self.spacing {
            return Err(Error::Config(format!(
                "head extent {reach:.1} mm does not fit half field of view {half_fov:.1} mm"
            )));
        }
        if self.lesions.1 > 0 && self.lesion_radius_mm.1 >= self.semi_axis_frac.0 * fov * 0.5 {
            return Err(Error::Config("lesions too large for the smallest brain".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let pair = |(a, b): (f64, f64)| [a, b];
        KvWriter::new()
            .put_list("dims", &self.dims)
            .put("spacing", self.spacing)
            .put_list("semi_axis_frac", &pair(self.semi_axis_frac))
            .put_list("csf_mm", &pair(self.csf_mm))
            .put_list("skull_mm", &pair(self.skull_mm))
            .put("intensity_jitter", self.intensity_jitter)
            .put_list("lesions", &[self.lesions.0, self.lesions.1])
            .put_list("lesion_radius_mm", &pair(self.lesion_radius_mm))
            .put_list("lesion_contrast", &pair(self.lesion_contrast))
            .put("noise_sigma", self.noise_sigma)
            .put("center_jitter", self.center_jitter)
            .put("rotation_deg", self.rotation_deg)
            .put("preset", self.preset)
            .put("seed", self.seed)
            .finish()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut c = PhantomConfig::default();
        fn two<T: FromStr + Copy>(kv: &mut KvMap, key: &str) -> Result<Option<(T, T)>>
        where
            T::Err: fmt::Display,
        {
            match kv.take_list::<T>(key)? {
                None => Ok(None),
                Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
                Some(_) => Err(Error::Parse(format!("{key}: expected two values"))),
            }
        }
        if let Some(d) = kv.take_list::<usize>("dims")? {
            c.dims = d
                .try_into()
                .map_err(|_| Error::Parse("dims: expected three values".into()))?;
        }
        kv.take("spacing", &mut c.spacing)?;
        for (key, slot) in [
            ("semi_axis_frac", &mut c.semi_axis_frac),
            ("csf_mm", &mut c.csf_mm),
            ("skull_mm", &mut c.skull_mm),
            ("lesion_radius_mm", &mut c.lesion_radius_mm),
            ("lesion_contrast", &mut c.lesion_contrast),
        ] {
            if let Some(v) = two(&mut kv, key)? {
                *slot = v;
            }
        }
        if let Some(v) = two(&mut kv, "lesions")? {
            c.lesions = v;
        }
        kv.take("intensity_jitter", &mut c.intensity_jitter)?;
        kv.take("noise_sigma", &mut c.noise_sigma)?;
        kv.take("center_jitter", &mut c.center_jitter)?;
        kv.take("rotation_deg", &mut c.rotation_deg)?;
        kv.take("preset", &mut c.preset)?;
        kv.take("seed", &mut c.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }
}

/// A lesion sphere in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
    pub intensity: f64,
}

/// Analytic head geometry of one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadShape {
    /// Ellipsoid centre in world millimetres.
    pub center: [f64; 3],
    /// Rows are the ellipsoid's principal axes.
    pub axes: [[f64; 3]; 3],
    pub semi_axes: [f64; 3],
    pub csf: f64,
    pub skull: f64,
}

impl HeadShape {
    /// Squared normalised radius of `p` for semi-axes grown by `grow` mm.
    pub fn radius2(&self, p: [f64; 3], grow: f64) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (0..3)
            .map(|a| {
                let u = self.axes[a][0] * d[0] + self.axes[a][1] * d[1] + self.axes[a][2] * d[2];
                (u / (self.semi_axes[a] + grow)).powi(2)
            })
            .sum()
    }

    pub fn in_brain(&self, p: [f64; 3]) -> bool {
        self.radius2(p, 0.0) <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: BrainMask,
    pub contrast: Contrast,
    pub shape: HeadShape,
    pub lesions: Vec<Lesion>,
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    mul(mul(rz, ry), rx)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Voxel centre of linear index `idx` in world millimetres.
fn voxel_mm(dims: [usize; 3], spacing: f64, idx: usize) -> [f64; 3] {
    let i = idx % dims[0];
    let j = (idx / dims[0]) % dims[1];
    let k = idx / (dims[0] * dims[1]);
    [i as f64 * spacing, j as f64 * spacing, k as f64 * spacing]
}

/// Generates phantom `index` of the series defined by `cfg`.
pub fn generate(cfg: &PhantomConfig, index: u64) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let symmetric = cfg.preset == Preset::Symmetric;

    let contrast = match cfg.preset {
        Preset::T1 | Preset::Symmetric => Contrast::T1,
        Preset::T2 => Contrast::T2,
        Preset::Mixed => {
            if rng.random_bool(0.5) {
                Contrast::T1
            } else {
                Contrast::T2
            }
        }
    };
    let fov = cfg.dims.iter().map(|&d| d as f64 * cfg.spacing).fold(0.0, f64::max);
    let semi_axes: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, cfg.semi_axis_frac) * fov);
    let csf = uniform(&mut rng, cfg.csf_mm);
    let skull = uniform(&mut rng, cfg.skull_mm);
    let mid: [f64; 3] = std::array::from_fn(|a| (cfg.dims[a] - 1) as f64 * cfg.spacing / 2.0);
    let (center, axes) = if symmetric {
        (mid, rotation([0.0; 3]))
    } else {
        let j = cfg.center_jitter * cfg.spacing;
        let center = std::array::from_fn(|a| mid[a] + uniform(&mut rng, (-j, j)));
        let r = cfg.rotation_deg.to_radians();
        let angles = std::array::from_fn(|_| uniform(&mut rng, (-r, r)));
        let m = rotation(angles);
        // rows of R^T are the rotated principal axes
        let axes = std::array::from_fn(|a| [m[0][a], m[1][a], m[2][a]]);
        (center, axes)
    };
    let shape = HeadShape {
        center,
        axes,
        semi_axes,
        csf,
        skull,
    };

    let levels = contrast.levels();
    let jit = cfg.intensity_jitter;
    let [bg, skull_i, csf_i, brain_i]: [f64; 4] = std::array::from_fn(|t| levels[t] * (1.0 + uniform(&mut rng, (-jit, jit))));

    let mut lesions = Vec::new();
    if !symmetric {
        let count = rng.random_range(cfg.lesions.0..=cfg.lesions.1);
        let min_axis = semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
        for _ in 0..count {
            let radius = uniform(&mut rng, cfg.lesion_radius_mm);
            // |u(c)| + r / min_axis <= 1 keeps the whole sphere inside the
            // ellipsoid by the triangle inequality in normalised coordinates
            let max_u = 1.0 - radius / min_axis - 0.05;
            if max_u <= 0.0 {
                continue;
            }
            let dir: [f64; 3] = loop {
                let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let n2: f64 = v.iter().map(|x| x * x).sum();
                if n2 > 1e-6 && n2 <= 1.0 {
                    break v;
                }
            };
            let u_len = max_u * rng.random_range(0.0f64..1.0).cbrt();
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u: [f64; 3] = std::array::from_fn(|a| dir[a] / n * u_len);
            let c = std::array::from_fn(|k| {
                center[k] + (0..3).map(|a| axes[a][k] * u[a] * semi_axes[a]).sum::<f64>()
            });
            let change = uniform(&mut rng, cfg.lesion_contrast) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            lesions.push(Lesion {
                center: c,
                radius,
                intensity: brain_i * (1.0 + change),
            });
        }
    }

    let n: usize = cfg.dims.iter().product();
    let mut data = vec![0f32; n];
    let mut mask = vec![0u8; n];
    for (idx, (v, m)) in data.iter_mut().zip(mask.iter_mut()).enumerate() {
        let p = voxel_mm(cfg.dims, cfg.spacing, idx);
        let value = if shape.in_brain(p) {
            *m = 1;
            lesions
                .iter()
                .rev()
                .find(|l| (0..3).map(|a| (p[a] - l.center[a]).powi(2)).sum::<f64>() <= l.radius * l.radius)
                .map_or(brain_i, |l| l.intensity)
        } else if shape.radius2(p, csf) <= 1.0 {
            csf_i
        } else if shape.radius2(p, csf + skull) <= 1.0 {
            skull_i
        } else {
            bg
        };
        *v = value as f32;
    }
    if cfg.noise_sigma > 0.0 && !symmetric {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let grid = Grid::with_spacing(cfg.dims, [cfg.spacing; 3])?;
    Ok(Phantom {
        volume: Volume::new(grid.clone(), data)?,
        mask: BrainMask::new(grid, mask)?,
        contrast,
        shape,
        lesions,
    })
}

/// One written phantom case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub sequence: Sequence,
    pub lesions: usize,
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub const CASES_HEADER: &str = "case_id,sequence,lesions";

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Writes `n` phantoms into `out`. With `holdout > 0` the last `holdout`
/// cases go to `out/heldout` and the rest to `out/train`; each directory
/// gets a `cases.csv` index.
pub fn generate_set(cfg: &PhantomConfig, n: usize, holdout: usize, out: &Path) -> Result<Vec<CaseRecord>> {
    if n == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    if holdout >= n && holdout > 0 {
        return Err(Error::Config(format!("holdout {holdout} leaves no training cases out of {n}")));
    }
    cfg.validate()?;
    let dir_of = |i: usize| -> PathBuf {
        match holdout {
            0 => out.to_path_buf(),
            _ if i >= n - holdout => out.join("heldout"),
            _ => out.join("train"),
        }
    };
    let dirs: Vec<PathBuf> = if holdout == 0 {
        vec![out.to_path_buf()]
    } else {
        vec![out.join("train"), out.join("heldout")]
    };
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io_at(d, e))?;
    }

    let records: Vec<CaseRecord> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<CaseRecord> {
            let ph = generate(cfg, i as u64)?;
            let id = case_id(i);
            let dir = dir_of(i);
            let image = dir.join(format!("{id}.nii.gz"));
            let mask = dir.join(format!("{id}_mask.nii.gz"));
            write_nifti(&ph.volume, &image, true)?;
            write_mask(&ph.mask, &mask, true)?;
            Ok(CaseRecord {
                case_id: id,
                sequence: ph.contrast.sequence(),
                lesions: ph.lesions.len(),
                image,
                mask,
            })
        })
        .collect::<Result<_>>()?;

    for d in &dirs {
        let mut text = format!("{CASES_HEADER}\n");
        for (i, r) in records.iter().enumerate() {
            if dir_of(i) == *d {
                text.push_str(&format!("{},{},{}\n", r.case_id, r.sequence, r.lesions));
            }
        }
        let path = d.join("cases.csv");
        fs::write(&path, text).map_err(|e| Error::io_at(&path, e))?;
    }
    Ok(records)
}

/// Reads the `case_id -> sequence` map from a `cases.csv` index.
pub fn read_case_sequences(path: &Path) -> Result<std::collections::HashMap<String, Sequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CASES_HEADER) {
        return Err(Error::Parse(format!("{}: expected header {CASES_HEADER:?}", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut f = l.split(',');
            match (f.next(), f.next()) {
                (Some(id), Some(seq)) => Ok((id.to_string(), seq.parse()?)),
                _ => Err(Error::Parse(format!("bad cases.csv line {l:?}"))),
            }
        })
        .collect()
}
