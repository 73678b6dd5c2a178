//! Resampling between voxel grids and intensity normalisation.
//!
//! Output grids produced by [`target_grid`] keep the direction cosines of the
//! source and share its field-of-view centre, so down- and up-sampling are
//! symmetric about the middle of the volume.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{affine_inverse, affine_mul, apply_affine, Affine, BrainMask, Grid, Volume};

/// Spacing of the network grid in millimetres.
pub const NETWORK_SPACING: [f64; 3] = [1.5, 1.5, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub target_spacing: [f64; 3],
    pub interp: Interp,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            target_spacing: NETWORK_SPACING,
            interp: Interp::Trilinear,
        }
    }
}

impl GridSpec {
    pub fn new(target_spacing: [f64; 3], interp: Interp) -> Result<Self> {
        if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("target spacing must be positive, got {target_spacing:?}")));
        }
        Ok(GridSpec { target_spacing, interp })
    }
}

/// Which voxels contribute to the z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZScoreMode {
    #[default]
    AllVoxels,
    Nonzero,
}

impl std::str::FromStr for ZScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ZScoreMode::AllVoxels),
            "nonzero" => Ok(ZScoreMode::Nonzero),
            _ => Err(Error::Parse(format!("z-score mode must be 'all' or 'nonzero', got '{s}'"))),
        }
    }
}

impl std::fmt::Display for ZScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ZScoreMode::AllVoxels => "all",
            ZScoreMode::Nonzero => "nonzero",
        })
    }
}

/// Grid with the requested spacing covering the same field of view as `src`.
pub fn target_grid(src: &Grid, spacing: [f64; 3]) -> Result<Grid> {
    let mut dims = [0usize; 3];
    let mut affine: Affine = src.affine;
    for a in 0..3 {
        let n = (src.dims[a] as f64 * src.spacing[a] / spacing[a]).round();
        dims[a] = (n as usize).max(1);
        let f = spacing[a] / src.spacing[a];
        for row in affine.iter_mut().take(3) {
            row[a] *= f;
        }
    }
    let centre = |d: [usize; 3]| d.map(|n| (n as f64 - 1.0) / 2.0);
    let world = apply_affine(&src.affine, centre(src.dims));
    let c_out = centre(dims);
    for (i, w) in world.iter().enumerate() {
        affine[i][3] = w - (0..3).map(|j| affine[i][j] * c_out[j]).sum::<f64>();
    }
    Grid::new(dims, affine)
}

#[inline]
fn clamp_index(v: f64, n: usize) -> f64 {
    v.clamp(0.0, (n - 1) as f64)
}

/// Trilinear sample at continuous index `p`, clamped to the volume edge.
pub fn sample_trilinear(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = clamp_index(p[a], dims[a]);
        let f = c.floor();
        base[a] = (f as usize).min(dims[a] - 1);
        frac[a] = c - f;
    }
    let (nx, ny) = (dims[0], dims[1]);
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 {
            continue;
        }
        let z = (base[2] + dz).min(dims[2] - 1);
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            let y = (base[1] + dy).min(dims[1] - 1);
            let row = (z * ny + y) * nx;
            let x0 = base[0];
            let x1 = (x0 + 1).min(nx - 1);
            acc += wz * wy * ((1.0 - frac[0]) * data[row + x0] as f64 + frac[0] * data[row + x1] as f64);
        }
    }
    acc
}

/// Index of the nearest voxel, rounding halves away from zero.
#[inline]
pub fn nearest_index(p: [f64; 3], dims: [usize; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = clamp_index(p[a].round(), dims[a]) as usize;
    }
    out
}

/// Maps every voxel of `target` to a continuous index of `src` and applies
/// `sample`, one z-slab per task.
fn map_grid<T: Send + Copy + Default>(
    src: &Grid,
    target: &Grid,
    sample: impl Fn([f64; 3]) -> T + Sync,
) -> Result<Vec<T>> {
    let m = affine_mul(&affine_inverse(&src.affine)?, &target.affine);
    let [nx, ny, nz] = target.dims;
    let mut out = vec![T::default(); target.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                slab[j * nx + i] = sample(apply_affine(&m, [i as f64, j as f64, k as f64]));
            }
        }
    });
    debug_assert_eq!(out.len(), nx * ny * nz);
    Ok(out)
}

/// Samples `vol` on an arbitrary target grid.
pub fn resample_to_grid(vol: &Volume, target: &Grid, interp: Interp) -> Result<Volume> {
    if vol.grid.matches(target, 1e-9) {
        return Volume::new(target.clone(), vol.data.clone());
    }
    let dims = vol.dims();
    let data = &vol.data;
    let out = match interp {
        Interp::Trilinear => map_grid(&vol.grid, target, |p| sample_trilinear(data, dims, p) as f32)?,
        Interp::Nearest => map_grid(&vol.grid, target, |p| {
            let [i, j, k] = nearest_index(p, dims);
            data[vol.grid.index(i, j, k)]
        })?,
    };
    Volume::new(target.clone(), out)
}

/// Resamples `vol` to the spacing in `spec`, keeping its orientation and
/// field-of-view centre.
pub fn resample(vol: &Volume, spec: &GridSpec) -> Result<Volume> {
    let target = target_grid(&vol.grid, spec.target_spacing)?;
    resample_to_grid(vol, &target, spec.interp)
}

/// Nearest-neighbour transfer of a mask onto `target`.
pub fn resample_mask(mask: &BrainMask, target: &Grid) -> Result<BrainMask> {
    if mask.grid.matches(target, 1e-9) {
        return BrainMask::new(target.clone(), mask.data.clone());
    }
    let dims = mask.grid.dims;
    let out = map_grid(&mask.grid, target, |p| {
        let [i, j, k] = nearest_index(p, dims);
        mask.data[mask.grid.index(i, j, k)]
    })?;
    BrainMask::new(target.clone(), out)
}

/// z-score over every voxel.
pub fn zscore(vol: &Volume) -> Result<Volume> {
    zscore_with(vol, ZScoreMode::AllVoxels)
}

/// z-score with statistics taken from the voxels selected by `mode`; the
/// transform is applied to the whole volume.
pub fn zscore_with(vol: &Volume, mode: ZScoreMode) -> Result<Volume> {
    let selected = |v: &f32| mode == ZScoreMode::AllVoxels || *v != 0.0;
    let (mut n, mut sum) = (0usize, 0.0f64);
    for v in vol.data.iter().filter(|v| selected(v)) {
        n += 1;
        sum += *v as f64;
    }
    if n == 0 {
        return Err(Error::ZeroVariance);
    }
    let mean = sum / n as f64;
    let var = vol
        .data
        .iter()
        .filter(|v| selected(v))
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 1e-8) {
        return Err(Error::ZeroVariance);
    }
    let data = vol.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    Volume::new(vol.grid.clone(), data)
}

/// Trilinear upsampling of a probability map onto `native`, thresholded at 0.5.
pub fn mask_to_native(prob: &Volume, native: &Grid) -> Result<BrainMask> {
    let p = resample_to_grid(prob, native, Interp::Trilinear)?;
    Ok(BrainMask::from_threshold(&p, 0.5))
}
