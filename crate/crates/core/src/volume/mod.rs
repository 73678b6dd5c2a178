//! Volumes, masks and their voxel grids.
//!
//! Data is stored x-fastest: the linear index of voxel `(i, j, k)` is
//! `i + nx * (j + ny * k)`.

mod nifti;
mod orient;

pub use nifti::{encode_nifti, read_nifti, read_nifti_bytes, write_mask, write_nifti, DataType};
pub use orient::{reorient_ras, reorient_mask_ras, Reorientation};

use crate::error::{Error, Result};

/// Row-major 4x4 voxel-to-world matrix.
pub type Affine = [[f64; 4]; 4];

pub fn identity_affine() -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    let mut a = identity_affine();
    for i in 0..3 {
        a[i][i] = spacing[i];
    }
    a
}

pub fn affine_mul(a: &Affine, b: &Affine) -> Affine {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn det3(a: &Affine) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse of an affine whose bottom row is `[0, 0, 0, 1]`.
pub fn affine_inverse(a: &Affine) -> Result<Affine> {
    let det = det3(a);
    if det.abs() <= 1e-9 {
        return Err(Error::DegenerateAffine(format!("|det| = {det:e}")));
    }
    let mut inv = identity_affine();
    // adjugate of the linear part
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
    inv[0][0] = c(1, 1, 2, 2) / det;
    inv[0][1] = -c(0, 1, 2, 2) / det;
    inv[0][2] = c(0, 1, 1, 2) / det;
    inv[1][0] = -c(1, 0, 2, 2) / det;
    inv[1][1] = c(0, 0, 2, 2) / det;
    inv[1][2] = -c(0, 0, 1, 2) / det;
    inv[2][0] = c(1, 0, 2, 1) / det;
    inv[2][1] = -c(0, 0, 2, 1) / det;
    inv[2][2] = c(0, 0, 1, 1) / det;
    for i in 0..3 {
        inv[i][3] = -(0..3).map(|k| inv[i][k] * a[k][3]).sum::<f64>();
    }
    Ok(inv)
}

pub fn apply_affine(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2] + a[i][3];
    }
    out
}

/// Euclidean norms of the three direction columns.
pub fn column_norms(a: &Affine) -> [f64; 3] {
    let mut n = [0.0; 3];
    for (j, v) in n.iter_mut().enumerate() {
        *v = (0..3).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt();
    }
    n
}

/// Voxel lattice shared by a volume and its masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], affine: Affine) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized axis in {dims:?}")));
        }
        let det = det3(&affine);
        if det.abs() <= 1e-9 {
            return Err(Error::DegenerateAffine(format!("|det| = {det:e}")));
        }
        Ok(Grid {
            dims,
            spacing: column_norms(&affine),
            affine,
        })
    }

    /// Axis-aligned grid with the given spacing and the origin at voxel 0.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, diagonal_affine(spacing))
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// Same dims and affine entries equal within `tol`.
    pub fn matches(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    pub(crate) fn check_matches(&self, other: &Grid) -> Result<()> {
        if self.matches(other, 1e-6) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "dims {:?} vs {:?} or affines differ",
                self.dims, other.dims
            )))
        }
    }
}

/// A scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
    /// On-disk datatype the intensities came from; writing prefers it when
    /// the values still fit.
    pub dtype: DataType,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "data length {} != {} voxels",
                data.len(),
                grid.len()
            )));
        }
        Ok(Volume {
            grid,
            data,
            dtype: DataType::Float32,
        })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        let n = grid.len();
        Volume {
            grid,
            data: vec![value; n],
            dtype: DataType::Float32,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.grid.affine
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }
}

/// Binary brain mask on a volume's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask {
    pub grid: Grid,
    pub data: Vec<u8>,
}

impl BrainMask {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "mask length {} != {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Dimension(format!("mask value {v} is not binary")));
        }
        Ok(BrainMask { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        let n = grid.len();
        BrainMask {
            grid,
            data: vec![0; n],
        }
    }

    /// Mask from a volume: voxels with value >= `threshold` are foreground.
    pub fn from_threshold(vol: &Volume, threshold: f32) -> Self {
        BrainMask {
            grid: vol.grid.clone(),
            data: vol.data.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
            dtype: DataType::Uint8,
        }
    }
}
