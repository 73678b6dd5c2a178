//! Canonicalisation to RAS voxel order by axis permutation and flips.
//!
//! No resampling happens: each voxel axis is mapped to the world axis its
//! direction cosine is closest to, so the operation is exactly invertible.

use super::{Affine, BrainMask, Grid, Volume};
use crate::error::{Error, Result};

/// How a volume was permuted/flipped; enough to undo it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Reorientation {
    /// Output axis `i` reads input axis `perm[i]`.
    pub perm: [usize; 3],
    /// Output axis `i` runs opposite to its input axis.
    pub flip: [bool; 3],
    pub native: Grid,
}

impl Reorientation {
    pub fn is_identity(&self) -> bool {
        self.perm == [0, 1, 2] && self.flip == [false; 3]
    }

    fn out_dims(&self) -> [usize; 3] {
        let d = self.native.dims;
        [d[self.perm[0]], d[self.perm[1]], d[self.perm[2]]]
    }

    fn ras_grid(&self) -> Result<Grid> {
        let old = &self.native.affine;
        let mut a: Affine = *old;
        for i in 0..3 {
            let src = self.perm[i];
            let sign = if self.flip[i] { -1.0 } else { 1.0 };
            for r in 0..3 {
                a[r][i] = sign * old[r][src];
            }
        }
        for r in 0..3 {
            let mut t = old[r][3];
            for i in 0..3 {
                if self.flip[i] {
                    let src = self.perm[i];
                    t += old[r][src] * (self.native.dims[src] - 1) as f64;
                }
            }
            a[r][3] = t;
        }
        Grid::new(self.out_dims(), a)
    }

    /// Native linear index for every RAS voxel, in RAS scan order.
    fn source_indices(&self) -> Vec<usize> {
        let nd = self.native.dims;
        let od = self.out_dims();
        let mut strides = [0usize; 3];
        let native_stride = [1, nd[0], nd[0] * nd[1]];
        for i in 0..3 {
            strides[i] = native_stride[self.perm[i]];
        }
        let mut out = Vec::with_capacity(od.iter().product());
        for c in 0..od[2] {
            let zc = if self.flip[2] { od[2] - 1 - c } else { c };
            for b in 0..od[1] {
                let yb = if self.flip[1] { od[1] - 1 - b } else { b };
                for a in 0..od[0] {
                    let xa = if self.flip[0] { od[0] - 1 - a } else { a };
                    out.push(xa * strides[0] + yb * strides[1] + zc * strides[2]);
                }
            }
        }
        out
    }

    fn forward<T: Copy>(&self, data: &[T]) -> Vec<T> {
        if self.is_identity() {
            return data.to_vec();
        }
        self.source_indices().into_iter().map(|s| data[s]).collect()
    }

    fn inverse<T: Copy + Default>(&self, data: &[T]) -> Vec<T> {
        if self.is_identity() {
            return data.to_vec();
        }
        let mut out = vec![T::default(); data.len()];
        for (dst, src) in self.source_indices().into_iter().enumerate() {
            out[src] = data[dst];
        }
        out
    }

    /// Maps a RAS-ordered volume back onto the native grid.
    pub fn restore_volume(&self, vol: &Volume) -> Result<Volume> {
        self.check_ras_dims(&vol.grid)?;
        Ok(Volume {
            grid: self.native.clone(),
            data: self.inverse(&vol.data),
            dtype: vol.dtype,
        })
    }

    pub fn restore_mask(&self, mask: &BrainMask) -> Result<BrainMask> {
        self.check_ras_dims(&mask.grid)?;
        Ok(BrainMask {
            grid: self.native.clone(),
            data: self.inverse(&mask.data),
        })
    }

    fn check_ras_dims(&self, g: &Grid) -> Result<()> {
        if g.dims != self.out_dims() {
            return Err(Error::GridMismatch(format!(
                "expected RAS dims {:?}, got {:?}",
                self.out_dims(),
                g.dims
            )));
        }
        Ok(())
    }
}

fn plan(grid: &Grid) -> Result<Reorientation> {
    let a = &grid.affine;
    let mut perm = [usize::MAX; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let (w, _) = (0..3)
            .map(|i| (i, a[i][j].abs()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if perm[w] != usize::MAX {
            return Err(Error::DegenerateAffine(format!(
                "voxel axes {} and {j} both point along world axis {w}",
                perm[w]
            )));
        }
        perm[w] = j;
        flip[w] = a[w][j] < 0.0;
    }
    Ok(Reorientation {
        perm,
        flip,
        native: grid.clone(),
    })
}

/// Reorders `vol` so voxel axes 0/1/2 point along +x/+y/+z.
pub fn reorient_ras(vol: &Volume) -> Result<(Volume, Reorientation)> {
    let rec = plan(&vol.grid)?;
    let grid = if rec.is_identity() {
        vol.grid.clone()
    } else {
        rec.ras_grid()?
    };
    let out = Volume {
        grid,
        data: rec.forward(&vol.data),
        dtype: vol.dtype,
    };
    Ok((out, rec))
}

pub fn reorient_mask_ras(mask: &BrainMask) -> Result<(BrainMask, Reorientation)> {
    let rec = plan(&mask.grid)?;
    let grid = if rec.is_identity() {
        mask.grid.clone()
    } else {
        rec.ras_grid()?
    };
    Ok((
        BrainMask {
            grid,
            data: rec.forward(&mask.data),
        },
        rec,
    ))
}
