//! Inference: preprocessing, full-volume forward passes with mirror
//! test-time augmentation, ensembling, largest-component cleanup and the
//! mapping back to the native grid.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::resample::{mask_to_native, resample, resample_mask, resample_to_grid, target_grid, zscore_with, GridSpec, Interp, ZScoreMode};
use crate::tensor::Tensor;
use crate::unet::{self, forward_eager, NetConfig, WeightStore};
use crate::volume::{reorient_mask_ras, reorient_ras, BrainMask, Volume};

/// Most members an ensemble may hold (one per cross-validation fold).
pub const MAX_MEMBERS: usize = 5;

/// Voxel budget for batching mirrored copies into one forward pass.
const TTA_BATCH_VOXELS: usize = 1 << 21;

/// Networks with a shared architecture whose softmax outputs are averaged.
#[derive(Debug, Clone)]
pub struct Ensemble {
    net: NetConfig,
    members: Vec<WeightStore>,
}

impl Ensemble {
    pub fn new(members: Vec<(NetConfig, WeightStore)>) -> Result<Self> {
        let mut it = members.into_iter();
        let (net, first) = it.next().ok_or(Error::EmptyEnsemble)?;
        unet::check_weights(&first, &net)?;
        let mut ws = vec![first];
        for (cfg, w) in it {
            if cfg != net {
                return Err(Error::Config("ensemble members have different network configs".into()));
            }
            unet::check_weights(&w, &net)?;
            ws.push(w);
        }
        if ws.len() > MAX_MEMBERS {
            return Err(Error::Config(format!("at most {MAX_MEMBERS} ensemble members, got {}", ws.len())));
        }
        Ok(Ensemble { net, members: ws })
    }

    /// Loads HDBW weight files with their config sidecars.
    pub fn load<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let members = paths
            .iter()
            .map(|p| unet::load_model(p.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn members(&self) -> &[WeightStore] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Average over all eight axis mirrors.
    pub tta: bool,
    pub zscore: ZScoreMode,
    /// Also return the brain probability on the native grid.
    pub keep_probability: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            tta: true,
            zscore: ZScoreMode::AllVoxels,
            keep_probability: false,
        }
    }
}

/// Per-axis `(before, after)` padding that makes `dims` divisible by `m`.
pub fn padding_for(dims: [usize; 3], m: usize) -> [(usize, usize); 3] {
    dims.map(|n| {
        let total = n.div_ceil(m) * m - n;
        (total / 2, total - total / 2)
    })
}

/// Edge-replicating pad of an x-fastest volume buffer.
pub fn pad_replicate(data: &[f32], dims: [usize; 3], pad: [(usize, usize); 3]) -> (Vec<f32>, [usize; 3]) {
    let out_dims: [usize; 3] = std::array::from_fn(|a| dims[a] + pad[a].0 + pad[a].1);
    let src = |o: usize, a: usize| o.saturating_sub(pad[a].0).min(dims[a] - 1);
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for k in 0..out_dims[2] {
        let sk = src(k, 2);
        for j in 0..out_dims[1] {
            let sj = src(j, 1);
            let row = &data[(sk * dims[1] + sj) * dims[0]..][..dims[0]];
            out.extend((0..out_dims[0]).map(|i| row[src(i, 0)]));
        }
    }
    (out, out_dims)
}

/// Inverse of [`pad_replicate`]'s geometry: extracts the original region.
pub fn crop(data: &[f32], dims: [usize; 3], pad: [(usize, usize); 3]) -> Vec<f32> {
    let inner: [usize; 3] = std::array::from_fn(|a| dims[a] - pad[a].0 - pad[a].1);
    let mut out = Vec::with_capacity(inner.iter().product());
    for k in 0..inner[2] {
        for j in 0..inner[1] {
            let start = ((k + pad[2].0) * dims[1] + j + pad[1].0) * dims[0] + pad[0].0;
            out.extend_from_slice(&data[start..start + inner[0]]);
        }
    }
    out
}

fn full_res_softmax(ws: &WeightStore, net: &NetConfig, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(forward_eager(ws, net, x)?.swap_remove(0))
}

fn split_batch(t: Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let shape = t.shape().to_vec();
    let per: usize = shape[1..].iter().product();
    let mut one = shape.clone();
    one[0] = 1;
    t.data()
        .chunks_exact(per)
        .map(|c| Tensor::new(one.clone(), c.to_vec()))
        .collect()
}

fn stack(ts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = ts[0].shape().to_vec();
    shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
    let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Full-resolution softmax of a `1 x 1 x D x H x W` input whose spatial dims
/// are divisible by the network divisor.
///
/// With `tta` the eight mirrored copies are forwarded, un-mirrored and
/// averaged. The sum is a butterfly over mirror bits, so relabelling the
/// mirrors (as mirroring the input does) leaves every partial sum unchanged
/// and mirror symmetry holds bit-exactly.
pub fn tta_forward(ws: &WeightStore, net: &NetConfig, x: &Tensor<f32>, tta: bool) -> Result<Tensor<f32>> {
    if x.shape().first() != Some(&1) {
        return Err(Error::ShapeMismatch(format!("expected a single-sample input, got {:?}", x.shape())));
    }
    if !tta {
        return full_res_softmax(ws, net, x);
    }
    let voxels: usize = x.shape()[2..].iter().product();
    let group = (TTA_BATCH_VOXELS / voxels.max(1)).clamp(1, 8);
    let mut outs = Vec::with_capacity(8);
    for chunk in (0u8..8).collect::<Vec<_>>().chunks(group) {
        let inputs = chunk.iter().map(|&m| x.flip_spatial(m)).collect::<Result<Vec<_>>>()?;
        let y = full_res_softmax(ws, net, &stack(&inputs)?)?;
        for (t, &m) in split_batch(y)?.into_iter().zip(chunk) {
            outs.push(t.flip_spatial(m)?);
        }
    }
    for bit in [1usize, 2, 4] {
        for m in 0..8 {
            if m & bit == 0 {
                let (lo, hi) = outs.split_at_mut(m | bit);
                lo[m].data_mut().iter_mut().zip(hi[0].data()).for_each(|(a, &b)| *a += b);
            }
        }
    }
    let mut total = outs.swap_remove(0);
    total.data_mut().iter_mut().for_each(|v| *v *= 0.125);
    Ok(total)
}

/// Brain probability of a preprocessed volume on its own grid.
pub fn ensemble_predict(ens: &Ensemble, vol: &Volume, tta: bool) -> Result<Volume> {
    if ens.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let dims = vol.dims();
    let pad = padding_for(dims, ens.net.divisor());
    let (padded, pdims) = pad_replicate(&vol.data, dims, pad);
    let x = Tensor::new(vec![1, 1, pdims[2], pdims[1], pdims[0]], padded)?;
    let mut acc: Option<Vec<f32>> = None;
    for ws in &ens.members {
        let y = tta_forward(ws, &ens.net, &x, tta)?;
        let n = y.numel() / 2;
        let brain = &y.data()[n..];
        match acc.as_mut() {
            None => acc = Some(brain.to_vec()),
            Some(a) => a.iter_mut().zip(brain).for_each(|(a, &b)| *a += b),
        }
    }
    let k = ens.len() as f32;
    let mut prob = acc.expect("nonempty ensemble");
    if ens.len() > 1 {
        prob.iter_mut().for_each(|v| *v /= k);
    }
    Volume::new(vol.grid.clone(), crop(&prob, pdims, pad))
}

/// Keeps the largest 26-connected foreground component. On equal sizes the
/// component containing the lowest linear index wins.
pub fn largest_cc(mask: &BrainMask) -> BrainMask {
    let [nx, ny, nz] = mask.grid.dims;
    let n = mask.data.len();
    let mut label = vec![0u32; n];
    let mut queue = VecDeque::new();
    let (mut best, mut best_size) = (0u32, 0usize);
    let mut next = 0u32;
    for start in 0..n {
        if mask.data[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            let (i, j, k) = (v % nx, (v / nx) % ny, v / (nx * ny));
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                            continue;
                        }
                        let u = a as usize + nx * (b as usize + ny * c as usize);
                        if mask.data[u] != 0 && label[u] == 0 {
                            label[u] = next;
                            queue.push_back(u);
                        }
                    }
                }
            }
        }
        if size > best_size {
            best = next;
            best_size = size;
        }
    }
    BrainMask {
        grid: mask.grid.clone(),
        data: label.iter().map(|&l| u8::from(l != 0 && l == best)).collect(),
    }
}

/// Result of [`extract_brain`], both on the input's native grid.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub mask: BrainMask,
    /// Brain probability after component cleanup; thresholding it at 0.5
    /// gives the mask before the final native-space component pass.
    pub probability: Option<Volume>,
}

/// Reorients, resamples to the network spacing and z-scores an image.
pub fn preprocess(native: &Volume, zscore: ZScoreMode) -> Result<Volume> {
    let (ras, _) = reorient_ras(native)?;
    let net = resample(&ras, &GridSpec::default())?;
    zscore_with(&net, zscore)
}

/// Brings an image and its reference mask onto the network grid, ready for
/// training. The mask is resampled with nearest neighbour.
pub fn prepare_training_case(image: &Volume, mask: &BrainMask, zscore: ZScoreMode) -> Result<(Volume, BrainMask)> {
    image.grid.check_matches(&mask.grid)?;
    let (ras, _) = reorient_ras(image)?;
    let (ras_mask, _) = reorient_mask_ras(mask)?;
    let spec = GridSpec::default();
    let grid = target_grid(&ras.grid, spec.target_spacing)?;
    let img = zscore_with(&resample_to_grid(&ras, &grid, spec.interp)?, zscore)?;
    let msk = resample_mask(&ras_mask, &grid)?;
    Ok((img, msk))
}

/// Full brain extraction of a native-space image.
pub fn extract_brain(native: &Volume, ens: &Ensemble, opts: &PredictOptions) -> Result<Extraction> {
    let (ras, rec) = reorient_ras(native)?;
    let net_vol = zscore_with(&resample(&ras, &GridSpec::default())?, opts.zscore)?;
    let prob = ensemble_predict(ens, &net_vol, opts.tta)?;
    let kept = largest_cc(&BrainMask::from_threshold(&prob, 0.5));
    let cleaned = Volume::new(
        prob.grid.clone(),
        prob.data.iter().zip(&kept.data).map(|(&p, &m)| if m != 0 { p } else { 0.0 }).collect(),
    )?;
    let mask_ras = largest_cc(&mask_to_native(&cleaned, &ras.grid)?);
    let mask = rec.restore_mask(&mask_ras)?;
    let probability = if opts.keep_probability {
        let p = resample_to_grid(&cleaned, &ras.grid, Interp::Trilinear)?;
        Some(rec.restore_volume(&p)?)
    } else {
        None
    };
    Ok(Extraction { mask, probability })
}

#[cfg(test)]
mod tests;
