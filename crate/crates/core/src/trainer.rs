//! Losses, optimiser and the training loop.
//!
//! Every sample drawn during training gets its own seed from
//! [`sample_seed`](crate::augment::sample_seed)`(seed, epoch, slot)`; the case,
//! crop corner and augmentation plan all derive from it, so a run is a pure
//! function of its inputs and configs no matter how many threads augment.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment, sample_seed, AugmentConfig, Patch};
use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::unet::{self, NetConfig, WeightStore, NUM_CLASSES};
use crate::volume::{BrainMask, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub alpha0: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Patch extent along x, y, z.
    pub patch: [usize; 3],
    /// Loss weight per output level: full resolution, 1/2, 1/4, ...
    pub loss_weights: Vec<f64>,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha0: 1e-4,
            decay: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2,
            epochs: 200,
            batches_per_epoch: 200,
            patch: [128; 3],
            loss_weights: vec![1.0, 0.5, 0.25],
            seed: 0,
            folds: 5,
        }
    }
}

impl TrainConfig {
    /// Small profile that trains on one CPU in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            alpha0: 1e-3,
            epochs: 20,
            batches_per_epoch: 50,
            patch: [32; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("batch_size, epochs and batches_per_epoch must be positive".into()));
        }
        let div = net.divisor();
        if self.patch.iter().any(|&p| p == 0 || p % div != 0) {
            return Err(Error::Config(format!(
                "patch {:?} must be divisible by {div} for depth {}",
                self.patch, net.depth
            )));
        }
        let top = net.output_levels().into_iter().max().unwrap_or(0);
        if self.loss_weights.len() <= top {
            return Err(Error::Config(format!(
                "need a loss weight for every output level {:?}, got {:?}",
                net.output_levels(),
                self.loss_weights
            )));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        KvWriter::new()
            .put("alpha0", self.alpha0)
            .put("decay", self.decay)
            .put("beta1", self.beta1)
            .put("beta2", self.beta2)
            .put("adam_eps", self.adam_eps)
            .put("batch_size", self.batch_size)
            .put("epochs", self.epochs)
            .put("batches_per_epoch", self.batches_per_epoch)
            .put_list("patch", &self.patch)
            .put_list("loss_weights", &self.loss_weights)
            .put("seed", self.seed)
            .put("folds", self.folds)
            .finish()
    }

    /// Parses a config; keys not given keep the values of `base`.
    pub fn from_kv(text: &str, base: TrainConfig) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut c = base;
        kv.take("alpha0", &mut c.alpha0)?;
        kv.take("decay", &mut c.decay)?;
        kv.take("beta1", &mut c.beta1)?;
        kv.take("beta2", &mut c.beta2)?;
        kv.take("adam_eps", &mut c.adam_eps)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("epochs", &mut c.epochs)?;
        kv.take("batches_per_epoch", &mut c.batches_per_epoch)?;
        if let Some(p) = kv.take_list::<usize>("patch")? {
            c.patch = match p[..] {
                [n] => [n; 3],
                [x, y, z] => [x, y, z],
                _ => return Err(Error::Parse("patch: expected 1 or 3 values".into())),
            };
        }
        if let Some(w) = kv.take_list("loss_weights")? {
            c.loss_weights = w;
        }
        kv.take("seed", &mut c.seed)?;
        kv.take("folds", &mut c.folds)?;
        kv.finish()?;
        Ok(c)
    }
}

/// Learning rate of an epoch: `alpha0 * decay^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.alpha0 * cfg.decay.powi(epoch as i32)
}

/// One-hot reference (background, brain) for a batch of masks laid out like
/// the network input.
pub fn one_hot<T: Scalar>(masks: &[&[u8]], spatial: [usize; 3]) -> Tensor<T> {
    let s: usize = spatial.iter().product();
    let [d, h, w] = spatial;
    let mut t = Tensor::zeros(&[masks.len(), NUM_CLASSES, d, h, w]);
    for (n, m) in masks.iter().enumerate() {
        let base = n * NUM_CLASSES * s;
        for (i, &v) in m.iter().enumerate() {
            let class = usize::from(v == 1);
            t.data_mut()[base + class * s + i] = T::one();
        }
    }
    t
}

/// Keeps every `factor`-th voxel along each axis, starting at 0.
pub fn downsample_mask(mask: &[u8], dims: [usize; 3], factor: usize) -> Result<(Vec<u8>, [usize; 3])> {
    if factor == 0 || dims.iter().any(|&n| n % factor != 0) {
        return Err(Error::ShapeMismatch(format!("{dims:?} not divisible by {factor}")));
    }
    let out = dims.map(|n| n / factor);
    let mut v = Vec::with_capacity(out.iter().product());
    for k in 0..out[2] {
        for j in 0..out[1] {
            for i in 0..out[0] {
                v.push(mask[i * factor + dims[0] * (j * factor + dims[1] * k * factor)]);
            }
        }
    }
    Ok((v, out))
}

/// Weighted sum of soft dice losses over the output heads; `weights[i]`
/// applies to `heads[i]` and `refs[i]`.
pub fn multiscale_loss<T: Scalar>(tape: &mut Tape<T>, heads: &[Var], refs: &[Tensor<T>], weights: &[f64]) -> Result<Var> {
    if heads.len() != refs.len() || heads.len() > weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} heads, {} references, {} weights",
            heads.len(),
            refs.len(),
            weights.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&h, r), &w) in heads.iter().zip(refs).zip(weights) {
        let l = tape.soft_dice_loss(h, r)?;
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { l } else { tape.scale(l, w) };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// Per-parameter Adam moments, in [`WeightStore`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(ws: &WeightStore) -> Self {
        let zeros = || ws.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(ws: &mut WeightStore, grads: &[Vec<f32>], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != ws.len() || state.m.len() != ws.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment buffers",
            ws.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((_, p), g) in ws.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::ShapeMismatch(format!("gradient of length {} for {:?}", g.len(), p.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((_, p), g), (m, v)) in ws.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.adam_eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Random crop of `patch` voxels (x, y, z); smaller volumes are zero-padded
/// symmetrically first.
pub fn sample_patch(image: &Volume, mask: &BrainMask, patch: [usize; 3], seed: u64) -> Result<Patch> {
    if image.grid.dims != mask.grid.dims {
        return Err(Error::GridMismatch(format!(
            "image {:?} vs mask {:?}",
            image.grid.dims, mask.grid.dims
        )));
    }
    let dims = image.dims();
    let padded = [0, 1, 2].map(|a| dims[a].max(patch[a]));
    let before = [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corner = [0, 1, 2].map(|a| rng.random_range(0..=padded[a] - patch[a]));
    let n: usize = patch.iter().product();
    let mut img = vec![0f32; n];
    let mut msk = vec![0u8; n];
    for k in 0..patch[2] {
        for j in 0..patch[1] {
            for i in 0..patch[0] {
                let q = [i + corner[0], j + corner[1], k + corner[2]];
                let inside = (0..3).all(|a| q[a] >= before[a] && q[a] - before[a] < dims[a]);
                if inside {
                    let s = image.grid.index(q[0] - before[0], q[1] - before[1], q[2] - before[2]);
                    let d = i + patch[0] * (j + patch[1] * k);
                    img[d] = image.data[s];
                    msk[d] = mask.data[s];
                }
            }
        }
    }
    Patch::new(patch, img, msk)
}

/// Shuffles `ids` and deals them into `k` folds whose sizes differ by at
/// most one.
pub fn kfold_split<T: Clone>(ids: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if k == 0 || ids.len() < k {
        return Err(Error::TooFewCases {
            needed: k,
            got: ids.len(),
        });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % k].push(ids[i].clone());
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: WeightStore,
    pub history: Vec<EpochStats>,
}

/// One augmented training sample for `(epoch, slot)`.
fn draw_sample(
    dataset: &[(Volume, BrainMask)],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    epoch: usize,
    slot: usize,
) -> Result<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch as u64, slot as u64));
    let case = rng.random_range(0..dataset.len());
    let crop_seed: u64 = rng.random();
    let aug_seed: u64 = rng.random();
    let (img, msk) = &dataset[case];
    let p = sample_patch(img, msk, cfg.patch, crop_seed)?;
    Ok(augment(&p, aug, aug_seed))
}

/// Loss and parameter gradients (in weight-store order) for one batch.
pub fn batch_gradients(
    ws: &WeightStore,
    net: &NetConfig,
    patches: &[Patch],
    weights: &[f64],
) -> Result<(f64, Vec<Vec<f32>>)> {
    let dims = patches[0].dims;
    let spatial = [dims[2], dims[1], dims[0]];
    let mut x = Vec::with_capacity(patches.len() * dims.iter().product::<usize>());
    for p in patches {
        x.extend_from_slice(&p.image);
    }
    let x = Tensor::new(vec![patches.len(), 1, spatial[0], spatial[1], spatial[2]], x)?;
    let levels = net.output_levels();
    let mut refs = Vec::with_capacity(levels.len());
    for &l in &levels {
        let f = 1 << l;
        let down: Vec<(Vec<u8>, [usize; 3])> = patches
            .iter()
            .map(|p| downsample_mask(&p.mask, p.dims, f))
            .collect::<Result<_>>()?;
        let d = down[0].1;
        let views: Vec<&[u8]> = down.iter().map(|(m, _)| m.as_slice()).collect();
        refs.push(one_hot::<f32>(&views, [d[2], d[1], d[0]]));
    }
    let level_weights: Vec<f64> = levels.iter().map(|&l| weights[l]).collect();

    let mut tape = Tape::new();
    let params = unet::bind_params(&mut tape, ws, true);
    let xv = tape.constant(x);
    let heads = unet::forward(&mut tape, &params, net, xv)?;
    let loss = multiscale_loss(&mut tape, &heads, &refs, &level_weights)?;
    let value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let grads = params
        .values()
        .map(|&v| {
            let n = tape.value(v).numel();
            tape.take_grad(v).unwrap_or_else(|| vec![0.0; n])
        })
        .collect();
    Ok((value, grads))
}

/// Trains a fresh network on preprocessed cases (image on the network grid,
/// mask on the same grid). `progress` is called after every epoch.
pub fn train(
    dataset: &[(Volume, BrainMask)],
    net: &NetConfig,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    net.validate()?;
    cfg.validate(net)?;
    aug.validate()?;
    let mut ws = unet::build(net, cfg.seed)?;
    let mut adam = AdamState::new(&ws);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut total = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let first = batch * cfg.batch_size;
            let patches: Vec<Patch> = (first..first + cfg.batch_size)
                .into_par_iter()
                .map(|slot| draw_sample(dataset, cfg, aug, epoch, slot))
                .collect::<Result<_>>()?;
            let (loss, grads) = batch_gradients(&ws, net, &patches, &cfg.loss_weights)?;
            if !loss.is_finite() {
                return Err(Error::Config(format!("loss diverged at epoch {epoch}, batch {batch}")));
            }
            adam_step(&mut ws, &grads, &mut adam, lr, cfg)?;
            total += loss;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / cfg.batches_per_epoch as f64,
            lr,
        };
        progress(&stats);
        history.push(stats);
    }
    Ok(TrainOutput { weights: ws, history })
}

/// Writes `epoch,mean_loss,lr` rows.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut body = String::from("epoch,mean_loss,lr\n");
    for s in history {
        body.push_str(&format!("{},{},{}\n", s.epoch, s.mean_loss, s.lr));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io_at(path, e))
}
