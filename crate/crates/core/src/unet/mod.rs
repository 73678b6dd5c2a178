//! Residual 3D U-Net with deep supervision.
//!
//! Encoder level 0 is a 3³ stem convolution followed by one pre-activation
//! residual block; every deeper level halves the resolution with a stride-2
//! 3³ convolution and adds another residual block. Each decoder level
//! upsamples trilinearly, convolves down to the skip width, concatenates the
//! skip, recombines with a 3³ convolution and halves the channels with a 1³
//! convolution. Softmax heads sit at full resolution and at every level in
//! [`NetConfig::aux_levels`].
//!
//! The same topology runs on a [`Tape`] (training, gradient checks) or
//! eagerly without recording (inference); both paths call the same kernels
//! and agree bit for bit.

mod weights;

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use weights::WeightStore;

use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::tensor::{eager, Scalar, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;
pub const MAX_WIDTH: usize = 320;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Number of resolution levels.
    pub depth: usize,
    /// Channels at level 0; doubled per level up to [`MAX_WIDTH`].
    pub base_width: usize,
    pub leaky_slope: f64,
    pub in_eps: f64,
    /// Levels carrying auxiliary heads; level `l` works at scale `2^-l`.
    pub aux_levels: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::new(5, 16)
    }
}

impl NetConfig {
    /// Config with default slope/eps and auxiliary heads at scales 1/2 and
    /// 1/4 where the network is deep enough to have them.
    pub fn new(depth: usize, base_width: usize) -> Self {
        NetConfig {
            depth,
            base_width,
            leaky_slope: 0.01,
            in_eps: 1e-5,
            aux_levels: (1..=2).filter(|&l| l < depth).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.depth) {
            return Err(Error::Config(format!("depth must be in 2..=8, got {}", self.depth)));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!("base_width must be >= 4, got {}", self.base_width)));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config(format!("invalid leaky slope {}", self.leaky_slope)));
        }
        if !(self.in_eps > 0.0 && self.in_eps.is_finite()) {
            return Err(Error::Config(format!("instance norm eps must be positive, got {}", self.in_eps)));
        }
        let mut seen = vec![false; self.depth];
        for &l in &self.aux_levels {
            if l == 0 || l >= self.depth || std::mem::replace(&mut seen[l], true) {
                return Err(Error::Config(format!(
                    "auxiliary levels must be distinct and in 1..{}, got {:?}",
                    self.depth, self.aux_levels
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(MAX_WIDTH)
    }

    /// Levels of the outputs returned by the forward pass, in order: 0 first,
    /// then the auxiliary levels ascending.
    pub fn output_levels(&self) -> Vec<usize> {
        let mut aux = self.aux_levels.clone();
        aux.sort_unstable();
        std::iter::once(0).chain(aux).collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn to_kv(&self) -> String {
        KvWriter::new()
            .put("depth", self.depth)
            .put("base_width", self.base_width)
            .put("leaky_slope", self.leaky_slope)
            .put("in_eps", self.in_eps)
            .put_list("aux_levels", &self.aux_levels)
            .finish()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut cfg = NetConfig::default();
        kv.take("depth", &mut cfg.depth)?;
        kv.take("base_width", &mut cfg.base_width)?;
        kv.take("leaky_slope", &mut cfg.leaky_slope)?;
        kv.take("in_eps", &mut cfg.in_eps)?;
        cfg.aux_levels = match kv.take_list("aux_levels")? {
            Some(v) => v,
            None => NetConfig::new(cfg.depth, cfg.base_width).aux_levels,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

fn conv_specs(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
    out.push((
        format!("{prefix}.w"),
        vec![cout, cin, k, k, k],
        Init::HeUniform { fan_in: cin * k * k * k },
    ));
    if bias {
        out.push((format!("{prefix}.b"), vec![cout], Init::Zeros));
    }
}

fn norm_specs(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize) {
    out.push((format!("{prefix}.gamma"), vec![c], Init::Ones));
    out.push((format!("{prefix}.beta"), vec![c], Init::Zeros));
}

/// Every parameter of the network in canonical order.
///
/// Convolutions that feed straight into an instance norm carry no bias: the
/// normalisation would cancel it.
fn param_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut s = Vec::new();
    for l in 0..cfg.depth {
        let w = cfg.width(l);
        if l == 0 {
            conv_specs(&mut s, "enc0.stem", 1, w, 3, true);
        } else {
            conv_specs(&mut s, &format!("enc{l}.down"), cfg.width(l - 1), w, 3, true);
        }
        let p = format!("enc{l}.res");
        norm_specs(&mut s, &format!("{p}.norm1"), w);
        conv_specs(&mut s, &format!("{p}.conv1"), w, w, 3, false);
        norm_specs(&mut s, &format!("{p}.norm2"), w);
        conv_specs(&mut s, &format!("{p}.conv2"), w, w, 3, true);
    }
    for l in (0..cfg.depth - 1).rev() {
        let w = cfg.width(l);
        conv_specs(&mut s, &format!("dec{l}.up"), cfg.width(l + 1), w, 3, false);
        norm_specs(&mut s, &format!("dec{l}.up_norm"), w);
        conv_specs(&mut s, &format!("dec{l}.mix"), 2 * w, 2 * w, 3, false);
        norm_specs(&mut s, &format!("dec{l}.mix_norm"), 2 * w);
        conv_specs(&mut s, &format!("dec{l}.half"), 2 * w, w, 1, false);
        norm_specs(&mut s, &format!("dec{l}.half_norm"), w);
    }
    for l in cfg.output_levels() {
        conv_specs(&mut s, &format!("head{l}"), cfg.width(l), NUM_CLASSES, 1, true);
    }
    s
}

/// Fresh weights: He-uniform kernels, zero biases, unit IN scales.
pub fn build(cfg: &NetConfig, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightStore::new();
    for (name, shape, init) in param_specs(cfg) {
        let t = match init {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
            }
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
        };
        ws.insert(name, t)?;
    }
    Ok(ws)
}

/// Checks that `ws` holds exactly the parameters `cfg` requires.
pub fn check_weights(ws: &WeightStore, cfg: &NetConfig) -> Result<()> {
    let specs = param_specs(cfg);
    if specs.len() != ws.len() {
        return Err(Error::ShapeHeaderMismatch(format!(
            "config expects {} tensors, weights hold {}",
            specs.len(),
            ws.len()
        )));
    }
    for (name, shape, _) in specs {
        match ws.get(&name) {
            None => return Err(Error::ShapeHeaderMismatch(format!("missing tensor {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::ShapeHeaderMismatch(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Path of the config sidecar next to a weight file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("cfg")
}

/// Writes the weights and their config sidecar.
pub fn save_model(path: &Path, cfg: &NetConfig, ws: &WeightStore) -> Result<()> {
    ws.save(path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, cfg.to_kv()).map_err(|e| Error::io_at(side, e))
}

/// Reads weights plus sidecar and checks that they agree.
pub fn load_model(path: &Path) -> Result<(NetConfig, WeightStore)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io_at(side, e))?;
    let cfg = NetConfig::from_kv(&text)?;
    let ws = WeightStore::load(path)?;
    check_weights(&ws, &cfg)?;
    Ok((cfg, ws))
}

fn missing(name: &str) -> Error {
    Error::Config(format!("missing parameter {name}"))
}

/// Operations the topology is written against.
trait Backend {
    type H;
    fn conv(&mut self, x: &Self::H, prefix: &str, bias: bool, stride: usize, pad: usize) -> Result<Self::H>;
    /// Instance norm followed by leaky ReLU.
    fn norm_act(&mut self, x: &Self::H, prefix: &str) -> Result<Self::H>;
    fn upsample(&mut self, x: &Self::H) -> Result<Self::H>;
    fn concat(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn softmax(&mut self, x: &Self::H) -> Result<Self::H>;
}

/// Parameters bound to tape leaves, by name.
pub type ParamVars = IndexMap<String, Var>;

/// Puts every weight on `tape` (cast to `T`).
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, ws: &WeightStore, requires_grad: bool) -> ParamVars {
    ws.iter()
        .map(|(name, t)| (name.to_string(), tape.leaf(t.cast(), requires_grad)))
        .collect()
}

struct TapeBackend<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    params: &'a ParamVars,
    slope: f64,
    eps: f64,
}

impl<T: Scalar> TapeBackend<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name).copied().ok_or_else(|| missing(name))
    }
}

impl<T: Scalar> Backend for TapeBackend<'_, T> {
    type H = Var;

    fn conv(&mut self, x: &Var, prefix: &str, bias: bool, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = if bias { Some(self.p(&format!("{prefix}.b"))?) } else { None };
        self.tape.conv3d(*x, w, b, stride, pad)
    }

    fn norm_act(&mut self, x: &Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        let n = self.tape.instance_norm(*x, g, b, self.eps)?;
        Ok(self.tape.leaky_relu(n, self.slope))
    }

    fn upsample(&mut self, x: &Var) -> Result<Var> {
        self.tape.upsample_trilinear2(*x)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.concat_channels(*a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn softmax(&mut self, x: &Var) -> Result<Var> {
        self.tape.softmax_channels(*x)
    }
}

struct EagerBackend<'a> {
    ws: &'a WeightStore,
    slope: f64,
    eps: f64,
}

impl EagerBackend<'_> {
    fn p(&self, name: &str) -> Result<&Tensor<f32>> {
        self.ws.get(name).ok_or_else(|| missing(name))
    }
}

impl Backend for EagerBackend<'_> {
    type H = Tensor<f32>;

    fn conv(&mut self, x: &Self::H, prefix: &str, bias: bool, stride: usize, pad: usize) -> Result<Self::H> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = if bias { Some(self.p(&format!("{prefix}.b"))?) } else { None };
        eager::conv3d(x, w, b, stride, pad)
    }

    fn norm_act(&mut self, x: &Self::H, prefix: &str) -> Result<Self::H> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        let mut y = eager::instance_norm(x, g, b, self.eps)?;
        eager::leaky_relu_inplace(&mut y, self.slope);
        Ok(y)
    }

    fn upsample(&mut self, x: &Self::H) -> Result<Self::H> {
        eager::upsample_trilinear2(x)
    }

    fn concat(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        eager::concat_channels(a, b)
    }

    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        eager::add(a, b)
    }

    fn softmax(&mut self, x: &Self::H) -> Result<Self::H> {
        eager::softmax_channels(x)
    }
}

fn residual_block<B: Backend>(b: &mut B, x: &B::H, prefix: &str) -> Result<B::H> {
    let mut h = b.norm_act(x, &format!("{prefix}.norm1"))?;
    h = b.conv(&h, &format!("{prefix}.conv1"), false, 1, 1)?;
    h = b.norm_act(&h, &format!("{prefix}.norm2"))?;
    h = b.conv(&h, &format!("{prefix}.conv2"), true, 1, 1)?;
    b.add(&h, x)
}

fn check_input(shape: &[usize], cfg: &NetConfig) -> Result<()> {
    let div = cfg.divisor();
    if shape.len() != 5 || shape[1] != 1 || shape[2..].iter().any(|&s| s == 0 || s % div != 0) {
        return Err(Error::ShapeMismatch(format!(
            "network input must be N x 1 x D x H x W with spatial extents divisible by {div}, got {shape:?}"
        )));
    }
    Ok(())
}

fn run<B: Backend>(b: &mut B, cfg: &NetConfig, x: &B::H) -> Result<Vec<B::H>> {
    cfg.validate()?;
    let levels = cfg.output_levels();
    let mut heads: Vec<Option<B::H>> = (0..levels.len()).map(|_| None).collect();
    let mut head = |b: &mut B, h: &B::H, level: usize| -> Result<()> {
        if let Some(slot) = levels.iter().position(|&l| l == level) {
            let logits = b.conv(h, &format!("head{level}"), true, 1, 0)?;
            heads[slot] = Some(b.softmax(&logits)?);
        }
        Ok(())
    };

    let mut skips = Vec::with_capacity(cfg.depth - 1);
    let mut h = b.conv(x, "enc0.stem", true, 1, 1)?;
    h = residual_block(b, &h, "enc0.res")?;
    for l in 1..cfg.depth {
        let down = b.conv(&h, &format!("enc{l}.down"), true, 2, 1)?;
        skips.push(h);
        h = residual_block(b, &down, &format!("enc{l}.res"))?;
    }
    head(b, &h, cfg.depth - 1)?;

    for l in (0..cfg.depth - 1).rev() {
        h = b.upsample(&h)?;
        h = b.conv(&h, &format!("dec{l}.up"), false, 1, 1)?;
        h = b.norm_act(&h, &format!("dec{l}.up_norm"))?;
        let skip = skips.pop().expect("one skip per level");
        h = b.concat(&skip, &h)?;
        drop(skip);
        h = b.conv(&h, &format!("dec{l}.mix"), false, 1, 1)?;
        h = b.norm_act(&h, &format!("dec{l}.mix_norm"))?;
        h = b.conv(&h, &format!("dec{l}.half"), false, 1, 0)?;
        h = b.norm_act(&h, &format!("dec{l}.half_norm"))?;
        head(b, &h, l)?;
    }
    Ok(heads.into_iter().map(|h| h.expect("every output level visited")).collect())
}

/// Records the network on `tape`. Returns softmax outputs in
/// [`NetConfig::output_levels`] order.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, params: &ParamVars, cfg: &NetConfig, x: Var) -> Result<Vec<Var>> {
    check_input(tape.shape(x), cfg)?;
    let mut b = TapeBackend {
        tape,
        params,
        slope: cfg.leaky_slope,
        eps: cfg.in_eps,
    };
    run(&mut b, cfg, &x)
}

/// Evaluates the network without recording a graph.
pub fn forward_eager(ws: &WeightStore, cfg: &NetConfig, x: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    check_input(x.shape(), cfg)?;
    let mut b = EagerBackend {
        ws,
        slope: cfg.leaky_slope,
        eps: cfg.in_eps,
    };
    run(&mut b, cfg, x)
}
