//! Central finite-difference checks of every differentiable operation, run
//! in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::{downsample_mask, multiscale_loss, one_hot};
use crate::unet::{self, NetConfig, ParamVars};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(inputs: &[Tensor<f64>], f: &LossFn, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grads)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).data()[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, g))
}

/// Compares analytic gradients with central differences at up to
/// `per_input` random coordinates of every input.
///
/// The error of a coordinate is `|a - fd| / max(|a|, |fd|, 1e-3 * scale)`,
/// where `scale` is the largest analytic gradient magnitude of that input.
pub fn check(name: &str, inputs: &[Tensor<f64>], per_input: usize, seed: u64, f: &LossFn) -> Result<CheckResult> {
    let (_, analytic) = evaluate(inputs, f, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (which, grad) in analytic.iter().enumerate() {
        let n = inputs[which].numel();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for idx in sample(&mut rng, n, per_input.min(n)) {
            let x = inputs[which].data()[idx];
            let h = 1e-6 * x.abs().max(1.0);
            let mut moved = inputs.to_vec();
            moved[which].data_mut()[idx] = x + h;
            let up = evaluate(&moved, f, false)?.0;
            moved[which].data_mut()[idx] = x - h;
            let down = evaluate(&moved, f, false)?.0;
            let fd = (up - down) / (2.0 * h);
            let a = grad[idx];
            let denom = a.abs().max(fd.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE);
            worst = worst.max((a - fd).abs() / denom);
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so central differences never straddle
/// the leaky ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)` for a fixed random `r`, turning any op into a scalar loss.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let m = tape.mul(y, r)?;
    Ok(tape.sum(m))
}

fn network_check(seed: u64, per_input: usize) -> Result<CheckResult> {
    let net = NetConfig::new(2, 4);
    let ws = unet::build(&net, seed)?;
    let names: Vec<String> = ws.iter().map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs: Vec<Tensor<f64>> = ws
        .iter()
        .map(|(name, t)| {
            let mut t: Tensor<f64> = t.cast();
            // non-trivial affine and bias terms exercise every path
            if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
            t
        })
        .collect();
    let (n, side) = (2, 8);
    inputs.push(random(&mut rng, &[n, 1, side, side, side], -1.5, 1.5));
    let masks: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..side * side * side).map(|_| u8::from(rng.random_bool(0.4))).collect())
        .collect();
    let levels = net.output_levels();
    let refs: Vec<Tensor<f64>> = levels
        .iter()
        .map(|&l| {
            let down: Vec<(Vec<u8>, [usize; 3])> = masks
                .iter()
                .map(|m| downsample_mask(m, [side; 3], 1 << l))
                .collect::<Result<_>>()?;
            let d = down[0].1;
            let views: Vec<&[u8]> = down.iter().map(|(m, _)| m.as_slice()).collect();
            Ok(one_hot(&views, [d[2], d[1], d[0]]))
        })
        .collect::<Result<_>>()?;
    let weights = [1.0, 0.5, 0.25];
    let f = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let params: ParamVars = names.iter().cloned().zip(vars.iter().copied()).collect();
        let x = *vars.last().expect("input var");
        let heads = unet::forward(tape, &params, &net, x)?;
        multiscale_loss(tape, &heads, &refs, &weights[..heads.len()])
    };
    check("network (depth 2, multiscale loss)", &inputs, per_input, seed, &f)
}

/// Runs the full suite; each entry reports the worst coordinate.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let k = 24;

    for (name, shape_x, shape_w, stride, pad) in [
        ("conv3d 3x3x3", [2, 3, 5, 4, 6], [4, 3, 3, 3, 3], 1, 1),
        ("conv3d stride 2", [1, 2, 7, 6, 5], [3, 2, 3, 3, 3], 2, 1),
        ("conv3d 1x1x1", [2, 4, 3, 3, 2], [2, 4, 1, 1, 1], 1, 0),
    ] {
        let cout = shape_w[0];
        let inputs = vec![
            random(&mut rng, &shape_x, -1.0, 1.0),
            random(&mut rng, &shape_w, -0.5, 0.5),
            random(&mut rng, &[cout], -0.5, 0.5),
        ];
        let s = rng.random();
        out.push(check(name, &inputs, k, s, &move |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, s)
        })?);
    }

    let inputs = vec![
        random(&mut rng, &[2, 3, 4, 5, 3], -2.0, 2.0),
        random(&mut rng, &[3], 0.5, 1.5),
        random(&mut rng, &[3], -0.5, 0.5),
    ];
    let s = rng.random();
    out.push(check("instance_norm", &inputs, k, s, &move |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, s)
    })?);

    let inputs = vec![away_from_zero(&mut rng, &[2, 2, 3, 4, 3])];
    let s = rng.random();
    out.push(check("leaky_relu", &inputs, k, s, &move |t, v| {
        let y = t.leaky_relu(v[0], 0.01);
        project(t, y, s)
    })?);

    let inputs = vec![random(&mut rng, &[1, 2, 3, 4, 2], -1.0, 1.0)];
    let s = rng.random();
    out.push(check("upsample_trilinear", &inputs, k, s, &move |t, v| {
        let y = t.upsample_trilinear2(v[0])?;
        project(t, y, s)
    })?);

    let inputs = vec![random(&mut rng, &[2, 3, 3, 2, 4], -3.0, 3.0)];
    let s = rng.random();
    out.push(check("softmax", &inputs, k, s, &move |t, v| {
        let y = t.softmax_channels(v[0])?;
        project(t, y, s)
    })?);

    let inputs = vec![random(&mut rng, &[2, 2, 4, 3, 3], -2.0, 2.0)];
    let masks: Vec<Vec<u8>> = (0..2).map(|_| (0..36).map(|_| u8::from(rng.random_bool(0.5))).collect()).collect();
    let views: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
    let target: Tensor<f64> = one_hot(&views, [4, 3, 3]);
    out.push(check("soft_dice_loss", &inputs, k, rng.random(), &move |t, v| {
        let u = t.softmax_channels(v[0])?;
        t.soft_dice_loss(u, &target)
    })?);

    let inputs = vec![
        random(&mut rng, &[1, 2, 2, 2, 2], -1.0, 1.0),
        random(&mut rng, &[1, 3, 2, 2, 2], -1.0, 1.0),
    ];
    let s = rng.random();
    out.push(check("concat, slice, add, mul, scale", &inputs, k, s, &move |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        let a = t.slice_channels(c, 1, 3)?;
        let b = t.slice_channels(c, 0, 3)?;
        let sum = t.add(a, b)?;
        let prod = t.mul(sum, a)?;
        let y = t.scale(prod, -0.7);
        project(t, y, s)
    })?);

    out.push(network_check(rng.random(), 40)?);
    Ok(out)
}
