use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Straight seven-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, d, h, wd] = spatial5(x.shape()).unwrap();
    let [co, _, k, _, _] = spatial5(w.shape()).unwrap();
    let o = |len: usize| (len + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut out = Tensor::zeros(&[n, co, od, oh, ow]);
    let xv = |s: usize, c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[(((s * ci + c) * d + z as usize) * h + y as usize) * wd + xx as usize]
        }
    };
    for s in 0..n {
        for oc in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[oc];
                        for c in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = w.data()[(((oc * ci + c) * k + kz) * k + ky) * k + kx];
                                        acc += wv
                                            * xv(
                                                s,
                                                c,
                                                (z * stride + kz) as isize - pad as isize,
                                                (y * stride + ky) as isize - pad as isize,
                                                (xx * stride + kx) as isize - pad as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((s * co + oc) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Central finite differences of `f` at `inputs[which]`, checked against the
/// analytic gradient on up to `samples` coordinates.
fn fd_check(
    inputs: &[Tensor<f64>],
    which: usize,
    samples: usize,
    seed: u64,
    skip: impl Fn(&[Tensor<f64>], usize) -> bool,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let run = |vals: &[Tensor<f64>]| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), i == which))
            .collect();
        let loss = f(&mut tape, &vars);
        let value = tape.value(loss).data()[0];
        tape.backward(loss).unwrap();
        (value, tape.grad(vars[which]).map(|g| g.to_vec()).unwrap_or_default())
    };
    let (_, analytic) = run(inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let n = inputs[which].numel();
    for _ in 0..samples.min(n) {
        let idx = rng.random_range(0..n);
        if skip(inputs, idx) {
            continue;
        }
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[idx] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[idx] -= h;
        let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
        let a = analytic.get(idx).copied().unwrap_or(0.0);
        worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, tape.shape(y));
    let c = tape.constant(r);
    let prod = tape.mul(y, c).unwrap();
    tape.sum(prod)
}

#[test]
fn identity_kernel_conv_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 4, 5]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv3d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn all_ones_kernel_counts_neighbours() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let y = tape.conv3d(x, w, None, 1, 1).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[13], 27.0);
    for corner in [0, 2, 6, 8, 18, 20, 24, 26] {
        assert_eq!(v[corner], 8.0);
    }
    assert_eq!(v[1], 12.0); // edge voxel: 2*3*2
    assert_eq!(v[4], 18.0); // face centre: 3*3*2
}

#[test]
fn strided_conv_shape() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3, 3]));
    let y = tape.conv3d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 4, 4, 4]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    assert!(matches!(tape.conv3d(x, w, None, 1, 1), Err(Error::ShapeMismatch(_))));
    let w_even = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    assert!(tape.conv3d(x, w_even, None, 1, 0).is_err());
}

#[test]
fn conv_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3), (2, 0, 1)] {
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, k, k, k]);
        let b = rand_tensor(&mut rng, &[3]);
        let expect = naive_conv(&x, &w, b.data(), stride, pad);
        // the f32 path, as used in training
        let mut tape: Tape<f32> = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.cast()), tape.constant(w.cast()), tape.constant(b.cast()));
        let y = tape.conv3d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(tape.shape(y), expect.shape());
        for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
            assert!((*a as f64 - e).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, 4, 4, 4]),
            rand_tensor(&mut rng, &[3, 2, k, k, k]),
            rand_tensor(&mut rng, &[3]),
        ];
        for which in 0..3 {
            let err = fd_check(&inputs, which, 10, 3, |_, _| false, |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                weighted_sum(t, y, 99)
            });
            assert!(err <= 1e-4, "conv input {which} s{stride} p{pad}: {err}");
        }
    }
}

#[test]
fn instance_norm_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 3.0));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.instance_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::new(vec![1, 1, 2], vec![-1.0, 1.0]).unwrap());
    let y = tape.instance_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);

    let x = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.3, -2.0, 9.0]).unwrap());
    let g0 = tape.constant(Tensor::zeros(&[1]));
    let b5 = tape.constant(Tensor::full(&[1], 5.0));
    let y = tape.instance_norm(x, g0, b5, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn instance_norm_normalises_each_sample_independently() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = rand_tensor(&mut rng, &[2, 3, 2, 3, 4]);
    // make sample 1 wildly different; sample 0 output must not change
    let before = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.instance_norm(xv, g, b, 1e-5).unwrap();
        tape.value(y).data()[..72].to_vec()
    };
    x.data_mut()[72..].iter_mut().for_each(|v| *v = *v * 100.0 + 7.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.instance_norm(xv, g, b, 1e-5).unwrap();
    assert_eq!(&tape.value(y).data()[..72], &before[..]);
}

#[test]
fn instance_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 3, 3, 3, 3]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[3]),
    ];
    for which in 0..3 {
        let err = fd_check(&inputs, which, 10, 4, |_, _| false, |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, y, 17)
        });
        assert!(err <= 1e-4, "instance norm input {which}: {err}");
    }
}

#[test]
fn leaky_relu_values_and_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![2.0, -3.0, -1.0]).unwrap(), true);
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y).data()[0], 2.0);
    assert!((tape.value(y).data()[1] + 0.03).abs() < 1e-15);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.01, 0.01]);

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), true);
    let y = tape.leaky_relu(x, 0.2);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.2]);
}

#[test]
fn leaky_relu_gradient_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs = vec![rand_tensor(&mut rng, &[1, 2, 3, 3, 3])];
    let err = fd_check(
        &inputs,
        0,
        10,
        8,
        |ins, i| ins[0].data()[i].abs() < 1e-3,
        |t, v| {
            let y = t.leaky_relu(v[0], 0.01);
            weighted_sum(t, y, 21)
        },
    );
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn upsample_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 1, 1], vec![0.0, 1.0]).unwrap());
    let y = tape.upsample_trilinear2(x).unwrap();
    // every axis doubles; read the D column at (y, x) = (0, 0)
    let column: Vec<f64> = tape.value(y).data().iter().step_by(4).copied().collect();
    assert_eq!(column, [0.0, 0.25, 0.75, 1.0]);

    let c = tape.constant(Tensor::full(&[1, 4, 5, 6, 7], 2.5));
    let y = tape.upsample_trilinear2(c).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 10, 12, 14]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
}

#[test]
fn upsample_gradient_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let inputs = vec![rand_tensor(&mut rng, &[1, 2, 2, 3, 4])];
    let err = fd_check(&inputs, 0, 10, 9, |_, _| false, |t, v| {
        let y = t.upsample_trilinear2(v[0]).unwrap();
        weighted_sum(t, y, 23)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn concat_and_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let b = rand_tensor(&mut rng, &[1, 3, 4, 4, 4]);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone(), true);
    let bv = tape.leaf(b, true);
    let c = tape.concat_channels(av, bv).unwrap();
    assert_eq!(tape.shape(c), &[1, 5, 4, 4, 4]);
    let first = tape.slice_channels(c, 0, 2).unwrap();
    assert_eq!(tape.value(first), &a);
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    assert!(tape.grad(av).unwrap().iter().all(|&g| g == 1.0));

    let bad = tape.constant(Tensor::zeros(&[1, 1, 4, 4, 3]));
    assert!(matches!(tape.concat_channels(av, bad), Err(Error::ShapeMismatch(_))));
}

#[test]
fn concat_gradient_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let inputs = vec![rand_tensor(&mut rng, &[2, 1, 2, 2, 2]), rand_tensor(&mut rng, &[2, 2, 2, 2, 2])];
    for which in 0..2 {
        let err = fd_check(&inputs, which, 10, 10, |_, _| false, |t, v| {
            let c = t.concat_channels(v[0], v[1]).unwrap();
            let s = t.slice_channels(c, 1, 2).unwrap();
            let q = t.mul(s, s).unwrap();
            t.sum(q)
        });
        assert!(err <= 1e-4, "{err}");
    }
}

#[test]
fn add_and_softmax_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[1, 2, 2, 2, 2]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    let s = tape.add(xv, z).unwrap();
    assert_eq!(tape.value(s), &x);
    let other = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 1]));
    assert!(tape.add(xv, other).is_err());

    let logits = tape.constant(Tensor::new(vec![1, 2, 1], vec![0.0, 0.0]).unwrap());
    let p = tape.softmax_channels(logits).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let logits = tape.constant(Tensor::new(vec![1, 2, 1], vec![1000.0, 0.0]).unwrap());
    let p = tape.softmax_channels(logits).unwrap();
    let v = tape.value(p).data();
    // e^-1000 underflows to exactly zero in f64
    assert_eq!(v, &[1.0, 0.0]);
    assert!(v.iter().all(|x| x.is_finite()));
}

#[test]
fn softmax_gradient_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let inputs = vec![rand_tensor(&mut rng, &[2, 3, 2, 2, 2])];
    let err = fd_check(&inputs, 0, 10, 12, |_, _| false, |t, v| {
        let y = t.softmax_channels(v[0]).unwrap();
        weighted_sum(t, y, 41)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn backward_basics() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 2, 2], 1.5), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    // second call accumulates
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::full(&[1], 3.0), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    assert!(matches!(tape.backward(sq), Ok(())));
    let v = tape.leaf(Tensor::zeros(&[3]), true);
    assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn composite_graph_gradient_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let inputs = vec![
        rand_tensor(&mut rng, &[1, 1, 4, 4, 4]),
        rand_tensor(&mut rng, &[2, 1, 3, 3, 3]),
        rand_tensor(&mut rng, &[2]),
        rand_tensor(&mut rng, &[2]),
    ];
    for which in 0..4 {
        let err = fd_check(&inputs, which, 10, 14, |_, _| false, |t, v| {
            let h = t.conv3d(v[0], v[1], None, 2, 1).unwrap();
            let n = t.instance_norm(h, v[2], v[3], 1e-5).unwrap();
            let a = t.leaky_relu(n, 0.3);
            let u = t.upsample_trilinear2(a).unwrap();
            let p = t.softmax_channels(u).unwrap();
            let sc = t.scale(p, 1.7);
            weighted_sum(t, sc, 51)
        });
        assert!(err <= 1e-4, "input {which}: {err}");
    }
}

#[test]
fn soft_dice_values_and_gradient() {
    // perfect prediction
    let v = Tensor::new(vec![1, 2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let u = tape.constant(v.clone());
    let l = tape.soft_dice_loss(u, &v).unwrap();
    assert_eq!(tape.value(l).data()[0], -1.0);

    // uniform 0.5 on 8 voxels, 4 foreground
    let mut onehot = vec![0.0; 16];
    for i in 0..8 {
        let fg = i < 4;
        onehot[if fg { 8 + i } else { i }] = 1.0;
    }
    let v = Tensor::new(vec![1, 2, 8], onehot).unwrap();
    let u = tape.constant(Tensor::full(&[1, 2, 8], 0.5));
    let l = tape.soft_dice_loss(u, &v).unwrap();
    assert!((tape.value(l).data()[0] + 0.5).abs() < 1e-15);

    let bad = tape.constant(Tensor::full(&[1, 2, 7], 0.5));
    assert!(tape.soft_dice_loss(bad, &v).is_err());

    // through softmax, random logits on a 2^3 patch
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let logits = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);
    let mut onehot = Tensor::zeros(&[2, 2, 2, 2, 2]);
    for n in 0..2 {
        for i in 0..8 {
            let fg = rng.random_bool(0.5);
            onehot.data_mut()[n * 16 + if fg { 8 } else { 0 } + i] = 1.0;
        }
    }
    let err = fd_check(&[logits], 0, 16, 15, |_, _| false, |t, v| {
        let p = t.softmax_channels(v[0]).unwrap();
        t.soft_dice_loss(p, &onehot).unwrap()
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn flip_spatial_is_an_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 4, 5]);
    for m in 0..8u8 {
        assert_eq!(x.flip_spatial(m).unwrap().flip_spatial(m).unwrap(), x);
    }
    let f = x.flip_spatial(4).unwrap();
    // D axis flip: (c, z, y, x) -> (c, 2 - z, y, x)
    assert_eq!(f.data()[0], x.data()[2 * 20]);
}

#[test]
fn forward_is_deterministic_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = rand_tensor(&mut rng, &[3, 2, 6, 6, 6]).cast::<f32>();
    let w = rand_tensor(&mut rng, &[4, 2, 3, 3, 3]).cast::<f32>();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut tape: Tape<f32> = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv3d(xv, wv, None, 1, 1).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            (tape.value(y).clone(), tape.grad(wv).unwrap().to_vec())
        })
    };
    assert_eq!(run(1), run(3));
}
