use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::unet::build;
use crate::volume::{Affine, Grid};

fn net() -> NetConfig {
    NetConfig::new(3, 4)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Network whose softmax is the same everywhere, with brain probability `p`.
fn constant_member(p: f64, seed: u64) -> WeightStore {
    let mut ws = build(&net(), seed).unwrap();
    ws.get_mut("head0.w").unwrap().data_mut().fill(0.0);
    let logit = (p / (1.0 - p)).ln() as f32;
    ws.get_mut("head0.b").unwrap().data_mut().copy_from_slice(&[0.0, logit]);
    ws
}

fn volume(dims: [usize; 3], affine: Affine, f: impl Fn(usize) -> f32) -> Volume {
    let grid = Grid::new(dims, affine).unwrap();
    let n = grid.len();
    Volume::new(grid, (0..n).map(f).collect()).unwrap()
}

fn iso_affine(s: f64) -> Affine {
    [[s, 0.0, 0.0, 0.0], [0.0, s, 0.0, 0.0], [0.0, 0.0, s, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn flip_volume(data: &[f32], dims: [usize; 3], m: u8) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let si = if m & 1 != 0 { dims[0] - 1 - i } else { i };
                let sj = if m & 2 != 0 { dims[1] - 1 - j } else { j };
                let sk = if m & 4 != 0 { dims[2] - 1 - k } else { k };
                out[i + dims[0] * (j + dims[1] * k)] = data[si + dims[0] * (sj + dims[1] * sk)];
            }
        }
    }
    out
}

// ---- padding ----

#[test]
fn padding_replicates_edges_and_crops_back() {
    assert_eq!(padding_for([16, 17, 13], 4), [(0, 0), (1, 2), (1, 2)]);
    let dims = [3, 2, 2];
    let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
    let pad = [(1, 0), (0, 1), (0, 0)];
    let (p, pd) = pad_replicate(&data, dims, pad);
    assert_eq!(pd, [4, 3, 2]);
    // first row: x = -1 replicates x = 0
    assert_eq!(&p[..4], &[0.0, 0.0, 1.0, 2.0]);
    // y = 2 replicates y = 1
    assert_eq!(&p[8..12], &[3.0, 3.0, 4.0, 5.0]);
    assert_eq!(crop(&p, pd, pad), data);
}

// ---- TTA ----

#[test]
fn tta_disabled_equals_plain_forward() {
    let ws = build(&net(), 1).unwrap();
    let x = random_tensor(&[1, 1, 8, 8, 12], 2);
    let plain = forward_eager(&ws, &net(), &x).unwrap().swap_remove(0);
    assert_eq!(tta_forward(&ws, &net(), &x, false).unwrap(), plain);
}

#[test]
fn tta_of_constant_network_equals_plain() {
    let ws = constant_member(0.3, 4);
    let x = random_tensor(&[1, 1, 8, 8, 8], 5);
    let plain = tta_forward(&ws, &net(), &x, false).unwrap();
    assert_eq!(tta_forward(&ws, &net(), &x, true).unwrap(), plain);
}

#[test]
fn tta_commutes_with_mirrors() {
    let ws = build(&net(), 6).unwrap();
    let x = random_tensor(&[1, 1, 8, 12, 8], 7);
    let y = tta_forward(&ws, &net(), &x, true).unwrap();
    for m in 1..8 {
        let ym = tta_forward(&ws, &net(), &x.flip_spatial(m).unwrap(), true).unwrap();
        assert_eq!(ym, y.flip_spatial(m).unwrap(), "mirror {m}");
    }
}

#[test]
fn symmetric_input_gives_symmetric_output() {
    let ws = build(&net(), 8).unwrap();
    let base = random_tensor(&[1, 1, 8, 8, 8], 9);
    // symmetrise over every mirror
    let mut sym = base.clone();
    for m in 1..8 {
        let f = base.flip_spatial(m).unwrap();
        sym.data_mut().iter_mut().zip(f.data()).for_each(|(a, b)| *a += b);
    }
    for m in 1..8 {
        assert_eq!(sym.flip_spatial(m).unwrap(), sym);
    }
    let y = tta_forward(&ws, &net(), &sym, true).unwrap();
    for m in 1..8 {
        let d = y.flip_spatial(m).unwrap();
        let max = d.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert_eq!(max, 0.0, "mirror {m}");
    }
    let sums: Vec<f32> = (0..512).map(|i| y.data()[i] + y.data()[512 + i]).collect();
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
}

#[test]
fn batched_and_sequential_mirrors_agree() {
    let ws = build(&net(), 3).unwrap();
    let x = random_tensor(&[1, 1, 8, 8, 8], 4);
    let y = tta_forward(&ws, &net(), &x, true).unwrap();
    // sequential evaluation of the same butterfly
    let mut outs: Vec<Tensor<f32>> = (0..8u8)
        .map(|m| {
            let o = forward_eager(&ws, &net(), &x.flip_spatial(m).unwrap()).unwrap().swap_remove(0);
            o.flip_spatial(m).unwrap()
        })
        .collect();
    for bit in [1usize, 2, 4] {
        for m in 0..8 {
            if m & bit == 0 {
                let other = outs[m | bit].clone();
                outs[m].data_mut().iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    outs[0].data_mut().iter_mut().for_each(|v| *v *= 0.125);
    assert_eq!(outs[0], y);
}

// ---- ensemble ----

#[test]
fn ensemble_construction() {
    assert!(matches!(Ensemble::new(vec![]), Err(Error::EmptyEnsemble)));
    let a = build(&net(), 0).unwrap();
    let other = NetConfig::new(2, 4);
    let b = build(&other, 0).unwrap();
    assert!(Ensemble::new(vec![(net(), a.clone()), (other, b)]).is_err());
    let six = (0..6).map(|_| (net(), a.clone())).collect();
    assert!(Ensemble::new(six).is_err());
    assert!(Ensemble::new(vec![(NetConfig::new(2, 4), a)]).is_err());
}

#[test]
fn single_member_equals_its_tta_forward() {
    let ws = build(&net(), 11).unwrap();
    let ens = Ensemble::new(vec![(net(), ws.clone())]).unwrap();
    let v = volume([8, 12, 8], iso_affine(1.5), |i| ((i * 37) % 11) as f32 - 5.0);
    let prob = ensemble_predict(&ens, &v, true).unwrap();
    let x = Tensor::new(vec![1, 1, 8, 12, 8], v.data.clone()).unwrap();
    let y = tta_forward(&ws, &net(), &x, true).unwrap();
    assert_eq!(prob.data, y.data()[y.numel() / 2..].to_vec());
    assert_eq!(prob.grid, v.grid);
}

#[test]
fn members_are_averaged() {
    let ens = Ensemble::new(vec![(net(), constant_member(0.2, 1)), (net(), constant_member(0.6, 2))]).unwrap();
    let v = volume([6, 9, 5], iso_affine(1.5), |i| (i % 7) as f32);
    let prob = ensemble_predict(&ens, &v, false).unwrap();
    assert_eq!(prob.dims(), [6, 9, 5]);
    assert!(prob.data.iter().all(|&p| (p - 0.4).abs() < 1e-6));
}

#[test]
fn probabilities_are_in_unit_interval() {
    let ens = Ensemble::new(vec![(net(), build(&net(), 1).unwrap()), (net(), build(&net(), 2).unwrap())]).unwrap();
    let v = volume([10, 7, 9], iso_affine(1.5), |i| ((i * 13) % 17) as f32 * 0.3);
    let prob = ensemble_predict(&ens, &v, true).unwrap();
    assert!(prob.data.iter().all(|p| (0.0..=1.0).contains(p)));
}

// ---- largest component ----

fn mask_with(dims: [usize; 3], fg: &[[usize; 3]]) -> BrainMask {
    let mut m = BrainMask::empty(Grid::with_spacing(dims, [1.0; 3]).unwrap());
    for &[i, j, k] in fg {
        let idx = m.grid.index(i, j, k);
        m.data[idx] = 1;
    }
    m
}

/// Component sizes by union-find over 26-neighbourhoods.
fn oracle_components(m: &BrainMask) -> Vec<(usize, usize)> {
    let n = m.data.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for a in 0..n {
        if m.data[a] == 0 {
            continue;
        }
        let [i, j, k] = m.grid.coords(a);
        for b in 0..n {
            if m.data[b] == 0 {
                continue;
            }
            let [x, y, z] = m.grid.coords(b);
            if i.abs_diff(x) <= 1 && j.abs_diff(y) <= 1 && k.abs_diff(z) <= 1 {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let mut sizes: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for a in 0..n {
        if m.data[a] != 0 {
            let r = find(&mut parent, a);
            let e = sizes.entry(r).or_insert((0, a));
            e.0 += 1;
            e.1 = e.1.min(a);
        }
    }
    sizes.into_values().collect()
}

#[test]
fn largest_cc_examples() {
    let single = mask_with([5; 3], &[[1, 1, 1], [2, 2, 2], [3, 3, 2]]);
    assert_eq!(largest_cc(&single), single);

    let mut fg: Vec<[usize; 3]> = (0..10).map(|i| [i % 5, i / 5, 0]).collect();
    fg.extend([[0, 0, 4], [1, 0, 4], [2, 0, 4]]);
    let m = mask_with([5, 5, 5], &fg);
    let kept = largest_cc(&m);
    assert_eq!(kept.count(), 10);
    assert_eq!(kept.data[m.grid.index(0, 0, 4)], 0);

    let tie = mask_with([6, 1, 1], &[[0, 0, 0], [1, 0, 0], [4, 0, 0], [5, 0, 0]]);
    assert_eq!(largest_cc(&tie).data, vec![1, 1, 0, 0, 0, 0]);
    let tie_rev = mask_with([6, 1, 1], &[[0, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0], [1, 0, 0]]);
    assert_eq!(largest_cc(&tie_rev).data, vec![0, 0, 0, 1, 1, 1]);

    let empty = BrainMask::empty(Grid::with_spacing([3; 3], [1.0; 3]).unwrap());
    assert_eq!(largest_cc(&empty), empty);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn largest_cc_matches_union_find(seed in any::<u64>(), density in 0.05f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [6, 5, 4];
        let fg: Vec<[usize; 3]> = (0..120)
            .filter(|_| rng.random_bool(density))
            .map(|i| [i % 6, (i / 6) % 5, i / 30])
            .collect();
        let m = mask_with(dims, &fg);
        let kept = largest_cc(&m);
        let comps = oracle_components(&m);
        let want = comps.iter().map(|c| c.0).max().unwrap_or(0);
        prop_assert_eq!(kept.count(), want);
        // subset of the input and a single component
        prop_assert!(kept.data.iter().zip(&m.data).all(|(&k, &v)| k <= v));
        prop_assert!(oracle_components(&kept).len() <= 1);
        if want > 0 {
            let lowest = comps.iter().filter(|c| c.0 == want).map(|c| c.1).min().unwrap();
            prop_assert_eq!(kept.data[lowest], 1);
        }
    }
}

// ---- full pipeline ----

fn blob_volume(dims: [usize; 3], affine: Affine) -> Volume {
    let c: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 / 2.0);
    volume(dims, affine, |idx| {
        let p = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
        let r2: f64 = (0..3).map(|a| ((p[a] as f64 - c[a]) / (dims[a] as f64 * 0.3)).powi(2)).sum();
        if r2 < 1.0 { 100.0 } else { 0.0 }
    })
}

#[test]
fn constant_image_is_rejected() {
    let ens = Ensemble::new(vec![(net(), build(&net(), 0).unwrap())]).unwrap();
    let v = volume([8, 8, 8], iso_affine(1.5), |_| 7.0);
    assert!(matches!(extract_brain(&v, &ens, &PredictOptions::default()), Err(Error::ZeroVariance)));
}

#[test]
fn mask_lands_on_native_grid() {
    // LPS-like, anisotropic, with an offset origin
    let affine: Affine = [
        [-1.2, 0.0, 0.0, 30.0],
        [0.0, 0.0, 2.0, -12.0],
        [0.0, -1.0, 0.0, 8.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let v = blob_volume([14, 15, 9], affine);
    let ens = Ensemble::new(vec![(net(), constant_member(0.9, 3))]).unwrap();
    let opts = PredictOptions {
        keep_probability: true,
        ..PredictOptions::default()
    };
    let out = extract_brain(&v, &ens, &opts).unwrap();
    assert!(out.mask.grid.matches(&v.grid, 1e-6));
    assert_eq!(out.mask.grid.dims, v.grid.dims);
    assert!(out.mask.data.iter().all(|&b| b <= 1));
    // constant probability 0.9: everything is brain
    assert_eq!(out.mask.count(), out.mask.data.len());
    let prob = out.probability.unwrap();
    assert_eq!(prob.grid, out.mask.grid);
}

#[test]
fn probability_threshold_reproduces_mask() {
    let v = blob_volume([16, 16, 16], iso_affine(1.2));
    let ens = Ensemble::new(vec![(net(), build(&net(), 21).unwrap())]).unwrap();
    let opts = PredictOptions {
        keep_probability: true,
        ..PredictOptions::default()
    };
    let out = extract_brain(&v, &ens, &opts).unwrap();
    let thr = BrainMask::from_threshold(out.probability.as_ref().unwrap(), 0.5);
    assert_eq!(largest_cc(&thr), out.mask);
    assert!(oracle_components(&out.mask).len() <= 1);
}

#[test]
fn extraction_independent_of_thread_count() {
    let v = blob_volume([13, 11, 12], iso_affine(1.7));
    let ens = Ensemble::new(vec![(net(), build(&net(), 5).unwrap()), (net(), build(&net(), 6).unwrap())]).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| extract_brain(&v, &ens, &PredictOptions::default()).unwrap().mask)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn extraction_commutes_with_mirroring() {
    // dyadic voxel count and integer intensities keep the z-score exact
    let dims = [16, 16, 16];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<f32> = (0..4096).map(|_| rng.random_range(0..50) as f32).collect();
    let grid = Grid::with_spacing(dims, [1.5; 3]).unwrap();
    let v = Volume::new(grid.clone(), data.clone()).unwrap();
    let ens = Ensemble::new(vec![(net(), build(&net(), 13).unwrap())]).unwrap();
    let base = extract_brain(&v, &ens, &PredictOptions::default()).unwrap().mask;
    for m in [1u8, 2, 4, 7] {
        let mv = Volume::new(grid.clone(), flip_volume(&data, dims, m)).unwrap();
        let got = extract_brain(&mv, &ens, &PredictOptions::default()).unwrap().mask;
        let want: Vec<u8> = flip_volume(&base.data.iter().map(|&b| b as f32).collect::<Vec<_>>(), dims, m)
            .iter()
            .map(|&b| b as u8)
            .collect();
        assert_eq!(got.data, want, "mirror {m}");
    }
}

#[test]
fn training_case_preparation() {
    let affine: Affine = [
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 3.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let v = blob_volume([15, 12, 6], affine);
    let m = BrainMask::from_threshold(&v, 50.0);
    let (img, msk) = prepare_training_case(&v, &m, ZScoreMode::AllVoxels).unwrap();
    assert_eq!(img.grid, msk.grid);
    assert_eq!(img.dims(), [10, 8, 12]);
    assert!(img.affine()[0][0] > 0.0);
    let mean: f64 = img.data.iter().map(|&x| x as f64).sum::<f64>() / img.data.len() as f64;
    assert!(mean.abs() < 1e-4);
    assert!(msk.count() > 0);
    let wrong = BrainMask::empty(Grid::with_spacing([15, 12, 7], [1.0; 3]).unwrap());
    assert!(prepare_training_case(&v, &wrong, ZScoreMode::AllVoxels).is_err());
}
