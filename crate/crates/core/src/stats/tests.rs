use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::metrics::{CaseMetrics, Sequence};

/// Exact one-sided p of the signed-rank statistic by enumerating all 2^n
/// sign assignments of ranks 1..=n (tie-free).
fn exact_p(n: usize, w_plus: f64, alternative: Alternative) -> f64 {
    let total = 1u64 << n;
    let mut hits = 0u64;
    for signs in 0..total {
        let w: usize = (0..n).filter(|b| signs >> b & 1 == 1).map(|b| b + 1).sum();
        let w = w as f64;
        let hit = match alternative {
            Alternative::Greater => w >= w_plus,
            Alternative::Less => w <= w_plus,
            Alternative::TwoSided => unreachable!(),
        };
        hits += u64::from(hit);
    }
    hits as f64 / total as f64
}

fn tie_free_sample(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mags: Vec<f64> = (1..=n).map(|v| v as f64 + 0.25).collect();
    mags.shuffle(rng);
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..100.0)).collect();
    let a = b
        .iter()
        .zip(&mags)
        .map(|(x, m)| if rng.random_bool(0.5) { x + m } else { x - m })
        .collect();
    (a, b)
}

#[test]
fn median_iqr_examples() {
    assert_eq!(median_iqr(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap(), (3.0, 2.0, 4.0));
    assert_eq!(median_iqr(&[7.0]).unwrap(), (7.0, 7.0, 7.0));
    assert_eq!(median_iqr(&[1.0; 4]).unwrap(), (1.0, 1.0, 1.0));
    assert_eq!(median_iqr(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (2.5, 1.75, 3.25));
    assert!(matches!(median_iqr(&[]), Err(Error::EmptyInput)));
}

#[test]
fn average_ranks_share_ties() {
    let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0, 3.0]);
    assert_eq!(r, vec![4.0, 1.0, 4.0, 2.0, 4.0]);
    assert_eq!(t, vec![3]);
}

#[test]
fn wilcoxon_all_positive_n8_near_exact() {
    let a: Vec<f64> = (1..=8).map(|v| 10.0 + v as f64).collect();
    let b = vec![10.0; 8];
    let w = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    assert_eq!(w.w_plus, 36.0);
    let exact = exact_p(8, 36.0, Alternative::Greater);
    assert_eq!(exact, 1.0 / 256.0);
    assert!((w.p - exact).abs() <= 0.005, "{} vs {exact}", w.p);
}

#[test]
fn wilcoxon_errors() {
    let a = [1.0, 2.0, 3.0];
    assert!(matches!(wilcoxon_signed_rank(&a, &a, Alternative::Greater), Err(Error::AllZeroDifferences)));
    assert!(wilcoxon_signed_rank(&a, &a[..2], Alternative::Greater).is_err());
    assert!(matches!(wilcoxon_signed_rank(&[], &[], Alternative::Less), Err(Error::EmptyInput)));
    assert!(wilcoxon_signed_rank(&[f64::NAN], &[1.0], Alternative::Less).is_err());
}

#[test]
fn wilcoxon_swap_flips_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = tie_free_sample(&mut rng, 15);
    let ab = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    let ba = wilcoxon_signed_rank(&b, &a, Alternative::Greater).unwrap();
    assert_eq!(ab.z, -ba.z);
    assert_eq!(ab.abs_z, ba.abs_z);
    let less = wilcoxon_signed_rank(&b, &a, Alternative::Less).unwrap();
    assert!((ab.p - less.p).abs() < 1e-15);
}

#[test]
fn wilcoxon_drops_zeros_and_corrects_ties() {
    // d = [+1, +1, -1, +2, 0]; |d| ranks 2,2,2,4 with one tie group of 3
    let a = [1.0, 1.0, 0.0, 2.0, 5.0];
    let b = [0.0, 0.0, 1.0, 0.0, 5.0];
    let w = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    assert_eq!(w.n_used, 4);
    assert_eq!(w.zeros_dropped, 1);
    assert_eq!(w.w_plus, 8.0);
    let sigma = (4.0 * 5.0 * 9.0 / 24.0 - (27.0 - 3.0) / 48.0f64).sqrt();
    let z = (8.0 - 5.0 - 0.5) / sigma;
    assert!((w.z - z).abs() < 1e-12);
    let p = 0.5 * libm_erfc(z / std::f64::consts::SQRT_2);
    assert!((w.p - p).abs() < 1e-9);
}

/// Complementary error function by numerical integration, independent of
/// the distribution crate.
fn libm_erfc(x: f64) -> f64 {
    let steps = 200_000;
    let upper = x + 12.0;
    let h = (upper - x) / steps as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(x) + f(upper);
    for i in 1..steps {
        let t = x + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
    }
    s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn wilcoxon_close_to_exact_for_small_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..100 {
        let n = rng.random_range(9..=12);
        let (a, b) = tie_free_sample(&mut rng, n);
        for alt in [Alternative::Greater, Alternative::Less] {
            let w = wilcoxon_signed_rank(&a, &b, alt).unwrap();
            let exact = exact_p(n, w.w_plus, alt);
            assert!((w.p - exact).abs() <= 0.01, "trial {trial} n {n}: {} vs {exact}", w.p);
        }
    }
}

#[test]
fn two_sided_is_twice_the_smaller_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = tie_free_sample(&mut rng, 30);
    let g = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap().p;
    let l = wilcoxon_signed_rank(&a, &b, Alternative::Less).unwrap().p;
    let t = wilcoxon_signed_rank(&a, &b, Alternative::TwoSided).unwrap().p;
    assert!((t - (2.0 * g.min(l)).min(1.0)).abs() < 1e-12);
}

#[test]
fn friedman_examples() {
    let favour_first: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0 + i as f64, 5.0 + i as f64, 9.0 + i as f64]).collect();
    let (r, means) = friedman(&favour_first).unwrap();
    assert!((r.chi2 - 12.0).abs() < 1e-12);
    assert_eq!(means, vec![1.0, 2.0, 3.0]);
    assert_eq!(r.dof, 2);
    assert!((r.p - (-6.0f64).exp()).abs() < 1e-12);

    let constant = vec![vec![4.0; 3]; 5];
    let (r, _) = friedman(&constant).unwrap();
    assert_eq!((r.chi2, r.p), (0.0, 1.0));

    // hand ranks: both rows rank column 0 first, R = (1, 2)
    let (r, _) = friedman(&[vec![0.3, 0.9], vec![0.1, 0.2]]).unwrap();
    assert!((r.chi2 - 2.0).abs() < 1e-12);
    let (r, _) = friedman(&[vec![0.3, 0.9], vec![0.2, 0.1]]).unwrap();
    assert_eq!(r.chi2, 0.0);
}

#[test]
fn friedman_tie_correction_and_errors() {
    // row 2 ties columns 1 and 2: ranks (1, 2.5, 2.5)
    let rows = vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![1.0, 5.0, 5.0]];
    let (r, means) = friedman(&rows).unwrap();
    assert_eq!(means, vec![1.0, 13.0 / 6.0, 17.0 / 6.0]);
    let raw = 12.0 * 3.0 / 12.0 * means.iter().map(|m| (m - 2.0f64).powi(2)).sum::<f64>();
    let corr = 1.0 - 6.0 / (3.0 * 24.0);
    assert!((r.chi2 - raw / corr).abs() < 1e-12);

    assert!(matches!(friedman(&[vec![1.0, f64::NAN], vec![1.0, 2.0]]), Err(Error::MissingData(0))));
    assert!(matches!(friedman(&[vec![1.0, 2.0], vec![1.0]]), Err(Error::MissingData(1))));
    assert!(friedman(&[vec![1.0, 2.0]]).is_err());
}

#[test]
fn bonferroni_examples() {
    assert_eq!(bonferroni_one(0.01, 12), 0.12);
    assert_eq!(bonferroni_one(0.2, 6), 1.0);
    assert_eq!(bonferroni(&[0.03, 0.5], 1), vec![0.03, 0.5]);
}

#[test]
fn effect_size_matches_published_rows() {
    assert!((effect_size_r(24.31, 833) - 0.60).abs() <= 0.005);
    assert!((effect_size_r(3.95, 40) - 0.44).abs() <= 0.005);
    assert_eq!(effect_size_r(0.0, 10), 0.0);
    assert_eq!(effect_label(0.6), "large");
    assert_eq!(effect_label(0.44), "medium");
    assert_eq!(effect_label(0.1), "small");
}

fn rows(algorithm: &str, dice: &[f64], hd: &[Option<f64>]) -> Vec<MetricsRow> {
    dice.iter()
        .zip(hd)
        .enumerate()
        .map(|(i, (&d, &h))| MetricsRow {
            algorithm: algorithm.into(),
            metrics: CaseMetrics {
                case_id: format!("c{i}"),
                sequence: Sequence::T1w,
                dice_pct: d,
                hd95_mm: h,
            },
        })
        .collect()
}

#[test]
fn compare_against_reference() {
    let n = 40;
    let good: Vec<f64> = (0..n).map(|i| 97.0 + (i % 7) as f64 * 0.1).collect();
    let worse: Vec<f64> = good.iter().enumerate().map(|(i, d)| d - 1.0 - i as f64 * 0.01).collect();
    let hd_good: Vec<Option<f64>> = (0..n).map(|i| Some(2.0 + (i % 5) as f64 * 0.1)).collect();
    let mut hd_bad: Vec<Option<f64>> = hd_good.iter().enumerate().map(|(i, h)| h.map(|v| v + 0.5 + i as f64 * 0.01)).collect();
    hd_bad[3] = None;
    let mut all = rows("unet", &good, &hd_good);
    all.extend(rows("other", &worse, &hd_bad));
    all.extend(rows("third", &worse, &hd_bad));
    let cmp = compare_algorithms(&all, "unet").unwrap();
    assert_eq!(cmp.len(), 4);
    let dice = cmp[0].result.as_ref().unwrap();
    assert_eq!(dice.comparison, "unet vs other dice");
    assert_eq!(dice.n_pairs, 40);
    assert!(dice.p_raw < 1e-6);
    assert_eq!(dice.p_bonferroni, bonferroni_one(dice.p_raw, 4));
    assert_eq!(dice.effect_r, effect_size_r(dice.abs_z, 40));
    let hd = cmp[1].result.as_ref().unwrap();
    assert_eq!(hd.n_pairs, 39);
    assert!(hd.p_raw < 1e-6);

    let same = rows("twin", &good, &hd_good);
    let mut dup = rows("unet", &good, &hd_good);
    dup.extend(same);
    let cmp = compare_algorithms(&dup, "unet").unwrap();
    assert!(cmp.iter().all(|c| matches!(c.result, Err(Error::AllZeroDifferences))));
    assert!(compare_algorithms(&dup, "missing").is_err());
    assert!(compare_algorithms(&rows("unet", &good, &hd_good), "unet").is_err());
}

#[test]
fn comparison_csv_header() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.csv");
    let r = StatsReport {
        comparison: "a vs b dice".into(),
        abs_z: 3.95,
        p_raw: 0.001,
        p_bonferroni: 0.012,
        effect_r: 0.44,
        n_pairs: 40,
        zeros_dropped: 0,
    };
    write_comparison_csv(&p, &[r]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text, "comparison,abs_z,p_raw,p_bonferroni,effect_r,n\na vs b dice,3.95,0.001,0.012,0.44,40\n");
}

proptest! {
    #[test]
    fn one_sided_tails_nearly_complement(seed in any::<u64>(), n in 40usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = tie_free_sample(&mut rng, n);
        let g = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap().p;
        let l = wilcoxon_signed_rank(&a, &b, Alternative::Less).unwrap().p;
        prop_assert!((0.99..=1.01).contains(&(g + l)), "{}", g + l);
    }

    #[test]
    fn bonferroni_monotone(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, m in 1usize..50) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        prop_assert!(bonferroni_one(lo, m) <= bonferroni_one(hi, m));
        prop_assert!((0.0..=1.0).contains(&bonferroni_one(hi, m)));
    }

    #[test]
    fn friedman_rank_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.random_range(0..5) as f64).collect())
            .collect();
        let transformed: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| (v * 0.7).exp() - 3.0).collect()).collect();
        let (a, _) = friedman(&rows).unwrap();
        let (b, _) = friedman(&transformed).unwrap();
        prop_assert!((a.chi2 - b.chi2).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.p));
    }

    #[test]
    fn wilcoxon_outputs_in_range(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        if let Ok(w) = wilcoxon_signed_rank(&a, &b, Alternative::Greater) {
            prop_assert!((0.0..=1.0).contains(&w.p));
            let r = effect_size_r(w.abs_z, n);
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
