//! Nonparametric comparison statistics: quartiles, the Wilcoxon
//! matched-pairs signed-rank test, the Friedman test, Bonferroni adjustment
//! and the `r` effect size.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::MetricsRow;

/// Header of the comparison CSV.
pub const COMPARISON_HEADER: &str = "comparison,abs_z,p_raw,p_bonferroni,effect_r,n";

/// Quantile `p` of ascending `sorted` values, interpolating linearly at
/// position `p * (n - 1)`.
///
/// # Panics
/// If `sorted` is empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// `(median, q1, q3)`.
pub fn median_iqr(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.25),
        quantile_sorted(&v, 0.75),
    ))
}

/// Average ranks (1-based) of `values`; also returns the tie group sizes.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Direction of a one-tailed test (`Greater`: `a` tends to exceed `b`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    Greater,
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Continuity-corrected standard score, signed by `W+ - E[W+]`.
    pub z: f64,
    pub abs_z: f64,
    pub p: f64,
    /// Pairs with nonzero difference.
    pub n_used: usize,
    pub zeros_dropped: usize,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Parse(format!("non-finite value at position {i}"))),
        None => Ok(()),
    }
}

/// Wilcoxon matched-pairs signed-rank test of `a` against `b` using the
/// normal approximation with tie and continuity corrections. Zero
/// differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_finite(a)?;
    check_finite(b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = d.len() as f64;
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sigma = (n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term).sqrt();
    let dev = w_plus - n * (n + 1.0) / 4.0;
    let norm = std_normal();
    let p = match alternative {
        Alternative::Greater => norm.sf((dev - 0.5) / sigma),
        Alternative::Less => norm.cdf((dev + 0.5) / sigma),
        Alternative::TwoSided => (2.0 * norm.sf((dev.abs() - 0.5).max(0.0) / sigma)).min(1.0),
    };
    let z = dev.signum() * (dev.abs() - 0.5).max(0.0) / sigma;
    Ok(WilcoxonResult {
        w_plus,
        z,
        abs_z: z.abs(),
        p: p.clamp(0.0, 1.0),
        n_used: d.len(),
        zeros_dropped: a.len() - d.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub p: f64,
    pub dof: usize,
    pub n: usize,
}

/// Friedman test on an `n_cases x k_algorithms` matrix. Rows must be
/// complete; NaN marks a missing entry. Also returns the mean within-row
/// rank of each column.
pub fn friedman(rows: &[Vec<f64>]) -> Result<(FriedmanResult, Vec<f64>)> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::Config(format!("friedman needs n >= 2 and k >= 2, got {n} x {k}")));
    }
    let mut rank_sums = vec![0.0; k];
    let mut tie_sum = 0.0;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != k || row.iter().any(|v| v.is_nan()) {
            return Err(Error::MissingData(i));
        }
        check_finite(row)?;
        let (ranks, ties) = average_ranks(row);
        for (s, r) in rank_sums.iter_mut().zip(ranks) {
            *s += r;
        }
        tie_sum += ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    }
    let (nf, kf) = (n as f64, k as f64);
    let mean_ranks: Vec<f64> = rank_sums.iter().map(|s| s / nf).collect();
    let centre = (kf + 1.0) / 2.0;
    let raw = 12.0 * nf / (kf * (kf + 1.0)) * mean_ranks.iter().map(|r| (r - centre).powi(2)).sum::<f64>();
    let denom = 1.0 - tie_sum / (nf * (kf * kf * kf - kf));
    let dof = k - 1;
    let (chi2, p) = if denom <= 1e-12 {
        (0.0, 1.0)
    } else {
        let chi2 = raw / denom;
        let dist = ChiSquared::new(dof as f64).expect("positive dof");
        (chi2, dist.sf(chi2).clamp(0.0, 1.0))
    };
    Ok((FriedmanResult { chi2, p, dof, n }, mean_ranks))
}

/// `min(1, p * m)`.
pub fn bonferroni_one(p: f64, m: usize) -> f64 {
    (p * m.max(1) as f64).min(1.0)
}

pub fn bonferroni(ps: &[f64], m: usize) -> Vec<f64> {
    ps.iter().map(|&p| bonferroni_one(p, m)).collect()
}

/// `r = |Z| / sqrt(N)` with `N = 2 * n_pairs` observations.
pub fn effect_size_r(abs_z: f64, n_pairs: usize) -> f64 {
    abs_z.abs() / (2.0 * n_pairs.max(1) as f64).sqrt()
}

/// Cohen's labels for `r`.
pub fn effect_label(r: f64) -> &'static str {
    match r {
        r if r >= 0.5 => "large",
        r if r >= 0.3 => "medium",
        r if r >= 0.1 => "small",
        _ => "negligible",
    }
}

/// Metric a comparison is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Hd95,
}

impl Metric {
    /// Direction in which the reference algorithm is expected to be better.
    pub fn alternative(self) -> Alternative {
        match self {
            Metric::Dice => Alternative::Greater,
            Metric::Hd95 => Alternative::Less,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dice => "dice",
            Metric::Hd95 => "hd95",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub comparison: String,
    pub abs_z: f64,
    pub p_raw: f64,
    pub p_bonferroni: f64,
    pub effect_r: f64,
    pub n_pairs: usize,
    pub zeros_dropped: usize,
}

/// Outcome of one planned comparison.
#[derive(Debug)]
pub struct Comparison {
    pub label: String,
    pub result: Result<StatsReport>,
}

/// Paired values of `metric` for cases both algorithms scored.
fn paired(a: &[&MetricsRow], b: &[&MetricsRow], metric: Metric) -> (Vec<f64>, Vec<f64>) {
    let value = |r: &MetricsRow| match metric {
        Metric::Dice => Some(r.metrics.dice_pct),
        Metric::Hd95 => r.metrics.hd95_mm,
    };
    let lookup: HashMap<&str, f64> = b
        .iter()
        .filter_map(|r| Some((r.metrics.case_id.as_str(), value(r)?)))
        .collect();
    a.iter()
        .filter_map(|r| Some((value(r)?, *lookup.get(r.metrics.case_id.as_str())?)))
        .unzip()
}

/// One-tailed Wilcoxon tests of `reference` against every other algorithm
/// on DICE and HD95, Bonferroni-adjusted over all comparisons made.
pub fn compare_algorithms(rows: &[MetricsRow], reference: &str) -> Result<Vec<Comparison>> {
    let mut algorithms: Vec<&str> = Vec::new();
    for r in rows {
        if !algorithms.contains(&r.algorithm.as_str()) {
            algorithms.push(&r.algorithm);
        }
    }
    if !algorithms.contains(&reference) {
        return Err(Error::Config(format!("reference algorithm {reference:?} not in the metrics")));
    }
    let of = |name: &str| rows.iter().filter(|r| r.algorithm == name).collect::<Vec<_>>();
    let ref_rows = of(reference);
    let others: Vec<&str> = algorithms.into_iter().filter(|&a| a != reference).collect();
    if others.is_empty() {
        return Err(Error::Config("need at least two algorithms to compare".into()));
    }
    let m = others.len() * 2;
    let mut out = Vec::with_capacity(m);
    for other in others {
        let other_rows = of(other);
        for metric in [Metric::Dice, Metric::Hd95] {
            let label = format!("{reference} vs {other} {metric}");
            let (a, b) = paired(&ref_rows, &other_rows, metric);
            let result = wilcoxon_signed_rank(&a, &b, metric.alternative()).map(|w| StatsReport {
                comparison: label.clone(),
                abs_z: w.abs_z,
                p_raw: w.p,
                p_bonferroni: bonferroni_one(w.p, m),
                effect_r: effect_size_r(w.abs_z, a.len()),
                n_pairs: a.len(),
                zeros_dropped: w.zeros_dropped,
            });
            out.push(Comparison { label, result });
        }
    }
    Ok(out)
}

pub fn write_comparison_csv(path: &Path, reports: &[StatsReport]) -> Result<()> {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.comparison, r.abs_z, r.p_raw, r.p_bonferroni, r.effect_r, r.n_pairs
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io_at(path, e))
}

#[cfg(test)]
mod tests;
