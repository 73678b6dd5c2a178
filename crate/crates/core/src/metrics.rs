//! Mask comparison: DICE (percent) and the 95th-percentile symmetric
//! surface distance, plus per-case evaluation of prediction directories.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::{median_iqr, quantile_sorted};
use crate::volume::{read_nifti, BrainMask, Grid};

/// Header of the per-case metrics CSV.
pub const METRICS_HEADER: &str = "case_id,sequence,algorithm,dice,hd95_mm";

/// MRI sequence a case was acquired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Sequence {
    T1w,
    CT1w,
    Flair,
    T2w,
    #[default]
    Other,
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sequence::T1w => "T1w",
            Sequence::CT1w => "cT1w",
            Sequence::Flair => "FLAIR",
            Sequence::T2w => "T2w",
            Sequence::Other => "other",
        })
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1w" | "t1" => Ok(Sequence::T1w),
            "ct1w" | "ct1" => Ok(Sequence::CT1w),
            "flair" => Ok(Sequence::Flair),
            "t2w" | "t2" => Ok(Sequence::T2w),
            "other" => Ok(Sequence::Other),
            _ => Err(Error::Parse(format!("unknown sequence {s:?}"))),
        }
    }
}

/// Metrics of one predicted mask against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub sequence: Sequence,
    pub dice_pct: f64,
    /// `None` when either mask is empty.
    pub hd95_mm: Option<f64>,
}

/// DICE overlap in percent. Two empty masks agree perfectly (100).
pub fn dice(gt: &BrainMask, pm: &BrainMask) -> Result<f64> {
    gt.grid.check_matches(&pm.grid)?;
    Ok(dice_counts(&gt.data, &pm.data))
}

fn dice_counts(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += u64::from(x);
        nb += u64::from(y);
        inter += u64::from(x && y);
    }
    if na + nb == 0 {
        return 100.0;
    }
    200.0 * inter as f64 / (na + nb) as f64
}

/// Foreground voxels with a background or out-of-bounds face neighbour,
/// as ascending linear indices.
pub fn surface_voxels(mask: &BrainMask) -> Vec<usize> {
    surface_of(&mask.data, mask.grid.dims)
}

fn surface_of(data: &[u8], dims: [usize; 3]) -> Vec<usize> {
    let [nx, ny, nz] = dims;
    let at = |i: usize, j: usize, k: usize| data[i + nx * (j + ny * k)] != 0;
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !at(i, j, k) {
                    continue;
                }
                let interior = i > 0
                    && i + 1 < nx
                    && j > 0
                    && j + 1 < ny
                    && k > 0
                    && k + 1 < nz
                    && at(i - 1, j, k)
                    && at(i + 1, j, k)
                    && at(i, j - 1, k)
                    && at(i, j + 1, k)
                    && at(i, j, k - 1)
                    && at(i, j, k + 1);
                if !interior {
                    out.push(i + nx * (j + ny * k));
                }
            }
        }
    }
    out
}

/// Lower envelope of parabolas along one line (Felzenszwalb and
/// Huttenlocher), with sample positions `s * q`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let xq = s * q as f64;
        while let Some(&p) = v.last() {
            let xp = s * p as f64;
            let sect = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if sect <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(sect);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = s * q as f64;
        while j + 1 < v.len() && z[j + 1] < xq {
            j += 1;
        }
        let d = xq - s * v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the
/// nearest seed; infinite everywhere when there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    assert_eq!(seeds.len(), nx * ny * nz, "seed buffer does not match dims");
    let mut g: Vec<f64> = seeds
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, nx, nx * ny];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
        for start in 0..g.len() {
            // a line starts wherever the axis coordinate is zero
            if (start / stride) % n != 0 {
                continue;
            }
            for (q, l) in line.iter_mut().enumerate() {
                *l = g[start + q * stride];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (q, &o) in out.iter().enumerate() {
                g[start + q * stride] = o;
            }
        }
    }
    g
}

/// Directed surface distances from `a` to `b`, sorted ascending (mm).
pub fn directed_surface_distances(a: &BrainMask, b: &BrainMask, spacing: [f64; 3]) -> Result<Vec<f64>> {
    a.grid.check_matches(&b.grid)?;
    Ok(directed(&a.data, &b.data, a.grid.dims, spacing))
}

fn directed(a: &[u8], b: &[u8], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut seeds = vec![false; a.len()];
    for i in surface_of(b, dims) {
        seeds[i] = true;
    }
    let dt = squared_distance_transform(&seeds, dims, spacing);
    let mut d: Vec<f64> = surface_of(a, dims).into_iter().map(|i| dt[i].sqrt()).collect();
    d.sort_by(f64::total_cmp);
    d
}

/// 95th-percentile symmetric surface distance in mm.
pub fn hd95(gt: &BrainMask, pm: &BrainMask, spacing: [f64; 3]) -> Result<f64> {
    hd_percentile(gt, pm, spacing, 0.95)
}

/// Symmetric surface distance at quantile `p` (1.0 gives the Hausdorff
/// distance).
pub fn hd_percentile(gt: &BrainMask, pm: &BrainMask, spacing: [f64; 3], p: f64) -> Result<f64> {
    gt.grid.check_matches(&pm.grid)?;
    if gt.count() == 0 || pm.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let dims = gt.grid.dims;
    let ab = directed(&gt.data, &pm.data, dims, spacing);
    let ba = directed(&pm.data, &gt.data, dims, spacing);
    Ok(quantile_sorted(&ab, p).max(quantile_sorted(&ba, p)))
}

/// DICE and HD95 of one case, using the reference grid's spacing.
pub fn case_metrics(case_id: &str, sequence: Sequence, gt: &BrainMask, pm: &BrainMask) -> Result<CaseMetrics> {
    let dice_pct = dice(gt, pm)?;
    let hd95_mm = match hd95(gt, pm, gt.grid.spacing) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        sequence,
        dice_pct,
        hd95_mm,
    })
}

/// Median and quartiles of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Option<Self> {
        let (median, q1, q3) = median_iqr(values).ok()?;
        Some(Spread {
            n: values.len(),
            median,
            q1,
            q3,
        })
    }
}

/// Per-sequence summary; `hd95` covers only cases where it is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSummary {
    pub sequence: Sequence,
    pub dice: Spread,
    pub hd95: Option<Spread>,
}

/// Summarises cases per sequence, in sequence order.
pub fn summarize(cases: &[CaseMetrics]) -> Vec<SequenceSummary> {
    let mut groups: BTreeMap<Sequence, Vec<&CaseMetrics>> = BTreeMap::new();
    for c in cases {
        groups.entry(c.sequence).or_default().push(c);
    }
    groups
        .into_iter()
        .filter_map(|(sequence, cs)| {
            let dice: Vec<f64> = cs.iter().map(|c| c.dice_pct).collect();
            let hd: Vec<f64> = cs.iter().filter_map(|c| c.hd95_mm).collect();
            Some(SequenceSummary {
                sequence,
                dice: Spread::of(&dice)?,
                hd95: Spread::of(&hd),
            })
        })
        .collect()
}

/// Result of comparing a prediction directory with a reference directory.
#[derive(Debug, Default)]
pub struct Evaluation {
    pub cases: Vec<CaseMetrics>,
    /// Cases present on both sides that could not be scored.
    pub errors: Vec<(String, Error)>,
    /// Reference cases without a prediction.
    pub missing_predictions: Vec<String>,
    /// Predictions without a reference.
    pub missing_references: Vec<String>,
    pub summary: Vec<SequenceSummary>,
}

fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .map(str::to_string)
}

/// NIfTI masks in `dir`, keyed by case id.
///
/// When the directory holds `*_mask` files only those are taken and the
/// suffix is stripped from the key, so an image/mask dataset directory can
/// serve as the reference side directly.
pub fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut all = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io_at(dir, e))? {
        let path = entry.map_err(|e| Error::io_at(dir, e))?.path();
        if let Some(stem) = nifti_stem(&path) {
            all.push((stem, path));
        }
    }
    let has_masks = all.iter().any(|(s, _)| s.ends_with("_mask"));
    Ok(all
        .into_iter()
        .filter_map(|(stem, path)| match stem.strip_suffix("_mask") {
            Some(id) => Some((id.to_string(), path)),
            None if !has_masks => Some((stem, path)),
            None => None,
        })
        .collect())
}

/// Scores every prediction in `pred_dir` against the same case in `gt_dir`.
pub fn evaluate_cases(pred_dir: &Path, gt_dir: &Path, sequences: &HashMap<String, Sequence>) -> Result<Evaluation> {
    let preds = mask_files(pred_dir)?;
    let gts = mask_files(gt_dir)?;
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = gts
        .iter()
        .filter_map(|(id, g)| preds.get(id).map(|p| (id, p, g)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoMatchingCases);
    }
    let scored: Vec<(String, Result<CaseMetrics>)> = pairs
        .par_iter()
        .map(|&(id, p, g)| {
            let seq = sequences.get(id).copied().unwrap_or_default();
            let run = || -> Result<CaseMetrics> {
                let gt = load_mask(g)?;
                let pm = load_mask(p)?;
                case_metrics(id, seq, &gt, &pm)
            };
            (id.clone(), run())
        })
        .collect();

    let mut ev = Evaluation::default();
    for (id, r) in scored {
        match r {
            Ok(m) => ev.cases.push(m),
            Err(e) => ev.errors.push((id, e)),
        }
    }
    ev.missing_predictions = gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    ev.missing_references = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    ev.summary = summarize(&ev.cases);
    Ok(ev)
}

/// Reads a NIfTI file as a mask; any nonzero voxel is foreground.
pub fn load_mask(path: &Path) -> Result<BrainMask> {
    let vol = read_nifti(path)?;
    let data = vol.data.iter().map(|&v| u8::from(v != 0.0)).collect();
    BrainMask::new(vol.grid, data)
}

/// Writes per-case metrics as CSV; undefined HD95 is written as `NA`.
pub fn write_metrics_csv(path: &Path, algorithm: &str, cases: &[CaseMetrics]) -> Result<()> {
    let bad = |s: &str| s.contains([',', '\n', '"']);
    if bad(algorithm) {
        return Err(Error::Config(format!("algorithm name {algorithm:?} is not CSV-safe")));
    }
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for c in cases {
        if bad(&c.case_id) {
            return Err(Error::Config(format!("case id {:?} is not CSV-safe", c.case_id)));
        }
        let hd = c.hd95_mm.map_or_else(|| "NA".to_string(), |v| v.to_string());
        out.push_str(&format!("{},{},{},{},{}\n", c.case_id, c.sequence, algorithm, c.dice_pct, hd));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io_at(path, e))
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub algorithm: String,
    pub metrics: CaseMetrics,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "expected header {METRICS_HEADER:?}, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = n + 2;
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("line {lineno}: expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("line {lineno}: bad number {s:?}")))
        };
        let hd95_mm = if f[4] == "NA" { None } else { Some(num(f[4])?) };
        rows.push(MetricsRow {
            algorithm: f[2].to_string(),
            metrics: CaseMetrics {
                case_id: f[0].to_string(),
                sequence: f[1].parse()?,
                dice_pct: num(f[3])?,
                hd95_mm,
            },
        });
    }
    Ok(rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    parse_metrics_csv(&text)
}

/// Grid-free helper for tests and callers holding raw buffers.
pub fn mask_on(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<BrainMask> {
    BrainMask::new(Grid::with_spacing(dims, spacing)?, data)
}
