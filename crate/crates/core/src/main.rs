use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use rayon::prelude::*;

use voxelstrip::augment::AugmentConfig;
use voxelstrip::gradcheck;
use voxelstrip::metrics::{self, evaluate_cases, read_metrics_csv, write_metrics_csv, MetricsRow};
use voxelstrip::phantom::{self, generate_set, PhantomConfig, Preset};
use voxelstrip::predictor::{extract_brain, prepare_training_case, Ensemble, PredictOptions};
use voxelstrip::resample::ZScoreMode;
use voxelstrip::stats::{self, compare_algorithms, friedman, write_comparison_csv};
use voxelstrip::trainer::{self, kfold_split, write_history, TrainConfig};
use voxelstrip::unet::{save_model, NetConfig};
use voxelstrip::volume::{read_nifti, write_mask, write_nifti};
use voxelstrip::{BrainMask, Volume};

/// Brain extraction for head MRI with a 3D residual U-Net.
#[derive(Parser)]
#[command(name = "voxelstrip", version)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "VOXELSTRIP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict brain masks for one image or every image in a directory.
    Extract(ExtractArgs),
    /// Train networks on image/mask pairs.
    Train(TrainArgs),
    /// Score predicted masks against reference masks.
    Evaluate(EvaluateArgs),
    /// Compare algorithms from metrics CSVs with paired tests.
    Compare(CompareArgs),
    /// Write a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// NIfTI file, or a directory whose `.nii`/`.nii.gz` images are all
    /// processed (files named `*_mask` or `*_prob` are skipped).
    #[arg(short, long)]
    input: PathBuf,
    /// Output directory for `<stem>_mask.nii.gz`.
    #[arg(short, long)]
    output: PathBuf,
    /// Weight files (1 to 5); their `.cfg` sidecars must sit next to them.
    #[arg(short, long = "model", required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    /// Disable mirror test-time augmentation.
    #[arg(long)]
    no_tta: bool,
    /// Also write `<stem>_prob.nii.gz`.
    #[arg(long)]
    save_prob: bool,
    /// Voxels used for z-score statistics: all | nonzero.
    #[arg(long, default_value_t = ZScoreMode::AllVoxels)]
    zscore: ZScoreMode,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of `<id>.nii[.gz]` images with `<id>_mask.nii[.gz]` masks.
    #[arg(short, long)]
    data: PathBuf,
    /// Output directory for weights and loss curves.
    #[arg(short, long)]
    output: PathBuf,
    /// Train only this fold (0-based).
    #[arg(long, conflicts_with = "full")]
    fold: Option<usize>,
    /// Train one model on every case instead of cross-validation folds.
    #[arg(long)]
    full: bool,
    /// Small profile: depth 3, width 8, 32^3 patches, 20 x 50 batches,
    /// initial learning rate 1e-3.
    #[arg(long)]
    desk: bool,
    /// Training config (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network config (key = value).
    #[arg(long)]
    net_config: Option<PathBuf>,
    /// Augmentation config (key = value).
    #[arg(long)]
    aug_config: Option<PathBuf>,
    /// Disable all augmentation.
    #[arg(long, conflicts_with = "aug_config")]
    no_augment: bool,
    /// Cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batches per epoch.
    #[arg(long)]
    batches: Option<usize>,
    /// Patches per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cubic patch side in voxels.
    #[arg(long)]
    patch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// U-Net depth (resolution levels).
    #[arg(long)]
    depth: Option<usize>,
    /// Feature maps at full resolution.
    #[arg(long)]
    width: Option<usize>,
    /// Seed for initialisation, sampling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Voxels used for z-score statistics: all | nonzero.
    #[arg(long, default_value_t = ZScoreMode::AllVoxels)]
    zscore: ZScoreMode,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference masks.
    #[arg(long)]
    gt: PathBuf,
    /// Metrics CSV to write.
    #[arg(short, long)]
    output: PathBuf,
    /// Algorithm name recorded in the CSV.
    #[arg(long, default_value = "voxelstrip")]
    algorithm: String,
    /// `cases.csv` giving each case's sequence (default: `<gt>/cases.csv`
    /// when present).
    #[arg(long)]
    cases: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Metrics CSVs (at least two algorithms in total).
    #[arg(required = true, num_args = 2..)]
    inputs: Vec<PathBuf>,
    /// Comparison CSV to write.
    #[arg(short, long)]
    output: PathBuf,
    /// Algorithm tested against all others (default: first in the input).
    #[arg(long)]
    reference: Option<String>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(short, long)]
    output: PathBuf,
    /// Number of cases.
    #[arg(long = "n", default_value_t = 50)]
    n: usize,
    /// Cases placed in `heldout/` (default: a fifth of `--n`).
    #[arg(long)]
    holdout: Option<usize>,
    /// t1 | t2 | mixed | symmetric.
    #[arg(long)]
    preset: Option<Preset>,
    /// Seed of the whole set; case `i` uses stream `i`.
    #[arg(long)]
    seed: Option<u64>,
    /// Phantom config (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed of the random inputs.
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

/// `e` followed by its sources, colon separated.
fn chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut cur = e.source();
    while let Some(c) = cur {
        s.push_str(": ");
        s.push_str(&c.to_string());
        cur = c.source();
    }
    s
}

fn usage_error(kind: ErrorKind, msg: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn nifti_stem(path: &Path) -> Option<&str> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(input).with_context(|| format!("reading {}", input.display()))? {
        let path = entry?.path();
        if let Some(stem) = nifti_stem(&path) {
            if !stem.ends_with("_mask") && !stem.ends_with("_prob") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_extract(a: ExtractArgs) -> Result<ExitCode> {
    if a.models.len() > 5 {
        usage_error(ErrorKind::TooManyValues, "at most 5 models may be given");
    }
    for m in &a.models {
        if !m.is_file() {
            usage_error(ErrorKind::ValueValidation, format!("model file {} does not exist", m.display()));
        }
    }
    if !a.input.exists() {
        usage_error(ErrorKind::ValueValidation, format!("input {} does not exist", a.input.display()));
    }
    let ens = Ensemble::load(&a.models).context("loading models")?;
    let images = list_images(&a.input)?;
    if images.is_empty() {
        bail!("no NIfTI images found in {}", a.input.display());
    }
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let opts = PredictOptions {
        tta: !a.no_tta,
        zscore: a.zscore,
        keep_probability: a.save_prob,
    };
    let results: Vec<(PathBuf, Result<PathBuf>)> = images
        .par_iter()
        .map(|img| {
            let run = || -> Result<PathBuf> {
                let stem = nifti_stem(img).context("not a NIfTI file name")?;
                let vol = read_nifti(img)?;
                let out = extract_brain(&vol, &ens, &opts)?;
                let mask_path = a.output.join(format!("{stem}_mask.nii.gz"));
                write_mask(&out.mask, &mask_path, true)?;
                if let Some(p) = &out.probability {
                    write_nifti(p, &a.output.join(format!("{stem}_prob.nii.gz")), true)?;
                }
                Ok(mask_path)
            };
            (img.clone(), run())
        })
        .collect();
    let mut failed = 0;
    for (img, r) in results {
        match r {
            Ok(p) => println!("{}", p.display()),
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e:#}", img.display());
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} case(s) failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

/// `(id, image, mask)` triples of a training directory.
fn training_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let masks = metrics::mask_files(dir)?;
    let mut out = Vec::new();
    for img in list_images(dir)? {
        let id = nifti_stem(&img).unwrap_or_default().to_string();
        if let Some(m) = masks.get(&id).filter(|m| **m != img) {
            out.push((id, img, m.clone()));
        }
    }
    Ok(out)
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    if !a.data.is_dir() {
        usage_error(ErrorKind::ValueValidation, format!("data directory {} does not exist", a.data.display()));
    }
    let (mut cfg, mut net) = if a.desk {
        (TrainConfig::desk(), NetConfig::new(3, 8))
    } else {
        (TrainConfig::default(), NetConfig::default())
    };
    if let Some(p) = &a.config {
        cfg = TrainConfig::from_kv(&read_text(p)?, cfg)?;
    }
    if let Some(p) = &a.net_config {
        net = NetConfig::from_kv(&read_text(p)?)?;
    }
    if a.depth.is_some() || a.width.is_some() {
        net = NetConfig {
            leaky_slope: net.leaky_slope,
            in_eps: net.in_eps,
            ..NetConfig::new(a.depth.unwrap_or(net.depth), a.width.unwrap_or(net.base_width))
        };
    }
    let aug = match (&a.aug_config, a.no_augment) {
        (_, true) => AugmentConfig::disabled(),
        (Some(p), _) => AugmentConfig::from_kv(&read_text(p)?)?,
        (None, false) => AugmentConfig::default(),
    };
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batches {
        cfg.batches_per_epoch = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = [v; 3];
    }
    if let Some(v) = a.lr {
        cfg.alpha0 = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Err(e) = net.validate().and_then(|_| cfg.validate(&net)).and_then(|_| aug.validate()) {
        usage_error(ErrorKind::ValueValidation, e);
    }
    if let Some(k) = a.fold {
        if k >= cfg.folds {
            usage_error(ErrorKind::ValueValidation, format!("fold {k} out of range for {} folds", cfg.folds));
        }
    }

    let pairs = training_pairs(&a.data)?;
    if pairs.is_empty() {
        bail!("no image/mask pairs found in {}", a.data.display());
    }
    eprintln!("preprocessing {} cases", pairs.len());
    let cases: Vec<(Volume, BrainMask)> = pairs
        .par_iter()
        .map(|(id, img, msk)| -> Result<(Volume, BrainMask)> {
            let image = read_nifti(img)?;
            let mask = metrics::load_mask(msk)?;
            prepare_training_case(&image, &mask, a.zscore).with_context(|| format!("case {id}"))
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    fs::write(a.output.join("train.cfg"), cfg.to_kv())?;
    fs::write(a.output.join("augment.cfg"), aug.to_kv())?;

    let indices: Vec<usize> = (0..cases.len()).collect();
    let runs: Vec<(String, Vec<usize>)> = if a.full {
        vec![("full".to_string(), indices)]
    } else {
        let folds = kfold_split(&indices, cfg.folds, cfg.seed)?;
        let wanted: Vec<usize> = a.fold.map_or_else(|| (0..cfg.folds).collect(), |k| vec![k]);
        wanted
            .into_iter()
            .map(|k| {
                let train: Vec<usize> = indices.iter().copied().filter(|i| !folds[k].contains(i)).collect();
                (format!("fold{k}"), train)
            })
            .collect()
    };
    for (name, members) in runs {
        let subset: Vec<(Volume, BrainMask)> = members.iter().map(|&i| cases[i].clone()).collect();
        eprintln!("{name}: training on {} cases", subset.len());
        let total = cfg.epochs;
        let out = trainer::train(&subset, &net, &cfg, &aug, |s| {
            eprintln!("{name} epoch {}/{total} loss {:.5} lr {:.3e}", s.epoch + 1, s.mean_loss, s.lr);
        })?;
        let weights = a.output.join(format!("{name}.hdbw"));
        save_model(&weights, &net, &out.weights)?;
        write_history(&a.output.join(format!("{name}_loss.csv")), &out.history)?;
        println!("{}", weights.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    for d in [&a.pred, &a.gt] {
        if !d.is_dir() {
            usage_error(ErrorKind::ValueValidation, format!("directory {} does not exist", d.display()));
        }
    }
    if let Some(p) = a.cases.as_ref().filter(|p| !p.is_file()) {
        usage_error(ErrorKind::ValueValidation, format!("cases file {} does not exist", p.display()));
    }
    let cases_csv = a.cases.clone().or_else(|| Some(a.gt.join("cases.csv")).filter(|p| p.is_file()));
    let sequences = match cases_csv {
        Some(p) => phantom::read_case_sequences(&p)?,
        None => HashMap::new(),
    };
    let ev = evaluate_cases(&a.pred, &a.gt, &sequences)?;
    write_metrics_csv(&a.output, &a.algorithm, &ev.cases)?;
    println!("sequence  n  dice median [q1, q3]  hd95 median [q1, q3] mm");
    for s in &ev.summary {
        let hd = s.hd95.map_or_else(
            || "NA".to_string(),
            |h| format!("{:.3} [{:.3}, {:.3}]", h.median, h.q1, h.q3),
        );
        println!(
            "{:<8} {:>3}  {:.3} [{:.3}, {:.3}]  {hd}",
            s.sequence.to_string(),
            s.dice.n,
            s.dice.median,
            s.dice.q1,
            s.dice.q3
        );
    }
    for id in &ev.missing_predictions {
        eprintln!("missing prediction: {id}");
    }
    for id in &ev.missing_references {
        eprintln!("missing reference: {id}");
    }
    for (id, e) in &ev.errors {
        eprintln!("error: {id}: {}", chain(e));
    }
    Ok(if ev.errors.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Rows of all inputs; algorithm names repeated across files get a `#i`
/// suffix with the 1-based file position.
fn load_labelled(inputs: &[PathBuf]) -> Result<Vec<MetricsRow>> {
    let tables: Vec<Vec<MetricsRow>> = inputs
        .iter()
        .map(|p| read_metrics_csv(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    let mut owners: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, t) in tables.iter().enumerate() {
        let mut names: Vec<&str> = t.iter().map(|r| r.algorithm.as_str()).collect();
        names.dedup();
        for n in names {
            let e = owners.entry(n.to_string()).or_default();
            if !e.contains(&i) {
                e.push(i);
            }
        }
    }
    let mut rows = Vec::new();
    for (i, t) in tables.into_iter().enumerate() {
        for mut r in t {
            if owners[&r.algorithm].len() > 1 {
                r.algorithm = format!("{}#{}", r.algorithm, i + 1);
            }
            rows.push(r);
        }
    }
    Ok(rows)
}

fn friedman_report(rows: &[MetricsRow]) {
    let mut algorithms: Vec<&str> = Vec::new();
    for r in rows {
        if !algorithms.contains(&r.algorithm.as_str()) {
            algorithms.push(&r.algorithm);
        }
    }
    if algorithms.len() < 3 {
        return;
    }
    let mut by_case: HashMap<&str, Vec<f64>> = HashMap::new();
    for r in rows {
        let pos = algorithms.iter().position(|a| *a == r.algorithm).unwrap();
        by_case
            .entry(r.metrics.case_id.as_str())
            .or_insert_with(|| vec![f64::NAN; algorithms.len()])[pos] = r.metrics.dice_pct;
    }
    let mut ids: Vec<&&str> = by_case.keys().collect();
    ids.sort();
    let matrix: Vec<Vec<f64>> = ids
        .into_iter()
        .map(|id| by_case[*id].clone())
        .filter(|row| row.iter().all(|v| !v.is_nan()))
        .collect();
    match friedman(&matrix) {
        Ok((r, _)) => println!("friedman dice: chi2 {:.4} dof {} p {:.4e} (n = {})", r.chi2, r.dof, r.p, r.n),
        Err(e) => eprintln!("friedman dice: {}", chain(&e)),
    }
}

fn cmd_compare(a: CompareArgs) -> Result<ExitCode> {
    for p in &a.inputs {
        if !p.is_file() {
            usage_error(ErrorKind::ValueValidation, format!("metrics file {} does not exist", p.display()));
        }
    }
    let rows = load_labelled(&a.inputs)?;
    let Some(first) = rows.first() else {
        bail!("metrics files contain no rows");
    };
    let reference = a.reference.clone().unwrap_or_else(|| first.algorithm.clone());
    let comparisons = compare_algorithms(&rows, &reference)?;
    let mut reports = Vec::new();
    let mut failed = 0;
    for c in comparisons {
        match c.result {
            Ok(r) => {
                println!(
                    "{}: |Z| {:.3}, p {:.3e}, p_bonf {:.3e}, r {:.3} ({}), n {}",
                    r.comparison,
                    r.abs_z,
                    r.p_raw,
                    r.p_bonferroni,
                    r.effect_r,
                    stats::effect_label(r.effect_r),
                    r.n_pairs
                );
                if r.zeros_dropped > 0 {
                    eprintln!("{}: dropped {} zero difference(s)", r.comparison, r.zeros_dropped);
                }
                reports.push(r);
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {}", c.label, chain(&e));
            }
        }
    }
    friedman_report(&rows);
    write_comparison_csv(&a.output, &reports)?;
    Ok(if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_phantom(a: PhantomArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => PhantomConfig::from_kv(&read_text(p)?)?,
        None => PhantomConfig::default(),
    };
    if let Some(p) = a.preset {
        cfg.preset = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.n == 0 {
        usage_error(ErrorKind::ValueValidation, "--n must be at least 1");
    }
    let holdout = a.holdout.unwrap_or(a.n / 5);
    if holdout > 0 && holdout >= a.n {
        usage_error(ErrorKind::ValueValidation, format!("--holdout {holdout} leaves no training cases"));
    }
    if let Err(e) = cfg.validate() {
        usage_error(ErrorKind::ValueValidation, e);
    }
    let recs = generate_set(&cfg, a.n, holdout, &a.output)?;
    fs::write(a.output.join("phantom.cfg"), cfg.to_kv())?;
    println!("wrote {} cases to {} ({} held out)", recs.len(), a.output.display(), holdout);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let results = gradcheck::run_suite(a.seed)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<40} max rel err {:.3e} over {:>3} coords  {}",
            r.name,
            r.max_rel_err,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            usage_error(ErrorKind::ValueValidation, "--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
