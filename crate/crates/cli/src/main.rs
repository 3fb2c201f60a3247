mod config;
mod errors;
mod overlay;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use recess_core::dataset::{
    grouped_kfold, load_manifest, read_folds, train_val_split, write_folds, DatasetManifest, FoldSplit,
};
use recess_core::evolve::{self, Bounds, EvolveConfig, HyperParams, MutationParams};
use recess_core::imaging::{scale_box, BBox, GrayImage, LabeledBox};
use recess_core::metrics::EvalReport;
use recess_core::model::{Mode, Model, ModelConfig};
use recess_core::phantom::{generate_dataset, PhantomParams};
use recess_core::preprocess::{extract_and_resize, CropRegion, FrameConfig};
use recess_core::training::{
    evaluate, load_samples, run_fold, CvSummary, EpochRecord, FoldResult, Sample, EVAL_CONF_THRESHOLD,
};
use serde::Serialize;

use crate::config::{require_paths, RunConfig};
use crate::errors::{exit_code, trailer, UserError};
use crate::overlay::{save_overlay, Drawn, DETECTION_COLOR, MULTITASK_COLOR};

#[derive(Parser, Debug)]
#[command(name = "recess-cad", version, about = "Detection and distension classification of the knee subquadricipital recess")]
struct Cli {
    /// Print a JSON error trailer on standard error when a command fails.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crop raw device frames to the scan area and resize them.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Write patient-grouped cross-validation folds.
    Split(SplitArgs),
    /// Train on one fold (or all folds) and evaluate on the held-out test set.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Evolutionary hyperparameter search on one fold.
    Evolve(EvolveArgs),
    /// Predict and write overlays for single images or a directory.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Directory of raw PNG frames.
    #[arg(long = "in", alias = "input")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Crop report (defaults to OUT/report.json).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// JSON FrameConfig overriding the default thresholds and kernels.
    #[arg(long)]
    frame_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write raw device canvases and their true crop regions.
    #[arg(long)]
    raw: bool,
    /// Overlapping thickness ranges for ambiguous cases.
    #[arg(long)]
    borderline: bool,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    p_distended: Option<f64>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Detection,
    Multitask,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Detection => Mode::DetectionTwoClass,
            ModeArg::Multitask => Mode::MultiTask,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelSize {
    Tiny,
    Standard,
}

/// Flags shared by `train` and `evolve`; each overrides the config file.
#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// RunConfig JSON; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, value_enum)]
    model: Option<ModelSize>,
    /// Network input size; must equal the manifest image size.
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// HyperParams JSON applied on top of the configuration.
    #[arg(long)]
    hyperparams: Option<PathBuf>,
    /// Seed of training, model initialisation and the validation split.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train every fold in turn and summarise them.
    #[arg(long)]
    all_folds: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Seed of the validation carve-out (defaults to the training run's).
    #[arg(long)]
    seed: Option<u64>,
    /// Report path (JSON); the table is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitialGenome {
    /// The genome derived from the run configuration.
    Config,
    /// The published best genome of the selected mode.
    Published,
}

#[derive(Args, Debug)]
struct EvolveArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 300)]
    generations: usize,
    /// History file, one GenerationRecord per line.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the records already in OUT.
    #[arg(long)]
    resume: bool,
    /// Cap on training epochs per fitness evaluation.
    #[arg(long)]
    budget_epochs: Option<usize>,
    #[arg(long, value_enum, default_value = "published")]
    initial: InitialGenome,
    /// JSON map of gene -> [lo, hi] replacing the default bounds.
    #[arg(long)]
    bounds: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint; give one per mode to draw both approaches.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Single image; OUT is then the overlay PNG.
    #[arg(long, conflicts_with = "input")]
    image: Option<PathBuf>,
    /// Directory of images; OUT is then a directory.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Ground-truth box `x_min,y_min,x_max,y_max` in image pixels (single image).
    #[arg(long, value_parser = parse_box, requires = "image")]
    gt: Option<BBox>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = EVAL_CONF_THRESHOLD)]
    conf_threshold: f64,
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 4 {
        return Err("expected x_min,y_min,x_max,y_max".into());
    }
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ------------------------------------------------------------ preprocess

#[derive(Serialize)]
struct PreprocessReport {
    size: usize,
    frame_config: FrameConfig,
    crops: BTreeMap<String, CropRegion>,
    failures: BTreeMap<String, String>,
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    require_paths([a.input.as_path()])?;
    let cfg = match &a.frame_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<FrameConfig>(&text).map_err(|e| UserError(format!("{}: {e}", p.display())))?
        }
        None => FrameConfig::default(),
    };
    if a.size < 64 {
        bail!(UserError("--size must be at least 64".into()));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let files = png_files(&a.input)?;
    let results: Vec<(String, Result<CropRegion>)> = files
        .par_iter()
        .map(|f| {
            let name = file_name(f);
            let r = (|| -> Result<CropRegion> {
                let raw = GrayImage::load_png(f)?;
                let (img, region) = extract_and_resize(&raw, &cfg, a.size)?;
                img.save_png(a.out.join(&name))?;
                Ok(region)
            })();
            (name, r)
        })
        .collect();
    let mut report = PreprocessReport {
        size: a.size,
        frame_config: cfg,
        crops: BTreeMap::new(),
        failures: BTreeMap::new(),
    };
    for (name, r) in results {
        match r {
            Ok(c) => {
                report.crops.insert(name, c);
            }
            Err(e) => {
                eprintln!("{name}: {e:#}");
                report.failures.insert(name, format!("{e:#}"));
            }
        }
    }
    let path = a.report.unwrap_or_else(|| a.out.join("report.json"));
    write_json(&path, &report)?;
    println!("cropped {} of {} frames", report.crops.len(), files.len());
    Ok(())
}

// ------------------------------------------------------------ synth, split

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut params = if a.borderline {
        PhantomParams::borderline(a.seed)
    } else {
        PhantomParams {
            seed: a.seed,
            ..PhantomParams::default()
        }
    };
    params.image_size = a.size;
    if let Some(p) = a.p_distended {
        params.p_distended = p;
    }
    let manifest = generate_dataset(&params, a.n, &a.out, a.raw)?;
    let c = manifest.counts();
    println!(
        "{} images ({} Distended, {} NonDistended) from {} patients in {}",
        c.n_total,
        c.n_distended,
        c.n_nondistended,
        c.n_patients,
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    require_paths([a.manifest.as_path()])?;
    let manifest = load_manifest(&a.manifest)?;
    let folds = grouped_kfold(&manifest, a.k, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_folds(&folds, &a.out)?;
    for f in &folds {
        println!("fold {}: {} train / {} test images", f.fold_index, f.train_ids.len(), f.test_ids.len());
    }
    Ok(())
}

// ------------------------------------------------------------ train

fn build_run_config(r: &RunArgs, out: Option<&Path>) -> Result<RunConfig> {
    let mut c = match (&r.config, r.mode) {
        (Some(p), _) => {
            require_paths([p.as_path()])?;
            RunConfig::load(p)?
        }
        (None, Some(m)) => RunConfig::defaults(m.into()),
        (None, None) => bail!(UserError("either --mode or --config is required".into())),
    };
    if let Some(m) = r.mode {
        let m: Mode = m.into();
        if m != c.mode {
            bail!(UserError(format!("--mode {m:?} conflicts with config mode {:?}", c.mode)));
        }
    }
    if let Some(size) = r.model {
        let input = c.model.input_size;
        c.model = match size {
            ModelSize::Tiny => ModelConfig::tiny(c.mode),
            ModelSize::Standard => ModelConfig::standard(c.mode),
        };
        if input != c.model.input_size {
            c.model = c.model.with_input_size(input);
        }
    }
    if let Some(n) = r.input_size {
        if n != c.model.input_size {
            c.model = c.model.clone().with_input_size(n);
        }
    }
    if let Some(p) = &r.manifest {
        c.paths.manifest = p.clone();
    }
    if let Some(p) = &r.folds {
        c.paths.folds = p.clone();
    }
    if let Some(p) = out {
        c.paths.out = p.to_path_buf();
    }
    if let Some(f) = r.fold {
        c.fold = f;
    }
    if let Some(v) = r.epochs {
        c.train.max_epochs = v;
    }
    if let Some(v) = r.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = r.lr {
        c.train.learning_rate = v;
    }
    if let Some(v) = r.momentum {
        c.train.momentum = v;
    }
    if let Some(v) = r.patience {
        c.train.patience = v;
    } else if r.epochs.is_some() {
        c.train.patience = c.train.patience.min(c.train.max_epochs);
    }
    if let Some(s) = r.seed {
        c.train.seed = s;
        c.model_seed = s;
        c.split_seed = s;
    }
    if let Some(p) = &r.hyperparams {
        require_paths([p.as_path()])?;
        let text = fs::read_to_string(p)?;
        let h: HyperParams = serde_json::from_str(&text).map_err(|e| UserError(format!("{}: {e}", p.display())))?;
        h.validate_for(c.mode).map_err(|e| UserError(e.to_string()))?;
        c.hyperparams = Some(h);
    }
    c.validate()?;
    Ok(c)
}

struct Data {
    manifest: DatasetManifest,
    folds: Vec<FoldSplit>,
    samples: Vec<Sample>,
}

/// Loads manifest, folds and images, checking image sizes against the model.
fn load_data(c: &RunConfig, model: &ModelConfig) -> Result<Data> {
    require_paths([c.paths.manifest.as_path(), c.paths.folds.as_path()])?;
    let manifest = load_manifest(&c.paths.manifest)?;
    check_sizes(&manifest, model)?;
    let folds = read_folds(&c.paths.folds)?;
    if c.fold >= folds.len() {
        bail!(UserError(format!("fold {} does not exist ({} folds)", c.fold, folds.len())));
    }
    let samples = load_samples(&manifest, model.input_size)?;
    Ok(Data {
        manifest,
        folds,
        samples,
    })
}

fn check_sizes(manifest: &DatasetManifest, model: &ModelConfig) -> Result<()> {
    let n = model.input_size;
    if let Some(a) = manifest.entries().iter().find(|a| a.width != n || a.height != n) {
        bail!(UserError(format!(
            "shape mismatch: model input is {n}x{n} but {} is {}x{}",
            a.image_id, a.width, a.height
        )));
    }
    Ok(())
}

fn print_report(title: &str, folds: &[(usize, &EvalReport)]) {
    let reports: Vec<EvalReport> = folds.iter().map(|(_, r)| (*r).clone()).collect();
    let summary = CvSummary::from_reports(&reports);
    println!("{}", summary.table(title, folds));
    for &(i, r) in folds {
        let cm = &r.confusion;
        println!(
            "fold {i} confusion: TP {} FN {} FP {} TN {} | mAP@0.5 {:.3} mAP@0.5:0.95 {:.3} IoU>=0.5 {:.3}",
            cm.tp, cm.fn_, cm.fp, cm.tn, r.map50, r.map5095, r.frac_iou_ge_05
        );
    }
}

fn train_fold(c: &RunConfig, data: &Data, fold: usize, dir: &Path) -> Result<FoldResult> {
    let (model_cfg, train_cfg) = c.effective();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let split = train_val_split(&data.folds[fold], &data.manifest, c.train_ratio, c.split_seed);
    let history_path = dir.join("history.jsonl");
    let mut history = BufWriter::new(
        fs::File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?,
    );
    let mut write_err = None;
    let (model, result) = run_fold(&data.manifest, &data.samples, &split, &model_cfg, &train_cfg, c.model_seed, |r: &EpochRecord| {
        eprintln!(
            "fold {fold} epoch {:>3}: loss {:.4} val fitness {:.4} BA {:.3} IoU {:.3}",
            r.epoch, r.train_loss.total, r.val_fitness, r.val_metrics.balanced_accuracy, r.val_metrics.mean_iou
        );
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if let Err(e) = writeln!(history, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", history_path.display()));
    }
    history.flush()?;
    let mut fold_cfg = c.clone();
    fold_cfg.fold = fold;
    model.save(dir.join("model.ckpt"), serde_json::to_value(&fold_cfg)?)?;
    write_json(&dir.join("report.json"), &result)?;
    Ok(result)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let c = build_run_config(&a.run, a.out.as_deref())?;
    if a.run.dump_config {
        println!("{}", c.to_json());
        return Ok(());
    }
    let (model_cfg, _) = c.effective();
    let data = load_data(&c, &model_cfg)?;
    let out = &c.paths.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &c)?;
    let title = format!("{:?}", c.mode);
    if a.all_folds {
        let mut results = Vec::new();
        for fold in 0..data.folds.len() {
            results.push(train_fold(&c, &data, fold, &out.join(format!("fold_{fold}")))?);
        }
        let reports: Vec<EvalReport> = results.iter().map(|r| r.report.clone()).collect();
        let summary = CvSummary::from_reports(&reports);
        write_json(
            &out.join("cv_report.json"),
            &serde_json::json!({ "mode": c.mode, "folds": results, "summary": summary }),
        )?;
        let folds: Vec<(usize, &EvalReport)> = results.iter().map(|r| (r.fold, &r.report)).collect();
        print_report(&title, &folds);
    } else {
        let result = train_fold(&c, &data, c.fold, out)?;
        print_report(&title, &[(result.fold, &result.report)]);
    }
    Ok(())
}

// ------------------------------------------------------------ eval

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_paths([a.checkpoint.as_path(), a.manifest.as_path()])?;
    let (model, extra) = Model::load(&a.checkpoint)?;
    let run: Option<RunConfig> = serde_json::from_value(extra).ok();
    let manifest = load_manifest(&a.manifest)?;
    check_sizes(&manifest, model.config())?;
    let ids: Vec<String> = if a.split == SplitName::All {
        manifest.entries().iter().map(|e| e.image_id.clone()).collect()
    } else {
        let folds_path = a
            .folds
            .clone()
            .or_else(|| run.as_ref().map(|r| r.paths.folds.clone()))
            .ok_or_else(|| UserError("--folds is required for this split".into()))?;
        require_paths([folds_path.as_path()])?;
        let folds = read_folds(&folds_path)?;
        let fold = a.fold.or(run.as_ref().map(|r| r.fold)).unwrap_or(0);
        let f = folds
            .get(fold)
            .ok_or_else(|| UserError(format!("fold {fold} does not exist ({} folds)", folds.len())))?;
        let ratio = run.as_ref().map_or(0.8, |r| r.train_ratio);
        let seed = a.seed.or(run.as_ref().map(|r| r.split_seed)).unwrap_or(0);
        let split = train_val_split(f, &manifest, ratio, seed);
        let set = match a.split {
            SplitName::Train => split.train_ids,
            SplitName::Val => split.val_ids,
            _ => split.test_ids,
        };
        set.into_iter().collect()
    };
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let samples = load_samples(&manifest, model.config().input_size)?;
    let chosen: Vec<&Sample> = samples.iter().filter(|s| wanted.contains(s.image_id.as_str())).collect();
    if chosen.is_empty() {
        bail!(UserError("the selected split is empty".into()));
    }
    let report = evaluate(&model, &chosen)?;
    let fold = a.fold.or(run.as_ref().map(|r| r.fold)).unwrap_or(0);
    print_report(&format!("{:?}", model.config().mode), &[(fold, &report)]);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

// ------------------------------------------------------------ evolve

fn cmd_evolve(a: EvolveArgs) -> Result<()> {
    let c = build_run_config(&a.run, None)?;
    let bounds = match &a.bounds {
        Some(p) => {
            require_paths([p.as_path()])?;
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<Bounds>(&text).map_err(|e| UserError(format!("{}: {e}", p.display())))?
        }
        None => Bounds::default(),
    };
    let config = EvolveConfig {
        generations: a.generations,
        seed: c.train.seed,
        bounds,
        mutation: MutationParams::default(),
        ..EvolveConfig::default()
    };
    let initial = match a.initial {
        InitialGenome::Published => HyperParams::published(c.mode),
        InitialGenome::Config => {
            let (m, t) = c.effective();
            HyperParams::from_configs(&t, &m)
        }
    };
    if a.run.dump_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({ "run": c, "evolve": config, "initial": initial }))?
        );
        return Ok(());
    }
    initial.validate(&config.bounds).map_err(|e| {
        UserError(format!("initial genome is outside the search bounds ({e}); pass --bounds or --initial published"))
    })?;
    let (model_cfg, train_cfg) = c.effective();
    let data = load_data(&c, &model_cfg)?;
    let resume = if a.resume && a.out.exists() {
        let f = fs::File::open(&a.out).with_context(|| format!("reading {}", a.out.display()))?;
        evolve::read_history(BufReader::new(f))?
    } else {
        Vec::new()
    };
    // rewrite the kept records so a truncated trailing line cannot survive
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for r in &resume {
        evolve::write_record(&mut out, r)?;
    }
    out.flush()?;
    let split = train_val_split(&data.folds[c.fold], &data.manifest, c.train_ratio, c.split_seed);
    let fitness = evolve::fold_fitness(
        &data.manifest,
        &data.samples,
        &split,
        &model_cfg,
        &train_cfg,
        c.model_seed,
        a.budget_epochs,
    );
    let outcome = evolve::evolve(&initial, fitness, &config, resume, |r| {
        eprintln!("generation {:>3}: fitness {:.4} {:?}", r.generation, r.fitness, r.genome.genes());
        evolve::write_record(&mut out, r)?;
        out.flush()?;
        Ok(())
    })?;
    println!(
        "best generation {} fitness {:.4}: {}",
        outcome.best.generation,
        outcome.best.fitness,
        serde_json::to_string(&outcome.best.genome)?
    );
    Ok(())
}

// ------------------------------------------------------------ infer

#[derive(Serialize)]
struct InferRecord {
    image: String,
    mode: Mode,
    label: String,
    confidence: f64,
    bbox: Option<BBox>,
    class_probs: Option<[f64; 2]>,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let mut models = Vec::new();
    for p in &a.checkpoint {
        require_paths([p.as_path()])?;
        models.push(Model::load(p)?.0);
    }
    let (files, single) = match (&a.image, &a.input) {
        (Some(f), None) => (vec![f.clone()], true),
        (None, Some(d)) => {
            require_paths([d.as_path()])?;
            (png_files(d)?, false)
        }
        _ => bail!(UserError("give exactly one of --image or --input".into())),
    };
    require_paths(files.iter().map(PathBuf::as_path))?;
    if !single {
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    }
    let stdout = std::io::stdout();
    let mut lines = stdout.lock();
    for f in &files {
        let img = GrayImage::load_png(f)?;
        let mut drawn = Vec::new();
        for model in &models {
            let n = model.config().input_size;
            let input = if img.width() == n && img.height() == n {
                img.clone()
            } else {
                recess_core::imaging::resize(&img, n, n)
            };
            let pred = model.predict(&[&input], a.conf_threshold)?.remove(0);
            let det = pred.detection.map(|d| LabeledBox {
                bbox: scale_box(&d.bbox, n, n, img.width(), img.height()),
                ..d
            });
            let record = InferRecord {
                image: file_name(f),
                mode: model.config().mode,
                label: pred.label.to_string(),
                confidence: pred.confidence,
                bbox: det.map(|d| d.bbox),
                class_probs: pred.class_probs,
            };
            writeln!(lines, "{}", serde_json::to_string(&record)?)?;
            if let Some(d) = det {
                let color = match model.config().mode {
                    Mode::MultiTask => MULTITASK_COLOR,
                    Mode::DetectionTwoClass => DETECTION_COLOR,
                };
                // the overlay names the image-level decision
                let shown = LabeledBox {
                    label: pred.label.into(),
                    confidence: pred.confidence,
                    ..d
                };
                drawn.push(Drawn { pred: shown, color });
            }
        }
        let target = if single { a.out.clone() } else { a.out.join(file_name(f)) };
        save_overlay(&target, &img, &drawn, a.gt.as_ref())?;
    }
    Ok(())
}

// ------------------------------------------------------------ main

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RECESS_CAD_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UserError(format!("RECESS_CAD_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Evolve(a) => cmd_evolve(a),
        Command::Infer(a) => cmd_infer(a),
    }
}

fn main() {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { errors::EXIT_USER } else { 0 };
            let _ = e.print();
            if code != 0 && json_errors {
                let err = anyhow::Error::new(e);
                eprintln!("{}", serde_json::to_string(&trailer(&err)).expect("trailer serializes"));
            }
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        if json_errors {
            eprintln!("{}", serde_json::to_string(&trailer(&err)).expect("trailer serializes"));
        }
        std::process::exit(exit_code(&err));
    }
}
