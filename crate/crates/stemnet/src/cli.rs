//! The `stemnet` command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stemnet_core::gradcheck::{check_network, layer_suite, Fault, GradReport, LayerOp, STEP};
use stemnet_core::preprocess::{crop_volume, embed_labels, normalize_intensity, volume_to_tensor, CropWindow};
use stemnet_core::train::{train_two_stage, Clock, NoClock, Schedule, TrainLog};
use stemnet_core::unet::{UNetConfig, UNetParams};
use stemnet_core::Structure;

use crate::checkpoint;
use crate::config::{resolve_threads, RunConfig};
use crate::dataset::{self, GenerateOptions};
use crate::error::{CliError, Result};
use crate::manifest::{resolve, Manifest, Split};
use crate::nifti;
use crate::report::{time_inference, MetricsReport, SubjectMetrics};

/// Largest relative error any gradient check may show.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
/// Looser bound for the whole-network composite.
pub const NETWORK_GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "stemnet", version, about = "Brainstem parcellation with a 3D U-Net")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (falls back to STEMNET_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Reproducible output: logged durations are written as zero.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom cohort with a manifest.
    PhantomGen(PhantomGenArgs),
    /// Two-stage training on the train/val subjects of a manifest.
    Train(TrainArgs),
    /// Segment one volume.
    Predict(PredictArgs),
    /// Score predictions against reference labels.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every backward pass in 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cubic extent in voxels; geometry scales with it.
    #[arg(long)]
    pub extent: Option<usize>,
    /// Replace training and validation labels with simulated atlas fusion.
    #[arg(long)]
    pub fusion: bool,
    /// Train:val:test proportions, e.g. 27:8:15.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[u32; 3]>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    TwoStage,
    DiceOnly,
    WceOnly,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Network input (and crop) edge length.
    #[arg(long)]
    pub input_extent: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Crop center voxel "x,y,z".
    #[arg(long, value_parser = parse_center)]
    pub center: Option<[usize; 3]>,
    /// Manifest to look the crop center up in when --center is absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted label maps.
    #[arg(long, requires = "reference", conflicts_with_all = ["manifest", "checkpoint"])]
    pub pred: Option<PathBuf>,
    /// Directory of reference label maps with matching file names.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Evaluate a checkpoint on the manifest's test subjects.
    #[arg(long, requires = "checkpoint")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write re-embedded predictions into this directory.
    #[arg(long)]
    pub save_predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradLevel {
    Layers,
    Full,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradLevel::Full)]
    pub level: GradLevel,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Negate the analytic gradient of one op (tests the checker itself).
    #[arg(long, hide = true, value_parser = parse_op)]
    pub inject_sign_flip: Option<LayerOp>,
}

fn parse_split(s: &str) -> std::result::Result<[u32; 3], String> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<u32> = parts.iter().filter_map(|p| p.trim().parse().ok()).collect();
    match nums.as_slice() {
        [a, b, c] if parts.len() == 3 => Ok([*a, *b, *c]),
        _ => Err(format!("expected three ':'-separated integers, got {s:?}")),
    }
}

fn parse_center(s: &str) -> std::result::Result<[usize; 3], String> {
    let nums: Vec<usize> = s.split(',').filter_map(|p| p.trim().parse().ok()).collect();
    match nums.as_slice() {
        [x, y, z] if s.split(',').count() == 3 => Ok([*x, *y, *z]),
        _ => Err(format!("expected \"x,y,z\" voxel coordinates, got {s:?}")),
    }
}

fn parse_op(s: &str) -> std::result::Result<LayerOp, String> {
    LayerOp::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| {
        let names: Vec<&str> = LayerOp::ALL.iter().map(|o| o.name()).collect();
        format!("unknown op {s:?}; one of {}", names.join(", "))
    })
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.deterministic {
        c.deterministic = true;
    }
    c.threads = resolve_threads(cli.threads, c.threads)?;
    Ok(c)
}

fn setup_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let mut config = base_config(&cli)?;
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(&mut config, a),
        Command::Train(a) => train(&mut config, a),
        Command::Predict(a) => {
            config.validate()?;
            setup_threads(config.threads);
            predict(a)
        }
        Command::Evaluate(a) => {
            config.validate()?;
            setup_threads(config.threads);
            evaluate(a)
        }
        Command::Gradcheck(a) => {
            setup_threads(config.threads);
            gradcheck(a)
        }
    }
}

fn phantom_gen(config: &mut RunConfig, a: PhantomGenArgs) -> Result<()> {
    if let Some(e) = a.extent {
        let mm = config.phantom.spacing[0] * config.phantom.extent[0] as f64 / e as f64;
        config.phantom.extent = [e; 3];
        config.phantom.spacing = [mm; 3];
    }
    if let Some(s) = a.split {
        config.split = s;
    }
    config.train.seed = a.seed;
    config.validate()?;
    setup_threads(config.threads);
    create_dir(&a.out)?;
    let m = dataset::generate_dataset(
        &a.out,
        &GenerateOptions {
            spec: &config.phantom,
            subjects: a.subjects,
            seed: a.seed,
            split: config.split,
            fusion: a.fusion.then_some(&config.fusion),
        },
    )?;
    config.echo(&a.out)?;
    let [tr, va, te] = m.counts();
    println!("wrote {} subjects to {} (train {tr}, val {va}, test {te})", m.subjects.len(), a.out.display());
    Ok(())
}

fn apply_train_flags(config: &mut RunConfig, a: &TrainArgs) {
    let t = &mut config.train;
    if let Some(v) = a.pretrain_epochs {
        t.pretrain_epochs = v;
    }
    if let Some(v) = a.epochs {
        t.final_epochs = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(s) = a.schedule {
        t.schedule = match s {
            ScheduleArg::TwoStage => Schedule::TwoStage,
            ScheduleArg::DiceOnly => Schedule::DiceOnly,
            ScheduleArg::WceOnly => Schedule::WceOnly,
        };
    }
    let u = &mut config.unet;
    if let Some(v) = a.levels {
        u.levels = v;
    }
    if let Some(v) = a.base_channels {
        u.base_channels = v;
    }
    if let Some(v) = a.input_extent {
        u.input_extent = v;
    }
}

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.bsun";
pub const FINAL_CHECKPOINT: &str = "final.bsun";
pub const TRAIN_LOG: &str = "train_log.txt";

fn train(config: &mut RunConfig, a: TrainArgs) -> Result<()> {
    apply_train_flags(config, &a);
    let init = match &a.init {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            config.unet = ck.params.config;
            Some(ck.params)
        }
        None => None,
    };
    config.validate()?;
    setup_threads(config.threads);
    let manifest = Manifest::load(&a.manifest)?;
    create_dir(&a.out)?;
    config.echo(&a.out)?;

    let extent = config.unet.input_extent;
    let train_set = dataset::samples(&dataset::load_split(&a.manifest, &manifest, Split::Train)?, extent)?;
    let val_set = dataset::samples(&dataset::load_split(&a.manifest, &manifest, Split::Val)?, extent)?;
    let params = match init {
        Some(p) => p,
        None => UNetParams::init(&config.unet, config.train.seed)?,
    };
    eprintln!(
        "training {} on {} subjects ({} validation), {} parameters",
        config.train.schedule.name(),
        train_set.len(),
        val_set.len(),
        params.parameter_count()
    );
    let mut wall = WallClock(Instant::now());
    let mut zero = NoClock;
    let clock: &mut dyn Clock = if config.deterministic { &mut zero } else { &mut wall };
    let log_path = a.out.join(TRAIN_LOG);
    let mut log_text = String::from(TrainLog::HEADER);
    log_text.push('\n');
    let outcome = train_two_stage(params, &train_set, &val_set, &config.train, clock, &mut |r| {
        let line = TrainLog::line(r);
        eprintln!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
        // keep a readable log even if a later epoch fails
        let _ = fs::write(&log_path, &log_text);
    })?;
    fs::write(&log_path, outcome.log.to_text()).map_err(|e| CliError::io(&log_path, e))?;
    if let Some(p) = &outcome.pretrain {
        checkpoint::save(&a.out.join(PRETRAIN_CHECKPOINT), p)?;
    }
    checkpoint::save(&a.out.join(FINAL_CHECKPOINT), &outcome.final_checkpoint)?;
    if let Some(last) = outcome.log.last() {
        println!("final validation mean foreground DSC {:.4}", last.mean_foreground_dsc());
    }
    Ok(())
}

fn manifest_center(manifest_path: &Path, input: &Path) -> Result<Option<[usize; 3]>> {
    let m = Manifest::load(manifest_path)?;
    let want = fs::canonicalize(input).map_err(|e| CliError::io(input, e))?;
    for s in &m.subjects {
        let p = resolve(manifest_path, &s.image);
        if fs::canonicalize(&p).is_ok_and(|p| p == want) {
            return Ok(s.crop_center);
        }
    }
    Ok(None)
}

/// Normalize, crop, segment and re-embed one image.
fn segment(params: &UNetParams<f32>, image: &stemnet_core::Volume, center: [usize; 3]) -> Result<(stemnet_core::LabelVolume, f64)> {
    let norm = normalize_intensity(image)?;
    let extent = params.config.input_extent;
    let window = CropWindow::centered(norm.dims, center, [extent; 3])?;
    let x = volume_to_tensor(&crop_volume(&norm, &window)?);
    let (seconds, pred) = time_inference(params, &x, image.spacing)?;
    let mut full = embed_labels(&pred, &window, image.spacing)?;
    full.affine = image.affine;
    Ok((full, seconds))
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let image = nifti::load_volume(&a.input)?;
    let center = match (a.center, &a.manifest) {
        (Some(c), _) => c,
        (None, Some(m)) => manifest_center(m, &a.input)?.ok_or(stemnet_core::Error::MissingCenter)?,
        (None, None) => return Err(stemnet_core::Error::MissingCenter.into()),
    };
    let (labels, seconds) = segment(&ck.params, &image, center)?;
    nifti::save_labels(&a.out, &labels)?;
    let volumes = stemnet_core::metrics::structure_volumes(&labels);
    for s in Structure::FOREGROUND {
        println!("{:<10} {:>12.1} mm³", s.name(), volumes[s.index()]);
    }
    println!("inference {seconds:.3} s");
    Ok(())
}

fn strip_nifti_ext(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(strip_nifti_ext) {
            out.insert(id.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let report = match (&a.pred, &a.reference, &a.manifest, &a.checkpoint) {
        (Some(pred), Some(reference), None, None) => evaluate_dirs(pred, reference)?,
        (None, None, Some(m), Some(c)) => evaluate_checkpoint(m, c, a.save_predictions.as_deref())?,
        _ => return Err(CliError::Usage("give either --pred and --ref, or --manifest and --checkpoint".into())),
    };
    print!("{}", report.table());
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

pub fn evaluate_dirs(pred: &Path, reference: &Path) -> Result<MetricsReport> {
    let p = label_files(pred)?;
    let r = label_files(reference)?;
    let only_pred: Vec<&str> = p.keys().filter(|k| !r.contains_key(*k)).map(String::as_str).collect();
    let only_ref: Vec<&str> = r.keys().filter(|k| !p.contains_key(*k)).map(String::as_str).collect();
    if !only_pred.is_empty() || !only_ref.is_empty() {
        let mut parts = Vec::new();
        if !only_pred.is_empty() {
            parts.push(format!("only in predictions: {}", only_pred.join(", ")));
        }
        if !only_ref.is_empty() {
            parts.push(format!("only in references: {}", only_ref.join(", ")));
        }
        return Err(CliError::SubjectMismatch(parts.join("; ")));
    }
    let mut subjects = Vec::new();
    for (id, path) in &p {
        let pl = nifti::load_labels(path)?;
        let rl = nifti::load_labels(&r[id])?;
        subjects.push(SubjectMetrics::new(id, &pl, Some(&rl), None)?);
    }
    MetricsReport::new(subjects)
}

pub fn evaluate_checkpoint(manifest_path: &Path, ck: &Path, save: Option<&Path>) -> Result<MetricsReport> {
    let manifest = Manifest::load(manifest_path)?;
    let ck = checkpoint::load(ck)?;
    if let Some(d) = save {
        create_dir(d)?;
    }
    let mut subjects = Vec::new();
    for s in manifest.split(Split::Test) {
        let image = nifti::load_volume(&resolve(manifest_path, &s.image))?;
        let center = s.crop_center.ok_or(stemnet_core::Error::MissingCenter)?;
        let (pred, seconds) = segment(&ck.params, &image, center)?;
        let reference = match &s.label {
            Some(l) => Some(nifti::load_labels(&resolve(manifest_path, l))?),
            None => None,
        };
        if let Some(d) = save {
            nifti::save_labels(&d.join(format!("{}.nii.gz", s.id)), &pred)?;
        }
        subjects.push(SubjectMetrics::new(&s.id, &pred, reference.as_ref(), Some(seconds))?);
    }
    MetricsReport::new(subjects)
}

/// Layer suite (and optionally the network composite); returns the
/// reports and whether every check passed.
pub fn run_gradcheck(level: GradLevel, seed: u64, seeds: usize, fault: Option<Fault>) -> Result<(Vec<GradReport>, bool)> {
    let mut reports = layer_suite(seed, seeds, fault)?;
    let mut ok = reports.iter().all(|r| r.passed(GRADCHECK_TOLERANCE));
    if level == GradLevel::Full {
        let config = UNetConfig { levels: 3, base_channels: 2, input_extent: 32, ..Default::default() };
        let net = check_network(&config, seed, 6, STEP)?;
        ok &= net.passed(NETWORK_GRADCHECK_TOLERANCE);
        reports.push(net);
    }
    Ok((reports, ok))
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be ≥ 1".into()));
    }
    let fault = a.inject_sign_flip.map(Fault::SignFlip);
    let (reports, ok) = run_gradcheck(a.level, a.seed, a.seeds, fault)?;
    let mut failed = Vec::new();
    let layers = reports.len() - usize::from(a.level == GradLevel::Full);
    for (i, r) in reports.iter().enumerate() {
        let tol = if i < layers { GRADCHECK_TOLERANCE } else { NETWORK_GRADCHECK_TOLERANCE };
        let verdict = if r.passed(tol) { "ok" } else { "FAIL" };
        println!("{:<32} max rel error {:.3e}  (tol {tol:.0e}) {verdict}", r.op, r.max_rel_error());
        if !r.passed(tol) {
            failed.push(r.op.clone());
        }
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}
