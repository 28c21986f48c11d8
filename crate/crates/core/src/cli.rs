//! Command-line surface: dataset generation, training, the four sampling and
//! editing tasks, evaluation, ablations, and gradient checking.
//!
//! Configuration precedence is CLI flag > config file > built-in default,
//! with the `USB_SEED` environment variable overriding the seed everywhere
//! (for CI). Every run writes a `manifest.json` with the resolved
//! configuration, seeds, and input-file hashes; given identical arguments and
//! inputs, reruns are bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, Triple};
use crate::denoiser::{ConvDenoiser, NoisePredictor};
use crate::editing::{self, EditDirection, EditRequest, GuidanceConfig};
use crate::field::{BinaryMask, Field};
use crate::metrics::{self, Featurizer, Kernel};
use crate::paired::{self, PairModels, PairSamplerOptions};
use crate::parallel::par_map_indexed;
use crate::pgm;
use crate::phantom::{LesionSpec, PhantomSpec};
use crate::rng::Stream;
use crate::trainer::{self, TrainConfig};
use crate::ubt;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Seed override for CI runs.
pub const SEED_ENV: &str = "USB_SEED";

/// On-disk run configuration; unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub lesion: LesionSpec,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    /// Inference timeline length K.
    pub timeline_steps: usize,
    pub seed: u64,
    /// Worker-pool cap; 0 keeps the library default.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomSpec::default(),
            lesion: LesionSpec::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            timeline_steps: 300,
            seed: 7,
            jobs: 0,
        }
    }
}

#[derive(Parser)]
#[command(name = "pairdiff", version, about = "Paired diffusion on synthetic phantoms")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cap on parallel worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Base seed (overridden by USB_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a phantom triple dataset split.
    Phantom(PhantomArgs),
    /// Train the paired models on a dataset.
    Train(TrainArgs),
    /// Jointly generate (mask, image) pairs from noise.
    SampleUncond(SampleUncondArgs),
    /// Generate images conditioned on a fixed lesion mask.
    SampleCond(SampleCondArgs),
    /// Bidirectional guided editing.
    Edit(EditArgs),
    /// Metric report: paired metrics and set-level distances.
    Eval(EvalArgs),
    /// Guidance/conditioning ablations and hyperparameter sweeps.
    Ablate(AblateArgs),
    /// Finite-difference gradient check; exits nonzero on failure.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 512)]
    pub count: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset root (as produced by `phantom`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConditionModeArg {
    /// Condition each branch on the partner's one-step clean estimate.
    Estimate,
    /// Condition each branch on the raw noisy partner (ablation).
    Noisy,
}

#[derive(Args)]
pub struct SampleUncondArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(short = 'n', long, default_value_t = 4)]
    pub n: usize,
    /// Inference timeline length K.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = ConditionModeArg::Estimate)]
    pub condition_mode: ConditionModeArg,
}

#[derive(Args)]
pub struct SampleCondArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Conditioning mask (.ubt, values 0/1).
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(short = 'n', long, default_value_t = 4)]
    pub n: usize,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    P2h,
    H2p,
}

#[derive(Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub direction: DirectionArg,
    /// Input image (.ubt).
    #[arg(long)]
    pub input: PathBuf,
    /// Target lesion mask (.ubt, 0/1); required for h2p.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub t_start_frac: Option<f64>,
    #[arg(long)]
    pub no_acg: bool,
    #[arg(long)]
    pub no_lcg: bool,
    /// Timeline positions at which to dump the guidance weight field.
    #[arg(long, value_delimiter = ',')]
    pub lambda_snapshots: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeaturizerArg {
    Downsample,
    Randproj,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of generated .ubt fields.
    #[arg(long)]
    pub generated: PathBuf,
    /// Directory of reference .ubt fields.
    #[arg(long)]
    pub reference: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FeaturizerArg::Downsample)]
    pub featurizer: FeaturizerArg,
    /// Also compute per-pair L1/PSNR/SSIM by matching sorted file names.
    #[arg(long)]
    pub paired: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ToggleArg {
    Acg,
    Lcg,
    Onestep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    Alpha0,
    K,
    Eta,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root holding held-out triples (split `test`, else `train`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub toggle: Option<ToggleArg>,
    #[arg(long, value_enum)]
    pub sweep: Option<SweepArg>,
    /// Number of held-out cases (or samples per mode for `onestep`).
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::CheckFailed(_) => EXIT_CHECK,
        _ => EXIT_CONFIG,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn resolve_seed(cfg: &mut RunConfig, flag: Option<u64>) -> Result<()> {
    if let Some(s) = flag {
        cfg.seed = s;
    }
    if let Ok(env_seed) = std::env::var(SEED_ENV) {
        cfg.seed = env_seed
            .parse::<u64>()
            .map_err(|e| Error::Config(format!("{SEED_ENV}={env_seed}: {e}")))?;
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn configure_jobs(jobs: usize) {
    if jobs > 0 {
        // Ignore failures from configuring twice (tests, repeated calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_jobs(_jobs: usize) {}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    resolve_seed(&mut cfg, cli.seed)?;
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    configure_jobs(cfg.jobs);
    match cli.command {
        Command::Phantom(args) => cmd_phantom(&cfg, &args),
        Command::Train(args) => cmd_train(&mut cfg, &args),
        Command::SampleUncond(args) => cmd_sample_uncond(&mut cfg, &args),
        Command::SampleCond(args) => cmd_sample_cond(&mut cfg, &args),
        Command::Edit(args) => cmd_edit(&mut cfg, &args),
        Command::Eval(args) => cmd_eval(&cfg, &args),
        Command::Ablate(args) => cmd_ablate(&mut cfg, &args),
        Command::Gradcheck(args) => cmd_gradcheck(&cfg, &args),
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    /// (path as given, sha256) for every input file read.
    inputs: Vec<(String, String)>,
    /// Output file names relative to the run directory.
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    outputs: Vec<String>,
) -> Result<()> {
    let mut hashed = Vec::with_capacity(inputs.len());
    for p in inputs {
        hashed.push((p.display().to_string(), sha256_file(p)?));
    }
    let manifest = RunManifest {
        command,
        seed: cfg.seed,
        config: cfg,
        inputs: hashed,
        outputs,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_phantom(cfg: &RunConfig, args: &PhantomArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    dataset::generate_split(
        &args.out,
        &args.split,
        &cfg.phantom,
        &cfg.lesion,
        args.count,
        cfg.seed,
    )?;
    let outputs = vec![format!("{}/manifest.json", args.split)];
    write_manifest(&args.out, "phantom", cfg, &[], outputs)?;
    println!(
        "wrote {} triples to {}",
        args.count,
        dataset::split_dir(&args.out, &args.split).display()
    );
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    cfg.train.seed = cfg.seed;
    cfg.train.dataset_dir = args.data.clone();
    ensure_dir(&args.out)?;
    let triples = dataset::load_dataset(&args.data, "train")?;
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let out = trainer::train(&cfg.train, &triples, &args.out, resume)?;
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(p) = &args.resume {
        inputs.push(p);
    }
    let outputs = vec![
        out.checkpoint_path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        "loss.csv".to_string(),
    ];
    write_manifest(&args.out, "train", cfg, &inputs, outputs)?;
    let (first, last) = (out.curve.first().unwrap(), out.curve.last().unwrap());
    println!(
        "trained {} steps: loss {:.4} -> {:.4} ({})",
        out.curve.len(),
        first.1 + first.2,
        last.1 + last.2,
        out.checkpoint_path.display()
    );
    Ok(())
}

fn load_models(path: &Path) -> Result<(Checkpoint, ConvDenoiser, ConvDenoiser)> {
    let ckpt = Checkpoint::load(path)?;
    let lesion = ckpt.lesion.clone();
    let brain = ckpt.brain.clone();
    Ok((ckpt, lesion, brain))
}

fn timeline_of(ckpt: &Checkpoint, cfg: &RunConfig, flag: Option<usize>) -> Result<crate::schedule::InferenceTimeline> {
    let k = flag.unwrap_or(cfg.timeline_steps).min(ckpt.schedule.len());
    ckpt.schedule.subsample(k)
}

fn cmd_sample_uncond(cfg: &mut RunConfig, args: &SampleUncondArgs) -> Result<()> {
    if let Some(k) = args.steps {
        cfg.timeline_steps = k;
    }
    ensure_dir(&args.out)?;
    let (ckpt, lesion, brain) = load_models(&args.ckpt)?;
    let timeline = timeline_of(&ckpt, cfg, args.steps)?;
    let opts = match args.condition_mode {
        ConditionModeArg::Estimate => PairSamplerOptions::default(),
        ConditionModeArg::Noisy => PairSamplerOptions::noisy_conditioning(),
    };
    let size = cfg.phantom.size;
    let base = Stream::new(cfg.seed);
    let models = PairModels {
        lesion: &lesion,
        brain: &brain,
    };
    let samples = par_map_indexed(args.n, |i| {
        let mut rng = base.substream(i as u64);
        paired::sample_unconditional_pair(&models, &timeline, &opts, size, size, &mut rng)
    });
    let mut outputs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mask01 = s.mask.to_field01();
        for (name, field) in [
            (format!("{i}.mask.ubt"), &mask01),
            (format!("{i}.image.ubt"), &s.pair.image),
        ] {
            ubt::save_field(&args.out.join(&name), field)?;
            outputs.push(name);
        }
        for (name, field) in [
            (format!("{i}.mask.pgm"), &s.pair.mask),
            (format!("{i}.image.pgm"), &s.pair.image),
        ] {
            pgm::write_pgm(&args.out.join(&name), field)?;
            outputs.push(name);
        }
    }
    write_manifest(&args.out, "sample-uncond", cfg, &[&args.ckpt], outputs)?;
    println!("sampled {} pairs into {}", args.n, args.out.display());
    Ok(())
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    Ok(ubt::load_field(path)?.binarize(0.5))
}

fn cmd_sample_cond(cfg: &mut RunConfig, args: &SampleCondArgs) -> Result<()> {
    if let Some(k) = args.steps {
        cfg.timeline_steps = k;
    }
    ensure_dir(&args.out)?;
    let (ckpt, _, brain) = load_models(&args.ckpt)?;
    let timeline = timeline_of(&ckpt, cfg, args.steps)?;
    let mask = load_mask(&args.mask)?;
    let base = Stream::new(cfg.seed);
    let images = par_map_indexed(args.n, |i| {
        let mut rng = base.substream(i as u64);
        paired::sample_conditional(&brain, &mask, &timeline, &mut rng)
    });
    let mut outputs = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let img = img.as_ref().map_err(|e| Error::Config(e.to_string()))?;
        let name = format!("{i}.image.ubt");
        ubt::save_field(&args.out.join(&name), img)?;
        outputs.push(name);
        let name = format!("{i}.image.pgm");
        pgm::write_pgm(&args.out.join(&name), img)?;
        outputs.push(name);
    }
    write_manifest(
        &args.out,
        "sample-cond",
        cfg,
        &[&args.ckpt, &args.mask],
        outputs,
    )?;
    println!("sampled {} conditional images into {}", args.n, args.out.display());
    Ok(())
}

fn cmd_edit(cfg: &mut RunConfig, args: &EditArgs) -> Result<()> {
    if let Some(v) = args.alpha0 {
        cfg.guidance.alpha0 = v;
    }
    if let Some(v) = args.k {
        cfg.guidance.k = v;
    }
    if let Some(v) = args.eta {
        cfg.guidance.eta = v;
    }
    if let Some(v) = args.t_start_frac {
        cfg.guidance.t_start_frac = v;
    }
    if args.no_acg {
        cfg.guidance.acg_enabled = false;
    }
    if args.no_lcg {
        cfg.guidance.lcg_enabled = false;
    }
    if let Some(k) = args.steps {
        cfg.timeline_steps = k;
    }
    ensure_dir(&args.out)?;
    let (ckpt, _, brain) = load_models(&args.ckpt)?;
    let timeline = timeline_of(&ckpt, cfg, args.steps)?;
    let source = ubt::load_field(&args.input)?;
    let direction = match args.direction {
        DirectionArg::P2h => EditDirection::P2h,
        DirectionArg::H2p => EditDirection::H2p,
    };
    let mask = match (&args.mask, direction) {
        (Some(p), _) => load_mask(p)?,
        (None, EditDirection::P2h) => BinaryMask::empty(source.height(), source.width()),
        (None, EditDirection::H2p) => {
            return Err(Error::Config("h2p editing requires --mask".into()))
        }
    };
    let request = EditRequest {
        source,
        mask,
        direction,
    };
    let mut rng = Stream::new(cfg.seed);
    let out = editing::edit(
        &brain,
        &request,
        &cfg.guidance,
        &timeline,
        &mut rng,
        &args.lambda_snapshots,
    )?;
    let mut outputs = Vec::new();
    ubt::save_field(&args.out.join("edited.ubt"), &out.image)?;
    outputs.push("edited.ubt".into());
    pgm::write_pgm(&args.out.join("edited.pgm"), &out.image)?;
    outputs.push("edited.pgm".into());
    for (pos, lam) in &out.lambda_snapshots {
        let name = format!("lambda-{pos:04}.ubt");
        ubt::save_field(&args.out.join(&name), lam)?;
        outputs.push(name);
    }
    let mut inputs: Vec<&Path> = vec![&args.ckpt, &args.input];
    if let Some(m) = &args.mask {
        inputs.push(m);
    }
    write_manifest(&args.out, "edit", cfg, &inputs, outputs)?;
    println!(
        "edited ({:?}, injected at t={} for {} steps) -> {}",
        args.direction,
        out.injected_at,
        out.steps_run,
        args.out.display()
    );
    Ok(())
}

fn read_field_dir(dir: &Path) -> Result<Vec<(String, Field)>> {
    let mut entries: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ubt"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no .ubt fields found in {}",
            dir.display()
        )));
    }
    entries
        .into_iter()
        .map(|n| Ok((n.clone(), ubt::load_field(&dir.join(&n))?)))
        .collect()
}

#[derive(Serialize)]
struct EvalReport {
    featurizer: String,
    kernel: String,
    generated_count: usize,
    reference_count: usize,
    frechet: f64,
    kid: f64,
    mmd2: f64,
    mmd_p_value: f64,
    pairs: Vec<PairMetrics>,
}

#[derive(Serialize)]
struct PairMetrics {
    generated: String,
    reference: String,
    l1: f64,
    psnr: f64,
    ssim: f64,
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let generated = read_field_dir(&args.generated)?;
    let reference = read_field_dir(&args.reference)?;
    let featurizer = match args.featurizer {
        FeaturizerArg::Downsample => Featurizer::DownsampleFlatten { grid: 8 },
        FeaturizerArg::Randproj => Featurizer::RandomProjection {
            dim: 32,
            seed: cfg.seed,
        },
    };
    let gen_fields: Vec<Field> = generated.iter().map(|(_, f)| f.clone()).collect();
    let ref_fields: Vec<Field> = reference.iter().map(|(_, f)| f.clone()).collect();
    let ge = metrics::embed_fields(&gen_fields, featurizer)?;
    let re = metrics::embed_fields(&ref_fields, featurizer)?;
    let frechet = metrics::frechet_distance(&metrics::moments(&ge)?, &metrics::moments(&re)?)?;
    let mut rng = Stream::new(cfg.seed);
    let kid = metrics::kid(&ge, &re, 10, 100, &mut rng)?;
    let kernel = Kernel::Rbf { bandwidth: None };
    let mmd2 = metrics::mmd2_unbiased(&ge, &re, kernel)?;
    let test = metrics::permutation_test(&ge, &re, kernel, 200, &mut rng)?;
    let mut pairs = Vec::new();
    if args.paired {
        if generated.len() != reference.len() {
            return Err(Error::Config(format!(
                "--paired needs equal counts, got {} vs {}",
                generated.len(),
                reference.len()
            )));
        }
        for ((gn, gf), (rn, rf)) in generated.iter().zip(&reference) {
            pairs.push(PairMetrics {
                generated: gn.clone(),
                reference: rn.clone(),
                l1: metrics::l1(gf, rf)?,
                psnr: metrics::psnr(gf, rf)?,
                ssim: metrics::ssim(gf, rf)?,
            });
        }
    }
    let report = EvalReport {
        featurizer: featurizer.id(),
        kernel: "rbf(median-heuristic)".into(),
        generated_count: generated.len(),
        reference_count: reference.len(),
        frechet,
        kid,
        mmd2,
        mmd_p_value: test.p_value,
        pairs,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report: {e}")))?;
    fs::write(&args.out, json).map_err(|e| Error::io(&args.out, e))?;
    println!(
        "eval: frechet {frechet:.5}, kid {kid:.5}, mmd2 {mmd2:.5} (p {:.3}) -> {}",
        test.p_value,
        args.out.display()
    );
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean absolute difference restricted to pixels where `mask` is off.
fn outside_l1(a: &Field, b: &Field, lesion: &Field) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..a.len() {
        if lesion.data()[i] == 0.0 {
            total += (a.data()[i] - b.data()[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn inside_mean_abs_shift(out: &Field, input: &Field, mask: &BinaryMask) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..out.height() {
        for x in 0..out.width() {
            if mask.get(y, x) {
                total += (out.get(y, x) - input.get(y, x)).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Shared helper for the editing ablations: runs p2h on `cases` triples with
/// the given guidance config and returns per-case (outside-lesion L1 vs the
/// healthy ground truth, whole-image PSNR vs healthy, whole-image L1 vs the
/// pathological input).
pub fn run_p2h_cases(
    brain: &dyn NoisePredictor,
    triples: &[Triple],
    guidance: &GuidanceConfig,
    timeline: &crate::schedule::InferenceTimeline,
    seed: u64,
    cases: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let base = Stream::new(seed);
    let results = par_map_indexed(cases.min(triples.len()), |i| {
        let t = &triples[i];
        let request = EditRequest {
            source: t.pathological.clone(),
            mask: BinaryMask::empty(t.mask.height(), t.mask.width()),
            direction: EditDirection::P2h,
        };
        let mut rng = base.substream(i as u64);
        let out = editing::edit(brain, &request, guidance, timeline, &mut rng, &[])?;
        let soft = crate::phantom::soft_support(&t.mask, 3.0);
        Ok::<_, Error>((
            outside_l1(&out.image, &t.healthy, &soft),
            metrics::psnr(&out.image, &t.healthy)?,
            metrics::l1(&out.image, &t.pathological)?,
        ))
    });
    results.into_iter().collect()
}

/// h2p counterpart: returns per-case inside-lesion mean |output - healthy|.
pub fn run_h2p_cases(
    brain: &dyn NoisePredictor,
    triples: &[Triple],
    guidance: &GuidanceConfig,
    timeline: &crate::schedule::InferenceTimeline,
    seed: u64,
    cases: usize,
) -> Result<Vec<f64>> {
    let base = Stream::new(seed);
    let results = par_map_indexed(cases.min(triples.len()), |i| {
        let t = &triples[i];
        let request = EditRequest {
            source: t.healthy.clone(),
            mask: t.mask.clone(),
            direction: EditDirection::H2p,
        };
        let mut rng = base.substream(i as u64);
        let out = editing::edit(brain, &request, guidance, timeline, &mut rng, &[])?;
        Ok::<_, Error>(inside_mean_abs_shift(&out.image, &t.healthy, &t.mask))
    });
    results.into_iter().collect()
}

#[derive(Serialize)]
struct AblateReport {
    mode: String,
    cases: usize,
    rows: Vec<AblateRow>,
    verdict: String,
}

#[derive(Serialize)]
struct AblateRow {
    setting: String,
    stats: serde_json::Value,
}

fn load_holdout(data: &Path) -> Result<Vec<Triple>> {
    dataset::load_dataset(data, "test").or_else(|_| dataset::load_dataset(data, "train"))
}

fn cmd_ablate(cfg: &mut RunConfig, args: &AblateArgs) -> Result<()> {
    if args.toggle.is_none() && args.sweep.is_none() {
        return Err(Error::Config("ablate needs --toggle or --sweep".into()));
    }
    if let Some(k) = args.steps {
        cfg.timeline_steps = k;
    }
    ensure_dir(&args.out)?;
    let (ckpt, lesion, brain) = load_models(&args.ckpt)?;
    let timeline = timeline_of(&ckpt, cfg, args.steps)?;
    let triples = load_holdout(&args.data)?;
    let cases = args.cases;
    let report = if let Some(toggle) = args.toggle {
        match toggle {
            ToggleArg::Acg => {
                let mut rows = Vec::new();
                let mut medians = Vec::new();
                for enabled in [true, false] {
                    let g = GuidanceConfig {
                        acg_enabled: enabled,
                        ..cfg.guidance
                    };
                    let stats = run_p2h_cases(&brain, &triples, &g, &timeline, cfg.seed, cases)?;
                    let mut l1s: Vec<f64> = stats.iter().map(|s| s.0).collect();
                    let mut psnrs: Vec<f64> = stats.iter().map(|s| s.1).collect();
                    let (ml1, mpsnr) = (median(&mut l1s), median(&mut psnrs));
                    medians.push((ml1, mpsnr));
                    rows.push(AblateRow {
                        setting: format!("acg={enabled}"),
                        stats: serde_json::json!({
                            "median_outside_l1": ml1,
                            "median_psnr": mpsnr,
                        }),
                    });
                }
                let verdict = format!(
                    "acg lowers outside-L1: {}; acg raises PSNR: {}",
                    medians[0].0 < medians[1].0,
                    medians[0].1 > medians[1].1
                );
                AblateReport {
                    mode: "toggle-acg".into(),
                    cases,
                    rows,
                    verdict,
                }
            }
            ToggleArg::Lcg => {
                let mut rows = Vec::new();
                let mut per_case: Vec<Vec<f64>> = Vec::new();
                for enabled in [true, false] {
                    let g = GuidanceConfig {
                        lcg_enabled: enabled,
                        ..cfg.guidance
                    };
                    let shifts = run_h2p_cases(&brain, &triples, &g, &timeline, cfg.seed, cases)?;
                    let mut sorted = shifts.clone();
                    rows.push(AblateRow {
                        setting: format!("lcg={enabled}"),
                        stats: serde_json::json!({
                            "median_inside_shift": median(&mut sorted),
                        }),
                    });
                    per_case.push(shifts);
                }
                let wins = per_case[0]
                    .iter()
                    .zip(&per_case[1])
                    .filter(|(w, wo)| w >= wo)
                    .count();
                let verdict = format!(
                    "lcg >= no-lcg inside-lesion shift on {wins}/{} cases",
                    per_case[0].len()
                );
                AblateReport {
                    mode: "toggle-lcg".into(),
                    cases,
                    rows,
                    verdict,
                }
            }
            ToggleArg::Onestep => {
                let reference: Vec<Field> =
                    triples.iter().map(|t| t.pathological.clone()).collect();
                let featurizer = Featurizer::DownsampleFlatten { grid: 8 };
                let re = metrics::embed_fields(&reference, featurizer)?;
                let size = reference[0].height();
                let mut rows = Vec::new();
                let mut mmds = Vec::new();
                for (name, opts) in [
                    ("estimate", PairSamplerOptions::default()),
                    ("noisy", PairSamplerOptions::noisy_conditioning()),
                ] {
                    let models = PairModels {
                        lesion: &lesion,
                        brain: &brain,
                    };
                    let base = Stream::new(cfg.seed);
                    let images: Vec<Field> = par_map_indexed(cases, |i| {
                        let mut rng = base.substream(i as u64);
                        paired::sample_unconditional_pair(
                            &models, &timeline, &opts, size, size, &mut rng,
                        )
                        .pair
                        .image
                    });
                    let ge = metrics::embed_fields(&images, featurizer)?;
                    let mmd = metrics::mmd2_unbiased(&ge, &re, Kernel::Rbf { bandwidth: None })?;
                    mmds.push(mmd);
                    rows.push(AblateRow {
                        setting: format!("conditioning={name}"),
                        stats: serde_json::json!({ "mmd2_to_train": mmd }),
                    });
                }
                AblateReport {
                    mode: "toggle-onestep".into(),
                    cases,
                    rows,
                    verdict: format!("estimate-conditioning lower MMD: {}", mmds[0] < mmds[1]),
                }
            }
        }
    } else {
        let sweep = args.sweep.unwrap();
        let (name, values): (&str, Vec<f64>) = match sweep {
            SweepArg::Alpha0 => ("alpha0", vec![5.0, 10.0, 20.0, 30.0]),
            SweepArg::K => ("k", vec![0.1, 0.5, 1.0]),
            SweepArg::Eta => ("eta", vec![0.1, 0.5, 1.0]),
        };
        let mut rows = Vec::new();
        let mut sequence = Vec::new();
        for &v in &values {
            let mut g = cfg.guidance;
            match sweep {
                SweepArg::Alpha0 => g.alpha0 = v,
                SweepArg::K => g.k = v,
                SweepArg::Eta => g.eta = v,
            }
            if sweep == SweepArg::Eta {
                let shifts = run_h2p_cases(&brain, &triples, &g, &timeline, cfg.seed, cases)?;
                let mut sorted = shifts;
                let m = median(&mut sorted);
                sequence.push(m);
                rows.push(AblateRow {
                    setting: format!("{name}={v}"),
                    stats: serde_json::json!({ "median_inside_shift": m }),
                });
            } else {
                let stats = run_p2h_cases(&brain, &triples, &g, &timeline, cfg.seed, cases)?;
                let mut whole: Vec<f64> = stats.iter().map(|s| s.2).collect();
                let m = median(&mut whole);
                sequence.push(m);
                rows.push(AblateRow {
                    setting: format!("{name}={v}"),
                    stats: serde_json::json!({ "median_whole_image_l1_to_input": m }),
                });
            }
        }
        let monotone = sequence.windows(2).all(|w| w[1] >= w[0]);
        AblateReport {
            mode: format!("sweep-{name}"),
            cases,
            rows,
            verdict: format!("sequence {sequence:?}, non-decreasing: {monotone}"),
        }
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report: {e}")))?;
    let path = args.out.join("ablate.json");
    fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    write_manifest(
        &args.out,
        "ablate",
        cfg,
        &[&args.ckpt],
        vec!["ablate.json".into()],
    )?;
    println!("{}", report.verdict);
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    seeds: u64,
    samples_per_seed: usize,
    tolerance: f64,
    max_rel_error: f64,
    failures: usize,
}

/// Absolute agreement demanded of parameters whose gradients sit below the
/// central-difference noise floor (|g| ~ 1e-6 at h = 1e-5 in f64), where a
/// relative comparison measures only roundoff. Any real backward defect on
/// such a parameter shows up at the size of the gradient itself, orders of
/// magnitude above this.
const GRADCHECK_ABS_FLOOR: f64 = 1e-8;

/// Finite-difference check of the conv denoiser's backward pass; returns the
/// maximum relative error among parameters above the noise floor and the
/// number of failures.
pub fn gradcheck(seeds: u64, samples: usize, tolerance: f64) -> Result<(f64, usize)> {
    let (h, w) = (16usize, 16usize);
    let t_total = 64usize;
    let mut max_rel = 0.0f64;
    let mut failures = 0usize;
    for seed in 0..seeds {
        let mut rng = Stream::new(1000 + seed);
        // Production init, but with the final layer and biases randomized at
        // the same per-layer scale so every parameter carries signal while
        // activations (and with them the finite-difference noise, which is
        // proportional to the loss magnitude) stay O(1).
        let mut model = ConvDenoiser::init(&mut rng);
        for layer in &mut model.layers {
            let limit = (6.0 / ((layer.in_c * 9 + layer.out_c * 9) as f64)).sqrt();
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                if *v == 0.0 {
                    *v = (rng.next_f64() * 2.0 - 1.0) * limit;
                }
            }
        }
        for v in &mut model.time_bias {
            *v = (rng.next_f64() * 2.0 - 1.0) * 0.1;
        }
        let noisy = Field::gaussian(h, w, &mut rng);
        let cond = Field::gaussian(h, w, &mut rng);
        let target = Field::gaussian(h, w, &mut rng);
        let t = 1 + rng.next_below(t_total as u64) as usize;
        let pixels = (h * w) as f64;
        let loss_of = |m: &ConvDenoiser| {
            let out = m.forward(&noisy, &cond, t, t_total);
            out.data()
                .iter()
                .zip(target.data())
                .map(|(o, g)| (o - g) * (o - g))
                .sum::<f64>()
                / pixels
        };
        let (out, cache) = model.forward_cached(&noisy, &cond, t, t_total);
        let gout = out.sub(&target)?.scale(2.0 / pixels);
        let grads = model.backward_params(&cache, &gout);
        let count = model.param_count();
        let step = 1e-5;
        let mut pick = Stream::new(9000 + seed);
        for _ in 0..samples {
            let idx = pick.next_below(count as u64) as usize;
            let orig = model.get_param(idx);
            model.set_param(idx, orig + step);
            let lp = loss_of(&model);
            model.set_param(idx, orig - step);
            let lm = loss_of(&model);
            model.set_param(idx, orig);
            let fd = (lp - lm) / (2.0 * step);
            let an = grads.get_param(idx);
            let rel = (an - fd).abs() / (an.abs() + 1e-8);
            if rel < tolerance {
                max_rel = max_rel.max(rel);
            } else if (an - fd).abs() >= GRADCHECK_ABS_FLOOR {
                failures += 1;
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok((max_rel, failures))
}

fn cmd_gradcheck(_cfg: &RunConfig, args: &GradcheckArgs) -> Result<()> {
    let (max_rel, failures) = gradcheck(args.seeds, args.samples, args.tolerance)?;
    let report = GradcheckReport {
        seeds: args.seeds,
        samples_per_seed: args.samples,
        tolerance: args.tolerance,
        max_rel_error: max_rel,
        failures,
    };
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(format!("report: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    println!(
        "gradcheck: {} seeds x {} params, max rel error {max_rel:.3e} (tolerance {:.0e})",
        args.seeds, args.samples, args.tolerance
    );
    if failures > 0 {
        return Err(Error::CheckFailed(format!(
            "{failures} parameter gradients exceeded tolerance"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<RunConfig>("{\"bogus\": 1}");
        assert!(err.is_err());
    }

    #[test]
    fn config_defaults_roundtrip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.timeline_steps, 300);
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn gradcheck_passes_on_fresh_params() {
        let (max_rel, failures) = gradcheck(1, 25, 1e-5).unwrap();
        assert_eq!(failures, 0, "max rel {max_rel}");
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_IO);
        assert_eq!(
            exit_code(&Error::io("f", std::io::Error::other("x"))),
            EXIT_IO
        );
        assert_eq!(exit_code(&Error::CheckFailed("x".into())), EXIT_CHECK);
        assert_eq!(exit_code(&Error::InvalidRange("x".into())), EXIT_CONFIG);
    }
}
