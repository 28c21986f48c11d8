//! Paired training loop minimizing the summed per-branch noise-prediction
//! losses on phantom triples.
//!
//! Each step draws a batch, noises both branches independently at a uniform
//! timestep per sample, forms the cross-condition one-step estimates from
//! the current networks (conditioned on the raw noisy partner), and then
//! takes one optimizer step per branch on the squared noise-prediction
//! error with the estimate held constant. Per-sample work fans out over the
//! worker pool; gradients reduce in batch order, so a fixed seed gives a
//! bit-identical trajectory at any thread count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Triple;
use crate::denoiser::{AdamConfig, AdamState, ConvDenoiser};
use crate::field::Field;
use crate::paired::{forward_noise_pair, one_step_estimate_raw, SamplePair};
use crate::parallel::par_map_indexed;
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Training-schedule length T.
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub loss_log_interval: usize,
    pub checkpoint_interval: usize,
    pub dataset_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 7,
            t_count: 1024,
            beta_start: 1e-4,
            beta_end: 0.02,
            loss_log_interval: 10,
            checkpoint_interval: 1000,
            dataset_dir: PathBuf::from("data"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Offsets of the substreams hanging off the base seed stream.
const SUBSTREAM_LESION_INIT: u64 = 1;
const SUBSTREAM_BRAIN_INIT: u64 = 2;
const SUBSTREAM_STEP_BASE: u64 = 1000;

/// Mutable training state; mirrors the checkpoint contents.
pub struct TrainerState {
    pub schedule: NoiseSchedule,
    pub lesion: ConvDenoiser,
    pub brain: ConvDenoiser,
    pub lesion_opt: AdamState,
    pub brain_opt: AdamState,
    pub rng: Stream,
    pub step: u64,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let schedule = NoiseSchedule::linear(cfg.t_count, cfg.beta_start, cfg.beta_end)?;
        let base = Stream::new(cfg.seed);
        Ok(TrainerState {
            schedule,
            lesion: ConvDenoiser::init(&mut base.substream(SUBSTREAM_LESION_INIT)),
            brain: ConvDenoiser::init(&mut base.substream(SUBSTREAM_BRAIN_INIT)),
            lesion_opt: AdamState::new(),
            brain_opt: AdamState::new(),
            rng: base,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        TrainerState {
            schedule: ckpt.schedule,
            lesion: ckpt.lesion,
            brain: ckpt.brain,
            lesion_opt: ckpt.lesion_opt,
            brain_opt: ckpt.brain_opt,
            rng: ckpt.rng,
            step: ckpt.step,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schedule: self.schedule.clone(),
            lesion: self.lesion.clone(),
            brain: self.brain.clone(),
            lesion_opt: self.lesion_opt.clone(),
            brain_opt: self.brain_opt.clone(),
            rng: self.rng.clone(),
            step: self.step,
        }
    }
}

/// One training step over a batch sampled from `triples`; returns the two
/// per-pixel mean losses.
pub fn train_step(state: &mut TrainerState, triples: &[Triple], cfg: &TrainConfig) -> (f64, f64) {
    let step_rng = state.rng.substream(SUBSTREAM_STEP_BASE + state.step);
    let mut index_rng = step_rng.substream(0);
    let indices: Vec<usize> = (0..cfg.batch_size)
        .map(|_| index_rng.next_below(triples.len() as u64) as usize)
        .collect();
    let t_count = state.schedule.len();
    let lesion = &state.lesion;
    let brain = &state.brain;
    let schedule = &state.schedule;

    struct SampleResult {
        loss_lesion: f64,
        loss_brain: f64,
        grads_lesion: ConvDenoiser,
        grads_brain: ConvDenoiser,
    }

    let results: Vec<SampleResult> = par_map_indexed(cfg.batch_size, |slot| {
        let triple = &triples[indices[slot]];
        let mut rng = step_rng.substream(1 + slot as u64);
        let t = 1 + rng.next_below(t_count as u64) as usize;
        let pair = SamplePair {
            mask: triple.mask.to_diffusion_field(),
            image: triple.pathological.clone(),
        };
        let noised = forward_noise_pair(&pair, schedule, t, &mut rng).expect("shapes agree");
        let ab = schedule.alpha_bar(t);
        // Cross-condition estimates from predictions conditioned on the raw
        // noisy partner; constants for the loss passes below.
        let eps_for_y0 = brain.forward(&noised.y_t, &noised.x_t, t, t_count);
        let y0_hat = one_step_estimate_raw(&eps_for_y0, &noised.y_t, ab).clamp(-1.0, 1.0);
        let eps_for_x0 = lesion.forward(&noised.x_t, &noised.y_t, t, t_count);
        let x0_hat = one_step_estimate_raw(&eps_for_x0, &noised.x_t, ab).clamp(-1.0, 1.0);

        let pixels = (pair.image.height() * pair.image.width()) as f64;
        let run_branch = |model: &ConvDenoiser, noisy: &Field, cond: &Field, target: &Field| {
            let (pred, cache) = model.forward_cached(noisy, cond, t, t_count);
            let diff = pred.sub(target).expect("shapes agree");
            let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / pixels;
            let gout = diff.scale(2.0 / pixels);
            let grads = model.backward_params(&cache, &gout);
            (loss, grads)
        };
        let (loss_lesion, grads_lesion) =
            run_branch(lesion, &noised.x_t, &y0_hat, &noised.eps_x);
        let (loss_brain, grads_brain) = run_branch(brain, &noised.y_t, &x0_hat, &noised.eps_y);
        SampleResult {
            loss_lesion,
            loss_brain,
            grads_lesion,
            grads_brain,
        }
    });

    // Ordered reduction: batch means of losses and gradients.
    let scale = 1.0 / cfg.batch_size as f64;
    let mut loss_lesion = 0.0;
    let mut loss_brain = 0.0;
    let mut grads_lesion = ConvDenoiser::zeros();
    let mut grads_brain = ConvDenoiser::zeros();
    for r in &results {
        loss_lesion += r.loss_lesion * scale;
        loss_brain += r.loss_brain * scale;
        grads_lesion.add_scaled(&r.grads_lesion, scale);
        grads_brain.add_scaled(&r.grads_brain, scale);
    }
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    state.lesion_opt.apply(&mut state.lesion, &grads_lesion, &adam);
    state.brain_opt.apply(&mut state.brain, &grads_brain, &adam);
    state.step += 1;
    (loss_lesion, loss_brain)
}

pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    /// (step, loss_lesion, loss_brain) at every step.
    pub curve: Vec<(u64, f64, f64)>,
}

/// Runs (or resumes) training, writing periodic checkpoints and a loss CSV.
pub fn train(
    cfg: &TrainConfig,
    triples: &[Triple],
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match resume {
        Some(ckpt) => TrainerState::from_checkpoint(ckpt),
        None => TrainerState::new(cfg)?,
    };
    let loss_log_path = out_dir.join("loss.csv");
    let mut log = fs::File::create(&loss_log_path).map_err(|e| Error::io(&loss_log_path, e))?;
    writeln!(log, "step,loss_lesion,loss_brain").map_err(|e| Error::io(&loss_log_path, e))?;
    let mut curve = Vec::with_capacity(cfg.steps);
    let ckpt_path = out_dir.join("model.ckpt");
    while (state.step as usize) < cfg.steps {
        let (lx, ly) = train_step(&mut state, triples, cfg);
        if !(lx.is_finite() && ly.is_finite()) {
            return Err(Error::CheckFailed(format!(
                "non-finite loss at step {}: lesion {lx}, brain {ly}",
                state.step
            )));
        }
        curve.push((state.step, lx, ly));
        if state.step as usize % cfg.loss_log_interval == 0 || state.step as usize == cfg.steps {
            writeln!(log, "{},{lx:.17},{ly:.17}", state.step)
                .map_err(|e| Error::io(&loss_log_path, e))?;
        }
        if cfg.checkpoint_interval > 0
            && state.step as usize % cfg.checkpoint_interval == 0
            && (state.step as usize) < cfg.steps
        {
            state
                .to_checkpoint()
                .save(&out_dir.join(format!("model-{:06}.ckpt", state.step)))?;
        }
    }
    state.to_checkpoint().save(&ckpt_path)?;
    log.flush().map_err(|e| Error::io(&loss_log_path, e))?;
    Ok(TrainOutput {
        checkpoint_path: ckpt_path,
        loss_log_path,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_triples;
    use crate::phantom::{LesionSpec, PhantomSpec};

    fn tiny_dataset(size: usize, count: usize) -> Vec<Triple> {
        let pspec = PhantomSpec {
            size,
            outer_a: crate::phantom::Range::new(0.28, 0.32),
            outer_b: crate::phantom::Range::new(0.30, 0.34),
            center_jitter: 1.0,
            ..PhantomSpec::default()
        };
        let lspec = LesionSpec::default();
        build_triples(&pspec, &lspec, count, &Stream::new(5)).unwrap()
    }

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 11,
            t_count: 64,
            loss_log_interval: 1,
            checkpoint_interval: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initial_loss_near_unit_variance() {
        // Zero-init final layers predict 0, so each branch loss starts at
        // E[eps^2] = 1 per pixel.
        let triples = tiny_dataset(24, 8);
        let cfg = tiny_config(1);
        let mut state = TrainerState::new(&cfg).unwrap();
        let (lx, ly) = train_step(&mut state, &triples, &cfg);
        assert!((0.9..=1.1).contains(&lx), "lesion loss {lx}");
        assert!((0.9..=1.1).contains(&ly), "brain loss {ly}");
    }

    #[test]
    fn one_step_changes_parameters() {
        let triples = tiny_dataset(24, 8);
        let cfg = tiny_config(1);
        let mut state = TrainerState::new(&cfg).unwrap();
        let before = state.lesion.clone();
        train_step(&mut state, &triples, &cfg);
        assert_ne!(state.lesion, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn deterministic_and_resumable() {
        let triples = tiny_dataset(24, 8);
        let cfg = tiny_config(6);
        let dir = tempfile::tempdir().unwrap();

        // Straight run.
        let out_a = train(&cfg, &triples, &dir.path().join("a"), None).unwrap();
        // Identical second run.
        let out_b = train(&cfg, &triples, &dir.path().join("b"), None).unwrap();
        assert_eq!(
            std::fs::read(&out_a.checkpoint_path).unwrap(),
            std::fs::read(&out_b.checkpoint_path).unwrap()
        );
        assert_eq!(out_a.curve, out_b.curve);

        // Run to 3, checkpoint, resume to 6: same final bytes.
        let cfg3 = TrainConfig {
            steps: 3,
            ..cfg.clone()
        };
        let out_half = train(&cfg3, &triples, &dir.path().join("c"), None).unwrap();
        let mid = Checkpoint::load(&out_half.checkpoint_path).unwrap();
        assert_eq!(mid.step, 3);
        let out_resumed = train(&cfg, &triples, &dir.path().join("d"), Some(mid)).unwrap();
        assert_eq!(
            std::fs::read(&out_a.checkpoint_path).unwrap(),
            std::fs::read(&out_resumed.checkpoint_path).unwrap()
        );
    }

    #[test]
    fn loss_log_written_and_finite() {
        let triples = tiny_dataset(24, 8);
        let cfg = tiny_config(4);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &triples, dir.path(), None).unwrap();
        let text = std::fs::read_to_string(&out.loss_log_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss_lesion,loss_brain");
        assert_eq!(lines.len(), 5);
        for (step, lx, ly) in &out.curve {
            assert!(lx.is_finite() && ly.is_finite(), "step {step}");
        }
    }
}
