//! Bidirectional editing: marginal noise injection followed by a guided
//! reverse pass of the brain branch.
//!
//! Anatomy-consistency guidance pulls each reverse sample toward the original
//! input with a per-pixel weight that shrinks where the one-step denoised
//! estimate disagrees with the input (lesions) and grows as sampling
//! approaches the clean end. Lesion-consistency guidance suppresses that pull
//! inside a pooled, softened copy of the conditioning mask so pathology can
//! form there.

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserInput, NoisePredictor};
use crate::field::{BinaryMask, Field};
use crate::paired::{one_step_estimate_raw, reverse_transition_with_eps};
use crate::phantom::pooled_lesion_map;
use crate::rng::Stream;
use crate::schedule::InferenceTimeline;
use crate::{Error, Result};

/// Guidance hyperparameters. The gain symbol is named `g_t` internally to
/// avoid colliding with the schedule's per-step signal fraction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Base guidance gain.
    pub alpha0: f64,
    /// Temporal decay rate of the gain.
    pub k: f64,
    /// Lesion-scaling strength in [0, 1].
    pub eta: f64,
    /// Odd pooling window for the soft lesion map, in pixels.
    pub pool_window: usize,
    /// Fraction of the inference timeline at which editing noise is injected.
    pub t_start_frac: f64,
    pub acg_enabled: bool,
    pub lcg_enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            alpha0: 20.0,
            k: 0.5,
            eta: 1.0,
            pool_window: 7,
            t_start_frac: 0.6,
            acg_enabled: true,
            lcg_enabled: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha0 <= 0.0 {
            return Err(Error::InvalidRange(format!("alpha0 {} must be > 0", self.alpha0)));
        }
        if self.k < 0.0 {
            return Err(Error::InvalidRange(format!("k {} must be >= 0", self.k)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidRange(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.pool_window % 2 == 0 || self.pool_window == 0 {
            return Err(Error::InvalidRange(format!(
                "pool_window {} must be odd and positive",
                self.pool_window
            )));
        }
        if !(self.t_start_frac > 0.0 && self.t_start_frac <= 1.0) {
            return Err(Error::InvalidRange(format!(
                "t_start_frac {} outside (0, 1]",
                self.t_start_frac
            )));
        }
        Ok(())
    }
}

/// Editing direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditDirection {
    /// Healthy input plus a target lesion mask.
    H2p,
    /// Pathological input, empty conditioning mask.
    P2h,
}

/// One editing job.
#[derive(Clone, Debug)]
pub struct EditRequest {
    pub source: Field,
    pub mask: BinaryMask,
    pub direction: EditDirection,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if !self.mask.same_shape_as_field(&self.source) {
            return Err(Error::ShapeMismatch(
                self.mask.height(),
                self.mask.width(),
                self.source.height(),
                self.source.width(),
            ));
        }
        Ok(())
    }
}

/// Time-decaying guidance gain `g_t = alpha0 * exp(-k * t / T_inf)`, where
/// `t` counts remaining inference steps (T_inf at the start of a full
/// reverse pass, 0 at the clean end).
pub fn guidance_gain(cfg: &GuidanceConfig, t: usize, t_inf: usize) -> f64 {
    debug_assert!(t <= t_inf);
    cfg.alpha0 * (-cfg.k * t as f64 / t_inf as f64).exp()
}

/// Spatiotemporal consistency weight `exp(-g_t * |y0 - y0_hat|)`, in (0, 1].
pub fn acg_weight(
    cfg: &GuidanceConfig,
    y0: &Field,
    y0_hat: &Field,
    t: usize,
    t_inf: usize,
) -> Result<Field> {
    let gain = guidance_gain(cfg, t, t_inf);
    y0.zip_map(y0_hat, |a, b| (-gain * (a - b).abs()).exp())
}

/// Lesion-suppression weight `1 - eta * AvgPool(mask)`, in [1 - eta, 1].
pub fn lcg_weight(cfg: &GuidanceConfig, mask: &BinaryMask) -> Result<Field> {
    let pooled = pooled_lesion_map(mask, cfg.pool_window)?;
    Ok(pooled.map(|p| 1.0 - cfg.eta * p))
}

/// Convex pull toward the anchor: `(1 - lambda) * y_prev + lambda * y0`.
pub fn guided_update(y_prev: &Field, y0: &Field, lambda: &Field) -> Result<Field> {
    const TOL: f64 = 1e-9;
    if !y_prev.same_shape(y0) || !y_prev.same_shape(lambda) {
        return Err(Error::ShapeMismatch(
            y_prev.height(),
            y_prev.width(),
            y0.height(),
            y0.width(),
        ));
    }
    for &l in lambda.data() {
        if !(-TOL..=1.0 + TOL).contains(&l) {
            return Err(Error::WeightRange(l));
        }
    }
    let mut out = y_prev.clone();
    for i in 0..out.len() {
        let l = lambda.data()[i].clamp(0.0, 1.0);
        out.data_mut()[i] = (1.0 - l) * y_prev.data()[i] + l * y0.data()[i];
    }
    Ok(out)
}

/// Result of one edit.
pub struct EditOutput {
    pub image: Field,
    /// Training timestep at which noise was injected.
    pub injected_at: usize,
    /// Number of reverse transitions run.
    pub steps_run: usize,
    /// (timeline position, lambda) pairs captured at requested positions.
    pub lambda_snapshots: Vec<(usize, Field)>,
}

/// Noise-inject-then-denoise editing with consistency guidance.
///
/// Injects marginal noise at the `round(t_start_frac * K)`-th timeline step
/// (counted from the clean end), then reverse-iterates the brain branch
/// conditioned on the request mask (h2p) or the empty mask (p2h). After each
/// transition the sample is pulled toward the input with
/// `lambda = lambda_diff` (p2h) or `lambda = lambda_diff * lambda_lesion`
/// (h2p). With guidance disabled this is plain conditional resampling.
pub fn edit(
    brain: &dyn NoisePredictor,
    request: &EditRequest,
    cfg: &GuidanceConfig,
    timeline: &InferenceTimeline,
    rng: &mut Stream,
    snapshot_positions: &[usize],
) -> Result<EditOutput> {
    request.validate()?;
    cfg.validate()?;
    let k_steps = timeline.len();
    let m = ((cfg.t_start_frac * k_steps as f64).round() as usize).clamp(1, k_steps);
    let start_pos = k_steps - m;
    let t_inject = timeline.step(start_pos);

    let (h, w) = (request.source.height(), request.source.width());
    let condition = match request.direction {
        EditDirection::H2p => request.mask.to_diffusion_field(),
        EditDirection::P2h => Field::constant(h, w, -1.0),
    };
    let lesion_weight = if request.direction == EditDirection::H2p && cfg.lcg_enabled {
        Some(lcg_weight(cfg, &request.mask)?)
    } else {
        None
    };

    // Marginal noise injection at the chosen step.
    let ab = timeline.alpha_bar(start_pos);
    let noise = Field::gaussian(h, w, rng);
    let mut y = request
        .source
        .axpby(ab.sqrt(), &noise, (1.0 - ab).sqrt())?;

    let mut snapshots = Vec::new();
    for pos in start_pos..k_steps {
        let t = timeline.step(pos);
        let eps = brain.predict(&DenoiserInput {
            noisy: &y,
            condition: &condition,
            t,
            t_total: timeline.t_count(),
            alpha_bar: timeline.alpha_bar(pos),
        });
        let mut y_next = reverse_transition_with_eps(brain, &eps, &y, timeline, pos, rng);
        if cfg.acg_enabled {
            // One-step estimate at the current step, clamped to data range.
            let y0_hat =
                one_step_estimate_raw(&eps, &y, timeline.alpha_bar(pos)).clamp(-1.0, 1.0);
            // Remaining-step index: m at the start of a full pass, 1 at the
            // final transition.
            let remaining = k_steps - pos;
            let mut lambda = acg_weight(cfg, &request.source, &y0_hat, remaining, k_steps)?;
            if let Some(lw) = &lesion_weight {
                lambda = lambda.mul(lw)?;
            }
            y_next = guided_update(&y_next, &request.source, &lambda)?;
            if snapshot_positions.contains(&pos) {
                snapshots.push((pos, lambda));
            }
        }
        y = y_next;
    }
    Ok(EditOutput {
        image: y.clamp(-1.0, 1.0),
        injected_at: t_inject,
        steps_run: m,
        lambda_snapshots: snapshots,
    })
}
