//! Paired diffusion: joint forward noising, one-step denoising estimates,
//! the factorized joint reverse step, and the sampling loops.
//!
//! A joint reverse step first forms both branches' one-step clean estimates
//! from noise predictions conditioned on the current noisy pair, then updates
//! each branch with a prediction conditioned on the partner's frozen
//! estimate. Conditioning each branch on the raw noisy partner instead is
//! selectable, both as the circular-dependency shortcut for the lesion
//! branch alone and as the full ablation mode.

use crate::denoiser::{DenoiserInput, NoisePredictor};
use crate::field::{BinaryMask, Field};
use crate::rng::Stream;
use crate::schedule::{InferenceTimeline, NoiseSchedule};
use crate::Result;

/// A (lesion mask, brain image) pair in diffusion space: the mask field uses
/// {-1, +1} with lesion = +1, the image lives in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub mask: Field,
    pub image: Field,
}

impl SamplePair {
    pub fn new(mask: Field, image: Field) -> Result<Self> {
        if !mask.same_shape(&image) {
            return Err(crate::Error::ShapeMismatch(
                mask.height(),
                mask.width(),
                image.height(),
                image.width(),
            ));
        }
        Ok(SamplePair { mask, image })
    }
}

/// Noisy pair plus the injected noises, as produced by [`forward_noise_pair`].
pub struct NoisedPair {
    pub x_t: Field,
    pub y_t: Field,
    pub eps_x: Field,
    pub eps_y: Field,
}

/// Joint forward noising at timestep `t` with independent noises.
pub fn forward_noise_pair(
    pair: &SamplePair,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut Stream,
) -> Result<NoisedPair> {
    let (h, w) = (pair.mask.height(), pair.mask.width());
    let eps_x = Field::gaussian(h, w, rng);
    let eps_y = Field::gaussian(h, w, rng);
    Ok(NoisedPair {
        x_t: schedule.marginal_noise(&pair.mask, t, &eps_x)?,
        y_t: schedule.marginal_noise(&pair.image, t, &eps_y)?,
        eps_x,
        eps_y,
    })
}

/// One-step clean estimate without clamping:
/// `(noisy - sqrt(1 - abar) eps) / sqrt(abar)`.
pub fn one_step_estimate_raw(eps_pred: &Field, noisy: &Field, alpha_bar: f64) -> Field {
    let root_ab = alpha_bar.sqrt();
    let root_1mab = (1.0 - alpha_bar).sqrt();
    noisy
        .zip_map(eps_pred, |xt, e| (xt - root_1mab * e) / root_ab)
        .expect("estimate shapes match")
}

/// One-step clean estimate clamped to the data range [-1, 1].
pub fn one_step_estimate(
    eps_pred: &Field,
    noisy: &Field,
    schedule: &NoiseSchedule,
    t: usize,
) -> Field {
    one_step_estimate_raw(eps_pred, noisy, schedule.alpha_bar(t)).clamp(-1.0, 1.0)
}

/// Ancestral transition at timeline position `pos` given an already computed
/// noise prediction. Mean is `(noisy - beta/sqrt(1-abar) eps) / sqrt(alpha)`;
/// the variance comes from the model hook (schedule posterior by default,
/// zero at the final transition).
pub fn reverse_transition_with_eps(
    model: &dyn NoisePredictor,
    eps_pred: &Field,
    noisy: &Field,
    timeline: &InferenceTimeline,
    pos: usize,
    rng: &mut Stream,
) -> Field {
    let alpha = timeline.alpha(pos);
    let beta = timeline.beta(pos);
    let ab_t = timeline.alpha_bar(pos);
    let inv_root_alpha = 1.0 / alpha.sqrt();
    let coef = beta / (1.0 - ab_t).sqrt();
    let mut out = noisy
        .zip_map(eps_pred, |xt, e| inv_root_alpha * (xt - coef * e))
        .expect("shapes match");
    let schedule_var = if timeline.is_final(pos) {
        0.0
    } else {
        timeline.posterior_var(pos)
    };
    let var = model.reverse_variance(schedule_var, ab_t, timeline.alpha_bar_after(pos));
    if var > 0.0 {
        let std = var.sqrt();
        let noise = Field::gaussian(noisy.height(), noisy.width(), rng);
        out = out
            .zip_map(&noise, |m, z| m + std * z)
            .expect("shapes match");
    }
    out
}

/// Predicts noise and performs the ancestral transition at `pos`.
pub fn reverse_transition(
    model: &dyn NoisePredictor,
    noisy: &Field,
    condition: &Field,
    timeline: &InferenceTimeline,
    pos: usize,
    rng: &mut Stream,
) -> Field {
    let eps = model.predict(&DenoiserInput {
        noisy,
        condition,
        t: timeline.step(pos),
        t_total: timeline.t_count(),
        alpha_bar: timeline.alpha_bar(pos),
    });
    reverse_transition_with_eps(model, &eps, noisy, timeline, pos, rng)
}

/// What each branch is conditioned on during joint sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionSource {
    /// The partner's clamped one-step clean estimate from the pre-update pass.
    CleanEstimate,
    /// The partner's current noisy latent.
    NoisyPartner,
}

#[derive(Clone, Copy, Debug)]
pub struct PairSamplerOptions {
    pub lesion_condition: ConditionSource,
    pub brain_condition: ConditionSource,
    /// Clamp estimates to [-1, 1] before using them as conditions.
    pub clamp_estimates: bool,
}

impl Default for PairSamplerOptions {
    fn default() -> Self {
        PairSamplerOptions {
            lesion_condition: ConditionSource::CleanEstimate,
            brain_condition: ConditionSource::CleanEstimate,
            clamp_estimates: true,
        }
    }
}

impl PairSamplerOptions {
    /// Both branches condition on the raw noisy partner (the one-step
    /// conditioning ablation).
    pub fn noisy_conditioning() -> Self {
        PairSamplerOptions {
            lesion_condition: ConditionSource::NoisyPartner,
            brain_condition: ConditionSource::NoisyPartner,
            clamp_estimates: true,
        }
    }
}

/// The two sub-models of the paired sampler.
pub struct PairModels<'a> {
    pub lesion: &'a dyn NoisePredictor,
    pub brain: &'a dyn NoisePredictor,
}

/// Current joint state: noisy pair plus the latest frozen estimates.
pub struct PairState {
    pub x: Field,
    pub y: Field,
    pub x0_hat: Field,
    pub y0_hat: Field,
}

/// Which branch a reverse step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Lesion,
    Brain,
}

/// Single-branch reverse update against frozen pre-update estimates.
pub fn reverse_step(
    branch: Branch,
    models: &PairModels<'_>,
    state: &PairState,
    timeline: &InferenceTimeline,
    pos: usize,
    opts: &PairSamplerOptions,
    rng: &mut Stream,
) -> Field {
    match branch {
        Branch::Lesion => {
            let cond = match opts.lesion_condition {
                ConditionSource::CleanEstimate => &state.y0_hat,
                ConditionSource::NoisyPartner => &state.y,
            };
            reverse_transition(models.lesion, &state.x, cond, timeline, pos, rng)
        }
        Branch::Brain => {
            let cond = match opts.brain_condition {
                ConditionSource::CleanEstimate => &state.x0_hat,
                ConditionSource::NoisyPartner => &state.x,
            };
            reverse_transition(models.brain, &state.y, cond, timeline, pos, rng)
        }
    }
}

/// Result of unconditional joint sampling.
pub struct GeneratedPair {
    /// Final continuous pair (mask field still in diffusion space).
    pub pair: SamplePair,
    /// Mask binarized at 0.
    pub mask: BinaryMask,
}

fn estimate_for(
    model: &dyn NoisePredictor,
    noisy: &Field,
    partner: &Field,
    timeline: &InferenceTimeline,
    pos: usize,
    clamp: bool,
) -> Field {
    let eps = model.predict(&DenoiserInput {
        noisy,
        condition: partner,
        t: timeline.step(pos),
        t_total: timeline.t_count(),
        alpha_bar: timeline.alpha_bar(pos),
    });
    let est = one_step_estimate_raw(&eps, noisy, timeline.alpha_bar(pos));
    if clamp {
        est.clamp(-1.0, 1.0)
    } else {
        est
    }
}

/// Joint generation of a (mask, image) pair from Gaussian noise.
pub fn sample_unconditional_pair(
    models: &PairModels<'_>,
    timeline: &InferenceTimeline,
    opts: &PairSamplerOptions,
    height: usize,
    width: usize,
    rng: &mut Stream,
) -> GeneratedPair {
    let mut state = PairState {
        x: Field::gaussian(height, width, rng),
        y: Field::gaussian(height, width, rng),
        x0_hat: Field::zeros(height, width),
        y0_hat: Field::zeros(height, width),
    };
    let need_estimates = opts.lesion_condition == ConditionSource::CleanEstimate
        || opts.brain_condition == ConditionSource::CleanEstimate;
    for pos in 0..timeline.len() {
        if need_estimates {
            // Pre-update pass: both estimates from predictions conditioned on
            // the raw noisy pair, then frozen for this step's updates.
            state.x0_hat = estimate_for(
                models.lesion,
                &state.x,
                &state.y,
                timeline,
                pos,
                opts.clamp_estimates,
            );
            state.y0_hat = estimate_for(
                models.brain,
                &state.y,
                &state.x,
                timeline,
                pos,
                opts.clamp_estimates,
            );
        }
        let x_next = reverse_step(Branch::Lesion, models, &state, timeline, pos, opts, rng);
        let y_next = reverse_step(Branch::Brain, models, &state, timeline, pos, opts, rng);
        state.x = x_next;
        state.y = y_next;
    }
    let mask = state.x.binarize(0.0);
    GeneratedPair {
        pair: SamplePair {
            mask: state.x,
            image: state.y,
        },
        mask,
    }
}

/// Brain-branch generation conditioned on a fixed lesion mask.
pub fn sample_conditional(
    brain: &dyn NoisePredictor,
    mask: &BinaryMask,
    timeline: &InferenceTimeline,
    rng: &mut Stream,
) -> Result<Field> {
    let cond = mask.to_diffusion_field();
    let mut y = Field::gaussian(mask.height(), mask.width(), rng);
    for pos in 0..timeline.len() {
        y = reverse_transition(brain, &y, &cond, timeline, pos, rng);
    }
    Ok(y)
}

/// Full single-branch reverse pass from pure noise with a fixed condition
/// (the engine behind conditional sampling and the oracle checks).
pub fn sample_branch(
    model: &dyn NoisePredictor,
    condition: &Field,
    timeline: &InferenceTimeline,
    height: usize,
    width: usize,
    rng: &mut Stream,
) -> Field {
    let mut x = Field::gaussian(height, width, rng);
    for pos in 0..timeline.len() {
        x = reverse_transition(model, &x, condition, timeline, pos, rng);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::GaussianOracle;
    use crate::parallel::par_map_indexed;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1024, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn forward_noise_matches_small_t_scale() {
        // At t = 1 the perturbation std is sqrt(beta_1) = 0.01.
        let s = schedule();
        let pair = SamplePair::new(Field::constant(16, 16, 0.5), Field::constant(16, 16, -0.25))
            .unwrap();
        let mut rng = Stream::new(3);
        let noised = forward_noise_pair(&pair, &s, 1, &mut rng).unwrap();
        let root_ab = s.alpha_bar(1).sqrt();
        for (xt, e) in noised.x_t.data().iter().zip(noised.eps_x.data()) {
            let expect = root_ab * 0.5 + (1.0 - s.alpha_bar(1)).sqrt() * e;
            assert!((xt - expect).abs() < 1e-15);
        }
        assert!(((1.0 - s.alpha_bar(1)).sqrt() - 0.01f64).abs() < 1e-6);
        // Reproducible under the same stream.
        let mut rng2 = Stream::new(3);
        let noised2 = forward_noise_pair(&pair, &s, 1, &mut rng2).unwrap();
        assert_eq!(noised.x_t, noised2.x_t);
        assert_eq!(noised.y_t, noised2.y_t);
    }

    #[test]
    fn branch_noises_uncorrelated() {
        let s = schedule();
        let pair =
            SamplePair::new(Field::zeros(100, 100), Field::zeros(100, 100)).unwrap();
        let mut rng = Stream::new(9);
        let noised = forward_noise_pair(&pair, &s, 512, &mut rng).unwrap();
        let n = noised.eps_x.len() as f64;
        let mx = noised.eps_x.mean();
        let my = noised.eps_y.mean();
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (a, b) in noised.eps_x.data().iter().zip(noised.eps_y.data()) {
            cov += (a - mx) * (b - my);
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
        }
        let rho = (cov / n) / ((vx / n).sqrt() * (vy / n).sqrt());
        assert!(rho.abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn one_step_inverts_true_noise() {
        let s = schedule();
        let mut rng = Stream::new(5);
        for &t in &[1usize, 17, 300, 1024] {
            let x0 = Field::gaussian(8, 8, &mut rng).clamp(-0.95, 0.95);
            let eps = Field::gaussian(8, 8, &mut rng);
            let xt = s.marginal_noise(&x0, t, &eps).unwrap();
            let est = one_step_estimate(&eps, &xt, &s, t);
            for (a, b) in est.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn one_step_zero_eps_is_rescaled_noisy() {
        let s = schedule();
        let mut rng = Stream::new(6);
        let xt = Field::gaussian(4, 4, &mut rng);
        let est = one_step_estimate_raw(&Field::zeros(4, 4), &xt, s.alpha_bar(700));
        let scale = 1.0 / s.alpha_bar(700).sqrt();
        for (e, x) in est.data().iter().zip(xt.data()) {
            assert!((e - x * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_with_oracle_equals_posterior_mean() {
        let s = schedule();
        let oracle = GaussianOracle::new(Field::zeros(6, 6), 1.0);
        let mut rng = Stream::new(7);
        let xt = Field::gaussian(6, 6, &mut rng);
        for &t in &[64usize, 512, 1024] {
            let ab = s.alpha_bar(t);
            let eps = oracle.predict_noise(&xt, ab);
            let est = one_step_estimate_raw(&eps, &xt, ab);
            let posterior = oracle.posterior_mean(&xt, ab);
            for (a, b) in est.data().iter().zip(posterior.data()) {
                assert!((a - b).abs() < 1e-12, "t={t}");
            }
        }
    }

    struct ZeroPredictor;
    impl NoisePredictor for ZeroPredictor {
        fn predict(&self, input: &DenoiserInput<'_>) -> Field {
            Field::zeros(input.noisy.height(), input.noisy.width())
        }
        fn reverse_variance(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn zero_eps_zero_variance_is_pure_rescaling() {
        // With eps = 0 and no noise, a reverse pass multiplies by
        // prod 1/sqrt(alpha'_i) = 1/sqrt(abar_T).
        let s = schedule();
        let tl = s.subsample(64).unwrap();
        let model = ZeroPredictor;
        let mut x = Field::constant(2, 2, 0.01);
        let mut rng = Stream::new(8);
        for pos in 0..tl.len() {
            x = reverse_transition(&model, &x, &Field::zeros(2, 2), &tl, pos, &mut rng);
        }
        let expect = 0.01 / s.alpha_bar(1024).sqrt();
        for v in x.data() {
            assert!((v - expect).abs() / expect < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn final_transition_adds_no_noise() {
        let s = schedule();
        let tl = s.subsample(16).unwrap();
        let oracle = GaussianOracle::new(Field::zeros(2, 2), 0.0);
        // sigma2 = 0 makes the oracle's exact reverse variance 0 at the final
        // transition, and the default path is 0 there too; identical rngs in
        // different states must give identical outputs.
        let pos = tl.len() - 1;
        let noisy = Field::constant(2, 2, 0.3);
        let cond = Field::zeros(2, 2);
        let mut r1 = Stream::new(100);
        let mut r2 = Stream::new(200);
        let a = reverse_transition(&oracle, &noisy, &cond, &tl, pos, &mut r1);
        let b = reverse_transition(&oracle, &noisy, &cond, &tl, pos, &mut r2);
        assert_eq!(a, b);
    }

    /// Exact pushforward of the sampler's Gaussian-to-Gaussian affine maps;
    /// an oracle for the Monte Carlo checks that is exact up to the
    /// N(0,1) initialization mismatch.
    fn oracle_pushforward(tl: &InferenceTimeline, oracle: &GaussianOracle, mu: f64) -> (f64, f64) {
        let (mut mean, mut var) = (0.0f64, 1.0f64);
        for pos in 0..tl.len() {
            let ab = tl.alpha_bar(pos);
            let a = tl.alpha(pos);
            let b = tl.beta(pos);
            let r = b / (ab * oracle.sigma2 + 1.0 - ab);
            let c = (1.0 - r) / a.sqrt();
            mean = c * mean + r * ab.sqrt() * mu / a.sqrt();
            var = c * c * var;
            let sv = if tl.is_final(pos) {
                0.0
            } else {
                tl.posterior_var(pos)
            };
            var += oracle.reverse_variance(sv, ab, tl.alpha_bar_after(pos));
        }
        (mean, var)
    }

    #[test]
    fn oracle_sampler_distribution_matches_exactly_in_expectation() {
        let s = schedule();
        let oracle = GaussianOracle::new(Field::constant(1, 1, 0.3), 0.25);
        for &k in &[16usize, 64, 300] {
            let tl = s.subsample(k).unwrap();
            let (m, v) = oracle_pushforward(&tl, &oracle, 0.3);
            assert!((m - 0.3).abs() < 1e-4, "K={k} mean {m}");
            assert!((v - 0.25).abs() / 0.25 < 1e-3, "K={k} var {v}");
        }
    }

    #[test]
    fn oracle_sampler_monte_carlo_small() {
        // Smaller sibling of the acceptance criterion: 2000 trajectories at
        // K = 16 on scalar data.
        let s = schedule();
        let oracle = GaussianOracle::new(Field::constant(1, 1, 0.3), 0.25);
        let tl = s.subsample(16).unwrap();
        let base = Stream::new(77);
        let n = 2000usize;
        let cond = Field::zeros(1, 1);
        let samples = par_map_indexed(n, |i| {
            let mut rng = base.substream(i as u64);
            sample_branch(&oracle, &cond, &tl, 1, 1, &mut rng).get(0, 0)
        });
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.05, "mean {mean}");
        assert!((var - 0.25).abs() / 0.25 < 0.12, "var {var}");
    }

    #[test]
    fn unconditional_pair_reproducible_and_binary() {
        let s = schedule();
        let tl = s.subsample(16).unwrap();
        let oracle_x = GaussianOracle::new(Field::constant(8, 8, -0.5), 0.1);
        let oracle_y = GaussianOracle::new(Field::constant(8, 8, 0.2), 0.1);
        let models = PairModels {
            lesion: &oracle_x,
            brain: &oracle_y,
        };
        let opts = PairSamplerOptions::default();
        let mut r1 = Stream::new(42);
        let mut r2 = Stream::new(42);
        let a = sample_unconditional_pair(&models, &tl, &opts, 8, 8, &mut r1);
        let b = sample_unconditional_pair(&models, &tl, &opts, 8, 8, &mut r2);
        assert_eq!(a.pair.mask, b.pair.mask);
        assert_eq!(a.pair.image, b.pair.image);
        assert!(a.mask.data().iter().all(|&v| v == 0 || v == 1));
    }

    struct RecordingModel {
        seen: std::sync::Mutex<Vec<Field>>,
    }
    impl NoisePredictor for RecordingModel {
        fn predict(&self, input: &DenoiserInput<'_>) -> Field {
            self.seen.lock().unwrap().push(input.condition.clone());
            Field::zeros(input.noisy.height(), input.noisy.width())
        }
    }

    #[test]
    fn conditional_sampling_condition_is_bit_identical_every_step() {
        let s = schedule();
        let tl = s.subsample(8).unwrap();
        let model = RecordingModel {
            seen: std::sync::Mutex::new(Vec::new()),
        };
        let mask = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 3 == 0);
        let mut rng = Stream::new(1);
        sample_conditional(&model, &mask, &tl, &mut rng).unwrap();
        let seen = model.seen.lock().unwrap();
        assert_eq!(seen.len(), 8);
        let expect = mask.to_diffusion_field();
        for c in seen.iter() {
            assert_eq!(c, &expect);
        }
    }

    #[test]
    fn conditional_two_seeds_differ() {
        let s = schedule();
        let tl = s.subsample(16).unwrap();
        let oracle = GaussianOracle::new(Field::constant(6, 6, 0.1), 0.2);
        let mask = BinaryMask::empty(6, 6);
        let mut r1 = Stream::new(1);
        let mut r2 = Stream::new(2);
        let a = sample_conditional(&oracle, &mask, &tl, &mut r1).unwrap();
        let b = sample_conditional(&oracle, &mask, &tl, &mut r2).unwrap();
        let l1: f64 =
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 36.0;
        assert!(l1 > 0.0);
    }
}
