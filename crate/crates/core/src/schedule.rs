//! Diffusion timeline: noise schedule construction, closed-form marginals,
//! reverse-step coefficients, and inference-time subsampling.
//!
//! Timesteps are 1-based (t = 1..=T); t = 0 denotes clean data and is never a
//! schedule index. The reverse-step variance is the posterior choice
//! `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`, with the first entry set to
//! `beta_1`; the final reverse transition never adds noise regardless.

use crate::field::Field;
use crate::ubt::Tensor;
use crate::{Error, Result};

/// Per-step tables for a T-step forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule: `beta_t = beta1 + (t-1)/(T-1) * (beta_t_final - beta1)`.
    pub fn linear(t_count: usize, beta1: f64, beta_t_final: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::InvalidRange(format!(
                "schedule needs T >= 2, got {t_count}"
            )));
        }
        if !(beta1 > 0.0 && beta1 <= beta_t_final && beta_t_final < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={beta_t_final}"
            )));
        }
        let step = (beta_t_final - beta1) / (t_count - 1) as f64;
        let beta: Vec<f64> = (0..t_count).map(|i| beta1 + i as f64 * step).collect();
        Ok(Self::from_beta(beta))
    }

    fn from_beta(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0f64;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let mut posterior_var = Vec::with_capacity(beta.len());
        for i in 0..beta.len() {
            if i == 0 {
                posterior_var.push(beta[0]);
            } else {
                posterior_var.push((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]);
            }
        }
        NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        }
    }

    /// Rebuild from stored tables (checkpoints never recompute them).
    pub fn from_tables(
        beta: Vec<f64>,
        alpha: Vec<f64>,
        alpha_bar: Vec<f64>,
        posterior_var: Vec<f64>,
    ) -> Result<Self> {
        let n = beta.len();
        if n < 2 || alpha.len() != n || alpha_bar.len() != n || posterior_var.len() != n {
            return Err(Error::Format("inconsistent schedule table lengths".into()));
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check_t(t);
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check_t(t);
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.check_t(t);
        self.alpha_bar[t - 1]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.check_t(t);
        self.posterior_var[t - 1]
    }

    /// `abar_t` with the t = 0 convention `abar_0 = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar(t)
        }
    }

    fn check_t(&self, t: usize) {
        assert!(
            t >= 1 && t <= self.len(),
            "timestep {t} outside 1..={}",
            self.len()
        );
    }

    /// Closed-form marginal: `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    pub fn marginal_noise(&self, x0: &Field, t: usize, noise: &Field) -> Result<Field> {
        let ab = self.alpha_bar(t);
        x0.axpby(ab.sqrt(), noise, (1.0 - ab).sqrt())
    }

    /// Evenly strided inference timeline of length K: training steps
    /// `t_i = round(i * T / K)` for i = 1..=K, so T is always included.
    pub fn subsample(&self, k: usize) -> Result<InferenceTimeline> {
        let t_count = self.len();
        if k < 2 || k > t_count {
            return Err(Error::InvalidRange(format!(
                "need 2 <= K <= {t_count}, got K={k}"
            )));
        }
        let mut ascending = Vec::with_capacity(k);
        for i in 1..=k {
            let t = (i as f64 * t_count as f64 / k as f64).round() as usize;
            ascending.push(t.clamp(1, t_count));
        }
        ascending.dedup();
        if ascending.len() != k {
            return Err(Error::InvalidRange(format!(
                "subsampling produced {} distinct steps for K={k}",
                ascending.len()
            )));
        }
        Ok(InferenceTimeline::from_ascending(self, ascending))
    }

    /// The identity timeline (K = T).
    pub fn full_timeline(&self) -> InferenceTimeline {
        InferenceTimeline::from_ascending(self, (1..=self.len()).collect())
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("schedule.beta".into(), Tensor::from_vec(self.beta.clone())),
            (
                "schedule.alpha".into(),
                Tensor::from_vec(self.alpha.clone()),
            ),
            (
                "schedule.alpha_bar".into(),
                Tensor::from_vec(self.alpha_bar.clone()),
            ),
            (
                "schedule.posterior_var".into(),
                Tensor::from_vec(self.posterior_var.clone()),
            ),
        ]
    }
}

/// A subsampled reverse timeline.
///
/// Positions are stored in sampling order: `step(0)` is the largest training
/// timestep (always T) and `step(len-1)` the smallest. The transition at
/// position `i` moves from `step(i)` to `step(i+1)` (clean data after the
/// last position). Retimed coefficients come from ratios of the original
/// `alpha_bar`, so `alpha_bar` at a timeline position equals the training
/// table entry exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTimeline {
    steps: Vec<usize>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    posterior_var: Vec<f64>,
    t_count: usize,
}

impl InferenceTimeline {
    fn from_ascending(schedule: &NoiseSchedule, ascending: Vec<usize>) -> Self {
        let k = ascending.len();
        let mut steps = Vec::with_capacity(k);
        let mut alpha_bar = Vec::with_capacity(k);
        let mut beta = Vec::with_capacity(k);
        let mut alpha = Vec::with_capacity(k);
        let mut posterior_var = Vec::with_capacity(k);
        for i in (0..k).rev() {
            let t = ascending[i];
            let prev = if i == 0 { 0 } else { ascending[i - 1] };
            let ab_t = schedule.alpha_bar(t);
            let ab_prev = schedule.alpha_bar_or_one(prev);
            let a = ab_t / ab_prev;
            let b = 1.0 - a;
            steps.push(t);
            alpha_bar.push(ab_t);
            alpha.push(a);
            beta.push(b);
            posterior_var.push(if prev == 0 {
                b
            } else {
                (1.0 - ab_prev) / (1.0 - ab_t) * b
            });
        }
        InferenceTimeline {
            steps,
            alpha_bar,
            beta,
            alpha,
            posterior_var,
            t_count: schedule.len(),
        }
    }

    /// Number of inference steps K.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Training-schedule length T.
    pub fn t_count(&self) -> usize {
        self.t_count
    }

    /// Training timestep at sampling position `i` (0 = noisiest).
    pub fn step(&self, i: usize) -> usize {
        self.steps[i]
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bar[i]
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.beta[i]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }

    pub fn posterior_var(&self, i: usize) -> f64 {
        self.posterior_var[i]
    }

    /// `abar` of the state the transition at position `i` lands on.
    pub fn alpha_bar_after(&self, i: usize) -> f64 {
        if i + 1 < self.steps.len() {
            self.alpha_bar[i + 1]
        } else {
            1.0
        }
    }

    /// Whether the transition at position `i` is the final one (no noise).
    pub fn is_final(&self, i: usize) -> bool {
        i + 1 == self.steps.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::linear(1024, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1024), 0.02);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_snr_monotone() {
        let s = NoiseSchedule::linear(1024, 1e-4, 0.02).unwrap();
        for t in 2..=1024 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let snr = |t: usize| s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
            assert!(snr(t) < snr(t - 1));
        }
        assert!(s.posterior_var.iter().all(|&v| v >= 0.0));
    }

    // Independent cumulative product in double-double arithmetic; `mul_add`
    // recovers the exact rounding error of each product term.
    fn alpha_bar_dd(betas: &[f64]) -> Vec<f64> {
        let (mut hi, mut lo) = (1.0f64, 0.0f64);
        let mut out = Vec::with_capacity(betas.len());
        for &b in betas {
            let a = 1.0 - b;
            let p = hi * a;
            let err = hi.mul_add(a, -p);
            let t = lo.mul_add(a, err);
            hi = p + t;
            lo = (p - hi) + t;
            out.push(hi + lo);
        }
        out
    }

    #[test]
    fn alpha_bar_matches_extended_precision_product() {
        let s = NoiseSchedule::linear(1024, 1e-4, 0.02).unwrap();
        let betas: Vec<f64> = (1..=1024).map(|t| s.beta(t)).collect();
        let reference = alpha_bar_dd(&betas);
        for t in 1..=1024usize {
            let rel = (s.alpha_bar(t) - reference[t - 1]).abs() / reference[t - 1];
            assert!(rel < 1e-12, "t={t} rel={rel:.3e}");
        }
        // First-order sanity: abar_T is within the second-order correction
        // sum(beta^2)/2 of exp(-sum beta) ~ 3.4e-5.
        let log_est = -betas.iter().sum::<f64>();
        let second_order = betas.iter().map(|b| b * b).sum::<f64>() / 2.0;
        assert!((s.alpha_bar(1024).ln() - log_est).abs() < 2.0 * second_order);
    }

    #[test]
    fn identity_timeline_recovers_beta() {
        let s = NoiseSchedule::linear(64, 1e-4, 0.02).unwrap();
        let tl = s.subsample(64).unwrap();
        assert_eq!(tl.len(), 64);
        for i in 0..64 {
            let t = tl.step(i);
            assert_eq!(t, 64 - i);
            assert!((tl.beta(i) - s.beta(t)).abs() / s.beta(t) < 1e-12);
            assert_eq!(tl.alpha_bar(i), s.alpha_bar(t));
        }
    }

    #[test]
    fn subsample_300_of_1024() {
        let s = NoiseSchedule::linear(1024, 1e-4, 0.02).unwrap();
        let tl = s.subsample(300).unwrap();
        assert_eq!(tl.len(), 300);
        assert_eq!(tl.step(0), 1024);
        for i in 1..300 {
            assert!(tl.step(i) < tl.step(i - 1));
        }
        // Retiming keeps the marginal exactly: stored abar is the table value.
        for i in 0..300 {
            assert_eq!(tl.alpha_bar(i), s.alpha_bar(tl.step(i)));
        }
        // Retimed betas stay in (0, 1).
        for i in 0..300 {
            assert!(tl.beta(i) > 0.0 && tl.beta(i) < 1.0);
        }
    }

    #[test]
    fn four_step_hand_check() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let tl = s.subsample(2).unwrap();
        assert_eq!(tl.steps(), &[4, 2]);
        let expect = 1.0 - s.alpha_bar(4) / s.alpha_bar(2);
        assert!((tl.beta(0) - expect).abs() < 1e-15);
        let expect_final = 1.0 - s.alpha_bar(2);
        assert!((tl.beta(1) - expect_final).abs() < 1e-15);
        assert!(tl.is_final(1) && !tl.is_final(0));
    }

    #[test]
    fn subsample_rejects_bad_k() {
        let s = NoiseSchedule::linear(16, 1e-4, 0.02).unwrap();
        assert!(s.subsample(1).is_err());
        assert!(s.subsample(17).is_err());
    }

    #[test]
    fn marginal_noise_special_cases() {
        let s = NoiseSchedule::linear(1024, 1e-4, 0.02).unwrap();
        let mut rng = crate::rng::Stream::new(5);
        let noise = Field::gaussian(8, 8, &mut rng);
        // x0 = 0: output is sqrt(1-abar)*noise.
        let zero = Field::zeros(8, 8);
        let out = s.marginal_noise(&zero, 500, &noise).unwrap();
        let scale = (1.0 - s.alpha_bar(500)).sqrt();
        for (o, n) in out.data().iter().zip(noise.data()) {
            assert!((o - scale * n).abs() < 1e-15);
        }
        // noise = 0: output is sqrt(abar)*x0 exactly.
        let x0 = Field::gaussian(8, 8, &mut rng);
        let out = s.marginal_noise(&x0, 200, &zero).unwrap();
        let scale = s.alpha_bar(200).sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, scale * x);
        }
    }

    #[test]
    fn marginal_matches_single_step_composition() {
        // Monte Carlo: applying the one-step kernel t times matches the
        // closed-form marginal in mean and variance.
        let s = NoiseSchedule::linear(64, 1e-3, 0.05).unwrap();
        let t = 48usize;
        let x0 = 0.7f64;
        let n = 100_000usize;
        let mut rng = crate::rng::Stream::new(31);
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = x0;
            for step in 1..=t {
                let b = s.beta(step);
                x = (1.0 - b).sqrt() * x + b.sqrt() * rng.next_gaussian();
            }
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        assert!((mean - ab.sqrt() * x0).abs() < 0.02);
        assert!((var - (1.0 - ab)).abs() / (1.0 - ab) < 0.03);
    }

    #[test]
    fn tensors_roundtrip_bit_exact() {
        let s = NoiseSchedule::linear(128, 1e-4, 0.02).unwrap();
        let tensors = s.to_tensors();
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data.clone())
                .unwrap()
        };
        let back = NoiseSchedule::from_tables(
            get("schedule.beta"),
            get("schedule.alpha"),
            get("schedule.alpha_bar"),
            get("schedule.posterior_var"),
        )
        .unwrap();
        assert_eq!(s, back);
    }
}
