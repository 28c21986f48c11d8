//! Noise-prediction backends.
//!
//! Two implementations sit behind [`NoisePredictor`]: an exact analytic
//! oracle for Gaussian data, used to verify the sampler math, and a small
//! trainable convolutional network ([`ConvDenoiser`]) that supplies the
//! learned predictors for both branches.

mod adam;
mod convnet;

pub use adam::{AdamConfig, AdamState};
pub use convnet::{ConvDenoiser, ConvLayer, ForwardCache, CHANNELS, TIME_EMBED_DIM};

use crate::field::Field;

/// Everything a backend sees at one reverse or training step.
pub struct DenoiserInput<'a> {
    /// Noisy sample x_t or y_t.
    pub noisy: &'a Field,
    /// Conditioning field: the partner branch's clean estimate, the fixed
    /// conditioning mask in diffusion space, or the noisy partner itself.
    pub condition: &'a Field,
    /// Training timestep (1-based).
    pub t: usize,
    /// Training-schedule length T.
    pub t_total: usize,
    /// Closed-form marginal coefficient at `t`.
    pub alpha_bar: f64,
}

pub trait NoisePredictor: Sync {
    /// Predicts the noise component of `input.noisy`.
    fn predict(&self, input: &DenoiserInput<'_>) -> Field;

    /// Variance of the reverse transition landing on `alpha_bar_prev`.
    ///
    /// `schedule_var` is the schedule's default (posterior variance, zero at
    /// the final transition) and is what learned models use. The Gaussian
    /// oracle overrides this with the exact reverse-kernel variance, which a
    /// plug-in mean plus fixed posterior variance understates on coarse
    /// timelines.
    fn reverse_variance(&self, schedule_var: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
        let _ = (alpha_bar_t, alpha_bar_prev);
        schedule_var
    }
}

/// Exact noise predictor for data distributed as N(mean, sigma2 * I).
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mean: Field,
    pub sigma2: f64,
}

impl GaussianOracle {
    pub fn new(mean: Field, sigma2: f64) -> Self {
        assert!(sigma2 >= 0.0, "sigma2 must be nonnegative");
        GaussianOracle { mean, sigma2 }
    }

    /// Posterior mean of the clean sample given the noisy one.
    ///
    /// E[x0 | x_t] = mu + sqrt(ab) s2 / (ab s2 + 1 - ab) * (x_t - sqrt(ab) mu)
    pub fn posterior_mean(&self, noisy: &Field, alpha_bar: f64) -> Field {
        let root_ab = alpha_bar.sqrt();
        let gain = root_ab * self.sigma2 / (alpha_bar * self.sigma2 + 1.0 - alpha_bar);
        noisy
            .zip_map(&self.mean, |xt, mu| mu + gain * (xt - root_ab * mu))
            .expect("oracle mean shape matches input")
    }

    /// The noise consistent with the posterior-mean clean estimate:
    /// eps* = (x_t - sqrt(ab) E[x0|x_t]) / sqrt(1 - ab).
    pub fn predict_noise(&self, noisy: &Field, alpha_bar: f64) -> Field {
        let root_ab = alpha_bar.sqrt();
        let root_1mab = (1.0 - alpha_bar).sqrt();
        let x0 = self.posterior_mean(noisy, alpha_bar);
        noisy
            .zip_map(&x0, |xt, m| (xt - root_ab * m) / root_1mab)
            .expect("shapes match")
    }

    /// Var(x0 | x_t) for this data law.
    pub fn posterior_var(&self, alpha_bar: f64) -> f64 {
        self.sigma2 * (1.0 - alpha_bar) / (alpha_bar * self.sigma2 + 1.0 - alpha_bar)
    }
}

impl NoisePredictor for GaussianOracle {
    fn predict(&self, input: &DenoiserInput<'_>) -> Field {
        self.predict_noise(input.noisy, input.alpha_bar)
    }

    fn reverse_variance(&self, _schedule_var: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
        // Exact variance of p(x_prev | x_t) when x0 ~ N(mu, sigma2 I):
        // the posterior variance of the bridge plus the clean-sample
        // uncertainty pushed through the bridge coefficient.
        let beta_r = 1.0 - alpha_bar_t / alpha_bar_prev;
        let one_m_ab = 1.0 - alpha_bar_t;
        let btilde = (1.0 - alpha_bar_prev) / one_m_ab * beta_r;
        let coef = alpha_bar_prev.sqrt() * beta_r / one_m_ab;
        btilde + coef * coef * self.posterior_var(alpha_bar_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_posterior() {
        // sigma2 = 0: E[x0|x_t] = mu exactly, eps* = (x_t - sqrt(ab) mu)/sqrt(1-ab).
        let mu = Field::constant(2, 2, 0.4);
        let oracle = GaussianOracle::new(mu.clone(), 0.0);
        let noisy = Field::from_vec(2, 2, vec![1.0, -0.5, 0.0, 2.0]).unwrap();
        let ab = 0.3;
        let m = oracle.posterior_mean(&noisy, ab);
        assert_eq!(m, mu);
        let eps = oracle.predict_noise(&noisy, ab);
        for (e, x) in eps.data().iter().zip(noisy.data()) {
            let expect = (x - ab.sqrt() * 0.4) / (1.0 - ab).sqrt();
            assert!((e - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn standard_normal_half_signal() {
        // mu = 0, sigma2 = 1, abar = 0.5: E[x0|x_t] = sqrt(0.5) * x_t.
        let oracle = GaussianOracle::new(Field::zeros(1, 1), 1.0);
        let mut noisy = Field::zeros(1, 1);
        noisy.set(0, 0, 1.3);
        let m = oracle.posterior_mean(&noisy, 0.5);
        assert!((m.get(0, 0) - 0.5f64.sqrt() * 1.3).abs() < 1e-12);
    }

    #[test]
    fn exact_variance_reduces_to_posterior_var_at_final() {
        let oracle = GaussianOracle::new(Field::zeros(1, 1), 0.25);
        let ab = 0.9;
        let v = oracle.reverse_variance(0.0, ab, 1.0);
        assert!((v - oracle.posterior_var(ab)).abs() < 1e-15);
    }
}
