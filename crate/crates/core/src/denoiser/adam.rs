//! Moment-based adaptive optimizer with bias correction.

use crate::denoiser::ConvDenoiser;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates mirroring the parameter shapes.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ConvDenoiser,
    pub v: ConvDenoiser,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            m: ConvDenoiser::zeros(),
            v: ConvDenoiser::zeros(),
            step: 0,
        }
    }

    /// One update over all parameter blocks.
    pub fn apply(&mut self, params: &mut ConvDenoiser, grads: &ConvDenoiser, cfg: &AdamConfig) {
        self.step += 1;
        let gblocks: Vec<Vec<f64>> = grads.blocks().iter().map(|(_, _, d)| d.to_vec()).collect();
        let mut pblocks = params.blocks_mut();
        let mblocks = self.m.blocks_mut();
        let vblocks = self.v.blocks_mut();
        for (((p, g), m), v) in pblocks
            .iter_mut()
            .zip(gblocks.iter())
            .zip(mblocks)
            .zip(vblocks)
        {
            adam_update_slice(p, g, m, v, self.step, cfg);
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// The scalar update rule on one contiguous block.
pub fn adam_update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
