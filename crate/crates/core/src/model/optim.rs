//! Decoupled weight-decay Adam.

use super::{ModelConfig, ModelParams, ModelState};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState { m: ModelParams::zeros(cfg), v: ModelParams::zeros(cfg), step: 0 }
    }
}

/// One AdamW update: weight decay is applied directly to the parameters,
/// not through the moments.
pub fn adam_step(state: &mut ModelState, grads: &mut ModelParams, opt: &mut AdamState, hp: &AdamParams) {
    opt.step += 1;
    state.train_step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);

    let params = state.params.flat_mut();
    let gs = grads.flat_mut();
    let ms = opt.m.flat_mut();
    let vs = opt.v.flat_mut();
    for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
        debug_assert_eq!(p.0, g.0);
        debug_assert_eq!(p.1, g.1, "gradient shape mismatch for {}", p.0);
        let (pd, gd, md, vd) = (p.2, g.2, m.2, v.2);
        for i in 0..pd.len() {
            pd[i] -= hp.lr * hp.weight_decay * pd[i];
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gd[i];
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
}
