//! Bias-corrected Adam over flat parameter blocks.

use crate::denoiser::model::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators mirroring the parameter blocks.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            v: params.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update. Gradients must share the parameter block structure and
/// be finite; a non-finite gradient aborts with the offending block name.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.arch != grads.arch || params.blocks.len() != grads.blocks.len() {
        return Err(Error::Dimension("gradient blocks do not match parameters".into()));
    }
    for (pb, gb) in params.blocks.iter().zip(&grads.blocks) {
        if pb.values.len() != gb.values.len() {
            return Err(Error::Dimension(format!("gradient block {} has wrong length", gb.name)));
        }
        if gb.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in block {}", gb.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (b, (pb, gb)) in params.blocks.iter_mut().zip(&grads.blocks).enumerate() {
        let m = &mut state.m[b];
        let v = &mut state.v[b];
        for i in 0..pb.values.len() {
            let g = gb.values[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pb.values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
