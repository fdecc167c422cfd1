//! AdamW with decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
        }
    }
}

/// First/second moment estimates per parameter name, plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW step over a named parameter map. Parameters without a gradient
/// entry are left untouched. A non-finite gradient rejects the whole step.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::OptimizerStep(format!(
                "non-finite gradient for parameter `{name}`"
            )));
        }
        let p = params.get(name).ok_or_else(|| {
            Error::OptimizerStep(format!("gradient for unknown parameter `{name}`"))
        })?;
        p.check_same_shape(g, "adamw gradient")?;
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i];
            // decoupled decay: shrink the weight directly, not through the moments
            p.data_mut()[i] =
                pi - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * pi);
        }
    }
    Ok(())
}
