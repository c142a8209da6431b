//! Adam with the bias-corrected update written as
//! `theta -= alpha * m / ((1 - b1^t) * sqrt(v / (1 - b2^t)) + eps)`,
//! plus the conventional `alpha * m_hat / (sqrt(v_hat) + eps)` form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdamVariant {
    /// `(1 - b1^t)` multiplies the root term; eps added outside it.
    #[default]
    Printed,
    /// `m_hat / (sqrt(v_hat) + eps)`.
    Conventional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub variant: AdamVariant,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            variant: AdamVariant::Printed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments for parameter blocks of the given sizes.
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update over all parameter blocks. Gradients are checked for
/// finiteness before anything is modified.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameter blocks, {} gradient blocks, {} moment blocks",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (b, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[b].len() {
            return Err(Error::InvalidArgument(format!("adam: block {b} shape mismatch")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { block: b });
        }
    }
    state.t += 1;
    let AdamConfig {
        alpha,
        beta1,
        beta2,
        eps,
        variant,
    } = state.config;
    let t = state.t as f64;
    let c1 = 1.0 - beta1.powf(t);
    let c2 = 1.0 - beta2.powf(t);
    for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[b], &mut state.v[b]);
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let step = match variant {
                AdamVariant::Printed => alpha * m[i] / (c1 * (v[i] / c2).sqrt() + eps),
                AdamVariant::Conventional => alpha * (m[i] / c1) / ((v[i] / c2).sqrt() + eps),
            };
            p[i] -= step;
        }
    }
    Ok(())
}
