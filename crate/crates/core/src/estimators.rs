//! Backward return estimators over one episode segment.
//!
//! All functions take a segment `t = 0..T` that does not cross an episode
//! boundary: `x[t]` is the per-state signal at `s_t`, `bootstrap[t]` is a
//! critic value at `s_{t+1}`, and `terminal` seeds the recursion at `s_T`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::OutOfRange(alloc::format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::OutOfRange(alloc::format!("lambda {} not in [0, 1)", self.lambda)));
        }
        Ok(())
    }
}

/// Sign of the bootstrap term in the harm-return recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarmBlend {
    /// Convex blend, same form as the constraint estimator.
    #[default]
    Plus,
    /// Subtracts the bootstrap term instead.
    Minus,
}

fn check_aligned(x: &[f64], bootstrap: &[f64]) -> Result<()> {
    if x.len() != bootstrap.len() {
        return Err(Error::LengthMismatch("signal and bootstrap values"));
    }
    Ok(())
}

/// `V̂_t = max{x_t, γ(λ V̂_{t+1} + (1 − λ) V(s_{t+1}))}` with `V̂_T = terminal`.
pub fn tdl_max(x: &[f64], bootstrap: &[f64], terminal: f64, cfg: &EstimatorConfig) -> Result<Vec<f64>> {
    check_aligned(x, bootstrap)?;
    let (g, l) = (cfg.gamma, cfg.lambda);
    let mut out = vec![0.0; x.len()];
    let mut next = terminal;
    for t in (0..x.len()).rev() {
        next = x[t].max(g * (l * next + (1.0 - l) * bootstrap[t]));
        out[t] = next;
    }
    Ok(out)
}

/// Harm return over per-state harm `h`, with a switch for the bootstrap sign.
pub fn harm_return(
    h: &[f64],
    bootstrap: &[f64],
    terminal: f64,
    cfg: &EstimatorConfig,
    blend: HarmBlend,
) -> Result<Vec<f64>> {
    match blend {
        HarmBlend::Plus => tdl_max(h, bootstrap, terminal, cfg),
        HarmBlend::Minus => {
            check_aligned(h, bootstrap)?;
            let (g, l) = (cfg.gamma, cfg.lambda);
            let mut out = vec![0.0; h.len()];
            let mut next = terminal;
            for t in (0..h.len()).rev() {
                next = h[t].max(g * (l * next - (1.0 - l) * bootstrap[t]));
                out[t] = next;
            }
            Ok(out)
        }
    }
}

/// Cumulative λ-return `G_t = c_t + γ(λ G_{t+1} + (1 − λ) V(s_{t+1}))`
/// with `G_T = terminal`.
pub fn td_lambda_sum(c: &[f64], bootstrap: &[f64], terminal: f64, cfg: &EstimatorConfig) -> Result<Vec<f64>> {
    check_aligned(c, bootstrap)?;
    let (g, l) = (cfg.gamma, cfg.lambda);
    let mut out = vec![0.0; c.len()];
    let mut next = terminal;
    for t in (0..c.len()).rev() {
        next = c[t] + g * (l * next + (1.0 - l) * bootstrap[t]);
        out[t] = next;
    }
    Ok(out)
}

/// Generalized advantage estimation. `values` has one more entry than
/// `rewards`; `dones[t]` marks `s_{t+1}` as terminal, which zeroes its value
/// and stops propagation.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 || dones.len() != rewards.len() {
        return Err(Error::LengthMismatch("rewards, values and done flags"));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Exact discounted tail maximum `max_{τ ≥ t} γ^{τ−t} x_τ`.
pub fn tail_max(x: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut next = f64::NEG_INFINITY;
    for t in (0..x.len()).rev() {
        next = x[t].max(gamma * next);
        out[t] = next;
    }
    out
}

/// Contraction factor `γ(1 − λ)/(1 − γλ)` of the TD(λ)-max operator.
pub fn contraction_eta(gamma: f64, lambda: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) || !(0.0..1.0).contains(&lambda) {
        return Err(Error::OutOfRange(alloc::format!(
            "contraction needs gamma, lambda in [0, 1), got {gamma}, {lambda}"
        )));
    }
    Ok(gamma * (1.0 - lambda) / (1.0 - gamma * lambda))
}
