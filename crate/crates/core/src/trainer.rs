//! PPO with Lagrange multipliers on a selected constraint formulation.
//!
//! One update collects `M` steps from every environment, builds reward
//! advantages (GAE), constraint estimates (TD(λ)-max or cumulative
//! λ-returns), and for the counterfactual formulations replays the recorded
//! noise under the default policy to obtain harm or CCATE targets. The actor
//! and four critics are then optimized jointly, and the multiplier takes one
//! projected ascent step.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, sqrt};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{
    ccate, default_branch, estimate_default_threshold, harm, path_estimate, Aggregation,
    Formulation, Signal, Transform,
};
use crate::error::{Error, Result};
use crate::estimators::{gae, harm_return, td_lambda_sum, tdl_max, EstimatorConfig, HarmBlend};
use crate::nn::{
    gaussian_entropy, gaussian_log_prob, sigmoid, softplus, ActionMode, ActorPolicy, CriticTrunk,
    HeadKind, Model, ModelCache, ModelSpec, N_CRITICS, V_G_MU, V_G_PI, V_H, V_R,
};
use crate::optim::{clip_global, Adam};
use crate::rng::{self, SimRng, Stream};
use crate::scm::{Environment, InitRegime, TrajectoryBatch, VecEnv};

/// Piecewise-linear multiplier learning rate: constant until `hold`, then
/// linear to `final_lr` at `end`. Breakpoints refer to a run of `reference`
/// updates and are rescaled to the actual run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LagrangeSchedule {
    pub initial_lr: f64,
    pub hold: f64,
    pub final_lr: f64,
    pub end: f64,
    pub reference: f64,
}

impl Default for LagrangeSchedule {
    fn default() -> Self {
        Self::rover()
    }
}

impl LagrangeSchedule {
    pub fn rover() -> Self {
        Self {
            initial_lr: 1e-3,
            hold: 250.0,
            final_lr: 1.0,
            end: 15_000.0,
            reference: 15_000.0,
        }
    }

    pub fn tractor_trailer() -> Self {
        Self {
            initial_lr: 1e-3,
            hold: 1_000.0,
            final_lr: 0.1,
            end: 15_000.0,
            reference: 15_000.0,
        }
    }

    /// Learning rate at 1-based `update` of a run with `total` updates.
    pub fn lr(&self, update: usize, total: usize) -> f64 {
        let scale = total as f64 / self.reference;
        let (hold, end) = (self.hold * scale, self.end * scale);
        let k = update as f64;
        if k <= hold {
            self.initial_lr
        } else if k >= end {
            self.final_lr
        } else {
            self.initial_lr + (self.final_lr - self.initial_lr) * (k - hold) / (end - hold)
        }
    }
}

/// Projected dual ascent step.
pub fn lagrange_update(w: f64, mean_target: f64, threshold: f64, lr: f64) -> f64 {
    (w + lr * (mean_target - threshold)).max(0.0)
}

/// Where PPO's ratio clipping applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clip the combined reward-minus-constraint advantage.
    #[default]
    Combined,
    /// Clip only the reward term; the constraint term uses the raw ratio.
    RewardOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub formulation: Formulation,
    pub n_envs: usize,
    pub updates: usize,
    pub steps_per_update: usize,
    pub counterfactual_steps: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub estimator: EstimatorConfig,
    pub gae_lambda: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub lagrange: LagrangeSchedule,
    pub lagrange_init: f64,
    pub hidden: Vec<usize>,
    pub encoder: Vec<usize>,
    pub critic_trunk: CriticTrunk,
    pub clip_mode: ClipMode,
    pub harm_blend: HarmBlend,
    pub normalize_advantages: bool,
    /// Rollouts behind the default-policy threshold, and how often (in
    /// updates) it is re-estimated.
    pub threshold_rollouts: usize,
    pub threshold_refresh: usize,
    /// Train under a regime other than the formulation's own.
    pub init_override: Option<InitRegime>,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::rover()
    }
}

impl TrainConfig {
    /// Desk-scale rover defaults.
    pub fn rover() -> Self {
        Self {
            formulation: Formulation::HarmC,
            n_envs: 256,
            updates: 2000,
            steps_per_update: 24,
            counterfactual_steps: 5,
            minibatches: 3,
            epochs: 5,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            estimator: EstimatorConfig::default(),
            gae_lambda: 0.95,
            lr: 1e-3,
            max_grad_norm: 1.0,
            lagrange: LagrangeSchedule::rover(),
            lagrange_init: 0.0,
            hidden: vec![64, 64],
            encoder: Vec::new(),
            critic_trunk: CriticTrunk::Shared,
            clip_mode: ClipMode::Combined,
            harm_blend: HarmBlend::Plus,
            normalize_advantages: true,
            threshold_rollouts: 256,
            threshold_refresh: 100,
            init_override: None,
            checkpoint_every: 100,
            seed: 0,
        }
    }

    /// Desk-scale tractor-trailer defaults.
    pub fn tractor_trailer() -> Self {
        Self {
            n_envs: 512,
            updates: 3000,
            counterfactual_steps: 4,
            lagrange: LagrangeSchedule::tractor_trailer(),
            encoder: vec![64, 64],
            ..Self::rover()
        }
    }

    pub fn regime(&self) -> InitRegime {
        self.init_override.unwrap_or(self.formulation.init_regime())
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        let positive = [
            ("n_envs", self.n_envs),
            ("updates", self.updates),
            ("steps_per_update", self.steps_per_update),
            ("counterfactual_steps", self.counterfactual_steps),
            ("minibatches", self.minibatches),
            ("epochs", self.epochs),
            ("threshold_rollouts", self.threshold_rollouts),
            ("threshold_refresh", self.threshold_refresh),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(alloc::format!("{name} must be positive")));
            }
        }
        if self.minibatches > self.n_envs * self.steps_per_update {
            return Err(Error::Config("more minibatches than samples".into()));
        }
        if !(self.clip > 0.0 && self.lr > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::Config("clip, lr and max_grad_norm must be positive".into()));
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.lagrange_init >= 0.0) {
            return Err(Error::Config("coefficients must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.encoder.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, obs_dim: usize, action_dim: usize) -> ModelSpec {
        ModelSpec {
            obs_dim,
            action_dim,
            hidden: self.hidden.clone(),
            encoder: self.encoder.clone(),
            critic_trunk: self.critic_trunk,
            heads: self.formulation.heads(),
            log_std_init: -0.5,
            actor_output_gain: 0.01,
        }
    }
}

/// Optimizer inputs for one batch of samples.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub obs: &'a [f64],
    pub actions: &'a [f64],
    pub old_log_probs: &'a [f64],
    /// Reward advantages (normalized if enabled).
    pub reward_adv: &'a [f64],
    /// Constraint advantages: formulation target minus critic.
    pub constraint_adv: &'a [f64],
    /// Critic targets, four per row.
    pub targets: &'a [f64],
    /// Per-head loss weight (0 masks a head without a target).
    pub head_weights: [f64; N_CRITICS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_mode: ClipMode,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub policy: f64,
    pub value: [f64; N_CRITICS],
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// PPO term `−min(ρA, clip(ρ)A)` and its derivative with respect to `ρ`.
#[inline]
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    let (a, b) = (ratio * adv, clipped * adv);
    if a <= b || clipped == ratio {
        (-a, -adv)
    } else {
        (-b, 0.0)
    }
}

/// Critic loss on a raw output and its derivative.
#[inline]
pub fn head_loss(kind: HeadKind, raw: f64, target: f64) -> (f64, f64) {
    match kind {
        HeadKind::Linear => {
            let d = raw - target;
            (d * d, 2.0 * d)
        }
        HeadKind::Sigmoid => (softplus(raw) - target * raw, sigmoid(raw) - target),
    }
}

/// Mean surrogate + entropy + critic loss over the batch, accumulating its
/// exact gradient into `grads`.
pub fn loss_and_grad(
    model: &Model,
    params: &[f64],
    batch: &LossBatch<'_>,
    lp: &LossParams,
    grads: &mut [f64],
    cache: &mut ModelCache,
) -> LossOutput {
    let ad = model.spec.action_dim;
    let b = batch.old_log_probs.len();
    let inv = 1.0 / b as f64;
    model.forward(params, batch.obs, b, true, true, cache);
    let log_std = model.log_std(params);
    let mut grad_means = vec![0.0; b * ad];
    let mut grad_log_std = vec![0.0; ad];
    let mut grad_critic = vec![0.0; b * N_CRITICS];
    let mut out = LossOutput::default();
    let var_inv: Vec<f64> = log_std.iter().map(|s| exp(-2.0 * s)).collect();
    for r in 0..b {
        let mean = &cache.means()[r * ad..(r + 1) * ad];
        let action = &batch.actions[r * ad..(r + 1) * ad];
        let logp = gaussian_log_prob(mean, log_std, action);
        let ratio = exp(logp - batch.old_log_probs[r]);
        out.approx_kl += (batch.old_log_probs[r] - logp) * inv;
        if (ratio - 1.0).abs() > lp.clip {
            out.clip_fraction += inv;
        }
        let (ar, ac) = (batch.reward_adv[r], batch.constraint_adv[r]);
        let (l, dratio) = match lp.clip_mode {
            ClipMode::Combined => clipped_objective(ratio, ar - lp.w * ac, lp.clip),
            ClipMode::RewardOnly => {
                let (l, d) = clipped_objective(ratio, ar, lp.clip);
                (l + lp.w * ratio * ac, d + lp.w * ac)
            }
        };
        out.policy += l * inv;
        // ∂ρ/∂logp = ρ.
        let dlogp = dratio * ratio * inv;
        if dlogp != 0.0 {
            for j in 0..ad {
                let z = action[j] - mean[j];
                grad_means[r * ad + j] += dlogp * z * var_inv[j];
                grad_log_std[j] += dlogp * (z * z * var_inv[j] - 1.0);
            }
        }
        for k in 0..N_CRITICS {
            let wk = batch.head_weights[k];
            if wk == 0.0 {
                continue;
            }
            let (l, d) = head_loss(
                model.spec.heads[k],
                cache.critic_raw(r, k),
                batch.targets[r * N_CRITICS + k],
            );
            out.value[k] += wk * l * inv;
            grad_critic[r * N_CRITICS + k] = lp.value_coef * wk * d * inv;
        }
    }
    out.entropy = gaussian_entropy(log_std);
    for g in grad_log_std.iter_mut() {
        *g -= lp.entropy_coef;
    }
    out.total = out.policy - lp.entropy_coef * out.entropy + lp.value_coef * out.value.iter().sum::<f64>();
    model.backward(params, cache, Some(&grad_means), Some(&grad_critic), grads);
    for (j, g) in grad_log_std.iter().enumerate() {
        grads[model.log_std_offset + j] += g;
    }
    out
}

/// Per-update training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    /// 1-based update index.
    pub update: usize,
    pub mean_reward: f64,
    pub episodes: usize,
    pub violations: usize,
    pub successes: usize,
    pub mean_episode_return: Option<f64>,
    pub mean_target: f64,
    pub threshold: f64,
    pub mean_harm: f64,
    pub w: f64,
    pub lagrange_lr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

impl UpdateMetrics {
    pub fn violation_probability(&self) -> Option<f64> {
        (self.episodes > 0).then(|| self.violations as f64 / self.episodes as f64)
    }

    pub fn success_rate(&self) -> Option<f64> {
        (self.episodes > 0).then(|| self.successes as f64 / self.episodes as f64)
    }
}

/// Pooled violation probability over a slice of updates.
pub fn pooled_violation(metrics: &[UpdateMetrics]) -> Option<f64> {
    let (v, n) = metrics
        .iter()
        .fold((0, 0), |(v, n), m| (v + m.violations, n + m.episodes));
    (n > 0).then(|| v as f64 / n as f64)
}

pub fn pooled_success(metrics: &[UpdateMetrics]) -> Option<f64> {
    let (s, n) = metrics
        .iter()
        .fold((0, 0), |(s, n), m| (s + m.successes, n + m.episodes));
    (n > 0).then(|| s as f64 / n as f64)
}

/// Everything needed to evaluate or resume a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub env: String,
    pub formulation: Formulation,
    pub update: usize,
    pub model: Model,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub w: f64,
    pub threshold: f64,
    pub learner_rng: SimRng,
    /// Pooled statistics since the previous checkpoint.
    pub violation: Option<f64>,
    pub success: Option<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Lexicographic choice: fewest violations, then most successes; ties go to
/// the later checkpoint, so a run that never worsened keeps its final one.
pub fn select_checkpoint(stats: &[(Option<f64>, Option<f64>)]) -> Result<usize> {
    if stats.is_empty() {
        return Err(Error::Empty("checkpoints"));
    }
    let key = |k: usize| {
        let (v, s) = stats[k];
        (v.unwrap_or(f64::INFINITY), -s.unwrap_or(f64::NEG_INFINITY))
    };
    let mut best = 0;
    for k in 1..stats.len() {
        let (a, b) = (key(k), key(best));
        if a.0 < b.0 || (a.0 == b.0 && a.1 <= b.1) {
            best = k;
        }
    }
    Ok(best)
}

/// Per-state quantities derived from one rollout batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub reward_adv: Vec<f64>,
    pub reward_returns: Vec<f64>,
    /// Learner constraint estimate on the formulation's transformed signal.
    pub v_g_pi: Vec<f64>,
    /// Counterfactual default outcome (empty unless needed).
    pub v_g_mu: Vec<f64>,
    /// Per-state harm base (empty unless needed).
    pub harm: Vec<f64>,
    /// Target for the `V_H` slot: harm return or CCATE (empty unless needed).
    pub v_h: Vec<f64>,
    /// The constrained quantity and the critic it is compared against.
    pub target: Vec<f64>,
    pub constraint_adv: Vec<f64>,
}

/// Build all targets for a batch given critic values at every stored state
/// (`values`, four per row) and after the window (`last_values`).
pub fn batch_targets<E: Environment>(
    env: &E,
    batch: &TrajectoryBatch<E::State>,
    values: &[f64],
    last_values: &[f64],
    model: &Model,
    params: &[f64],
    cfg: &TrainConfig,
    cache: &mut ModelCache,
) -> Result<BatchTargets> {
    let (ne, m) = (batch.n_envs, batch.n_steps);
    let n = ne * m;
    let form = cfg.formulation;
    let est = &cfg.estimator;
    let ct = form.constraint_transform();
    let next_value = |e: usize, t: usize, k: usize| {
        if t + 1 < m {
            values[(e * m + t + 1) * N_CRITICS + k]
        } else {
            last_values[e * N_CRITICS + k]
        }
    };
    let mut out = BatchTargets {
        reward_adv: vec![0.0; n],
        reward_returns: vec![0.0; n],
        v_g_pi: vec![0.0; n],
        v_g_mu: Vec::new(),
        harm: Vec::new(),
        v_h: Vec::new(),
        target: vec![0.0; n],
        constraint_adv: vec![0.0; n],
    };
    // Segment ends: last index of each episode piece inside the window.
    let mut seg_end = vec![0usize; n];
    for e in 0..ne {
        let mut start = 0;
        for t in 0..m {
            let i = e * m + t;
            if batch.done[i] || t + 1 == m {
                for s in start..=t {
                    seg_end[e * m + s] = t;
                }
                start = t + 1;
            }
        }
    }
    for e in 0..ne {
        let rows = e * m..(e + 1) * m;
        let rewards = &batch.rewards[rows.clone()];
        let mut vals: Vec<f64> = rows.clone().map(|i| values[i * N_CRITICS + V_R]).collect();
        vals.push(last_values[e * N_CRITICS + V_R]);
        let adv = gae(rewards, &vals, &batch.done[rows.clone()], est.gamma, cfg.gae_lambda)?;
        for t in 0..m {
            out.reward_adv[e * m + t] = adv[t];
            out.reward_returns[e * m + t] = adv[t] + vals[t];
        }
        let mut t0 = 0;
        while t0 < m {
            let t1 = seg_end[e * m + t0];
            let terminal = batch.done[e * m + t1];
            let x: Vec<f64> = (t0..=t1).map(|t| ct.apply(batch.g[e * m + t])).collect();
            let mut boot: Vec<f64> = (t0..=t1).map(|t| next_value(e, t, V_G_PI)).collect();
            let seed = if terminal {
                ct.apply(batch.next_g[e * m + t1])
            } else {
                boot[boot.len() - 1]
            };
            let last = boot.len() - 1;
            boot[last] = seed;
            let est_seg = match form.aggregation() {
                Aggregation::Max => tdl_max(&x, &boot, seed, est)?,
                Aggregation::Cumulative => td_lambda_sum(&x, &boot, seed, est)?,
            };
            out.v_g_pi[e * m + t0..=e * m + t1].copy_from_slice(&est_seg);
            t0 = t1 + 1;
        }
    }
    if form.needs_counterfactual() {
        counterfactual_targets(env, batch, values, last_values, &seg_end, model, params, cfg, cache, &mut out)?;
    }
    let critic_slot = match form.signal() {
        Signal::Constraint => V_G_PI,
        _ => V_H,
    };
    for i in 0..n {
        out.target[i] = match form.signal() {
            Signal::Constraint => out.v_g_pi[i],
            _ => out.v_h[i],
        };
        out.constraint_adv[i] = out.target[i] - values[i * N_CRITICS + critic_slot];
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn counterfactual_targets<E: Environment>(
    env: &E,
    batch: &TrajectoryBatch<E::State>,
    values: &[f64],
    last_values: &[f64],
    seg_end: &[usize],
    model: &Model,
    params: &[f64],
    cfg: &TrainConfig,
    cache: &mut ModelCache,
    out: &mut BatchTargets,
) -> Result<()> {
    let (ne, m, nd, od) = (batch.n_envs, batch.n_steps, batch.noise_dim, batch.obs_dim);
    let n = ne * m;
    let est = &cfg.estimator;
    let form = cfg.formulation;
    let tt = form.target_transform();
    // Default-policy branches from every stored state over the recorded noise.
    let mut branches = Vec::with_capacity(n);
    let mut branch_obs = Vec::new();
    for e in 0..ne {
        for t in 0..m {
            let i = e * m + t;
            let len = cfg.counterfactual_steps.min(seg_end[i] - t + 1);
            let br = default_branch(env, &batch.states[i], &batch.noise[i * nd..(i + len) * nd], len)?;
            branch_obs.extend_from_slice(&br.obs);
            branches.push((br.g, br.terminal));
        }
    }
    let rows = branch_obs.len() / od;
    let branch_values = if rows > 0 {
        model.critic_values(params, &branch_obs, rows, cache)
    } else {
        Vec::new()
    };
    let value_at = |e: usize, t: usize| {
        if t < m {
            values[(e * m + t) * N_CRITICS + V_G_MU]
        } else {
            last_values[e * N_CRITICS + V_G_MU]
        }
    };
    out.v_g_mu = vec![0.0; n];
    out.harm = vec![0.0; n];
    let mut row = 0;
    for e in 0..ne {
        for t in 0..m {
            let i = e * m + t;
            let (g, terminal) = &branches[i];
            let len = g.len() - 1;
            let v_mu = if len == 0 {
                g[0]
            } else {
                let vals: Vec<f64> = (0..len).map(|k| branch_values[(row + k) * N_CRITICS + V_G_MU]).collect();
                path_estimate(g, &vals, *terminal, est)?
            };
            row += len;
            out.v_g_mu[i] = v_mu;
            // The learner's own path over the same window, valued the same way.
            let wlen = cfg.counterfactual_steps.min(seg_end[i] - t + 1);
            let mut lg = Vec::with_capacity(wlen + 1);
            lg.push(batch.g[i]);
            lg.extend_from_slice(&batch.next_g[i..i + wlen]);
            let lvals: Vec<f64> = (1..=wlen).map(|k| value_at(e, t + k)).collect();
            let v_pi = path_estimate(&lg, &lvals, batch.done[i + wlen - 1], est)?;
            out.harm[i] = harm(v_pi, v_mu);
        }
    }
    out.v_h = vec![0.0; n];
    match form.signal() {
        Signal::Harm => {
            for e in 0..ne {
                let mut t0 = 0;
                while t0 < m {
                    let t1 = seg_end[e * m + t0];
                    let terminal = batch.done[e * m + t1];
                    let h: Vec<f64> = (t0..=t1).map(|t| tt.apply(out.harm[e * m + t])).collect();
                    let mut boot: Vec<f64> = (t0..=t1)
                        .map(|t| {
                            if t + 1 < m {
                                values[(e * m + t + 1) * N_CRITICS + V_H]
                            } else {
                                last_values[e * N_CRITICS + V_H]
                            }
                        })
                        .collect();
                    let last = boot.len() - 1;
                    let seed = if terminal { 0.0 } else { boot[last] };
                    boot[last] = seed;
                    let r = harm_return(&h, &boot, seed, est, cfg.harm_blend)?;
                    out.v_h[e * m + t0..=e * m + t1].copy_from_slice(&r);
                    t0 = t1 + 1;
                }
            }
        }
        Signal::Ccate => {
            for i in 0..n {
                out.v_h[i] = tt.apply(ccate(out.v_g_pi[i], values[i * N_CRITICS + V_G_MU]));
            }
        }
        Signal::Constraint => {}
    }
    Ok(())
}

/// Stateful trainer driving one run update by update.
pub struct Trainer<E: Environment> {
    pub cfg: TrainConfig,
    venv: VecEnv<E>,
    model: Model,
    params: Vec<f64>,
    adam: Adam,
    w: f64,
    threshold: f64,
    update: usize,
    learner_rng: SimRng,
    cache: ModelCache,
}

impl<E: Environment> Trainer<E> {
    pub fn new(env: E, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.model_spec(env.obs_dim(), env.action_dim());
        let model = Model::new(spec)?;
        let mut learner_rng = rng::stream(cfg.seed, Stream::Learner, 0);
        let params = model.init(&mut learner_rng);
        let venv = VecEnv::new(env, cfg.n_envs, cfg.regime(), cfg.seed)?;
        Ok(Self {
            adam: Adam::new(model.n_params, cfg.lr),
            w: cfg.lagrange_init,
            threshold: 0.0,
            update: 0,
            venv,
            model,
            params,
            learner_rng,
            cache: ModelCache::default(),
            cfg,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn env(&self) -> &E {
        self.venv.env()
    }

    pub fn multiplier(&self) -> f64 {
        self.w
    }

    pub fn updates_done(&self) -> usize {
        self.update
    }

    pub fn checkpoint(&self, violation: Option<f64>, success: Option<f64>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            env: self.venv.env().name().into(),
            formulation: self.cfg.formulation,
            update: self.update,
            model: self.model.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            w: self.w,
            threshold: self.threshold,
            learner_rng: self.learner_rng.clone(),
            violation,
            success,
        }
    }

    fn refresh_threshold(&mut self) -> Result<()> {
        let form = self.cfg.formulation;
        if !form.default_threshold() {
            return Ok(());
        }
        let transform = match form.transform() {
            Transform::Indicator => Transform::Indicator,
            _ => Transform::Identity,
        };
        self.threshold = estimate_default_threshold(
            self.venv.env(),
            self.cfg.regime(),
            transform,
            self.cfg.estimator.gamma,
            self.cfg.threshold_rollouts,
            self.cfg.seed ^ (self.update as u64).wrapping_mul(0x9E37_79B9),
        )?;
        Ok(())
    }

    /// Run one update.
    pub fn step(&mut self) -> Result<UpdateMetrics> {
        if self.update % self.cfg.threshold_refresh == 0 {
            self.refresh_threshold()?;
        }
        self.update += 1;
        let k = self.update;
        let m = self.cfg.steps_per_update;
        let batch = {
            let mut policy = ActorPolicy::new(&self.model, &self.params, ActionMode::Sample);
            self.venv.rollout(&mut policy, m)?
        };
        let n = batch.len();
        let values = self
            .model
            .critic_values(&self.params, &batch.obs, n, &mut self.cache);
        let last_values = self
            .model
            .critic_values(&self.params, &batch.last_obs, batch.n_envs, &mut self.cache);
        let targets = batch_targets(
            self.venv.env(),
            &batch,
            &values,
            &last_values,
            &self.model,
            &self.params,
            &self.cfg,
            &mut self.cache,
        )?;
        let mut reward_adv = targets.reward_adv.clone();
        if self.cfg.normalize_advantages {
            normalize(&mut reward_adv);
        }
        let mut critic_targets = vec![0.0; n * N_CRITICS];
        for i in 0..n {
            critic_targets[i * N_CRITICS + V_R] = targets.reward_returns[i];
            critic_targets[i * N_CRITICS + V_G_PI] = targets.v_g_pi[i];
            if !targets.v_g_mu.is_empty() {
                critic_targets[i * N_CRITICS + V_G_MU] = targets.v_g_mu[i];
                critic_targets[i * N_CRITICS + V_H] = targets.v_h[i];
            }
        }
        let cf = if targets.v_g_mu.is_empty() { 0.0 } else { 1.0 };
        let head_weights = [1.0, 1.0, cf, cf];
        let lp = LossParams {
            clip: self.cfg.clip,
            entropy_coef: self.cfg.entropy_coef,
            value_coef: self.cfg.value_coef,
            clip_mode: self.cfg.clip_mode,
            w: self.w,
        };
        let (od, ad) = (batch.obs_dim, batch.action_dim);
        let mut order: Vec<usize> = (0..n).collect();
        let mut grads = vec![0.0; self.model.n_params];
        let mut last = LossOutput::default();
        let mut grad_norm = 0.0;
        let mut mb = MinibatchBuffers::default();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.learner_rng);
            let size = n / self.cfg.minibatches;
            for b in 0..self.cfg.minibatches {
                let lo = b * size;
                let hi = if b + 1 == self.cfg.minibatches { n } else { lo + size };
                mb.fill(&order[lo..hi], &batch, &reward_adv, &targets.constraint_adv, &critic_targets, od, ad);
                grads.iter_mut().for_each(|g| *g = 0.0);
                let lb = LossBatch {
                    obs: &mb.obs,
                    actions: &mb.actions,
                    old_log_probs: &mb.log_probs,
                    reward_adv: &mb.reward_adv,
                    constraint_adv: &mb.constraint_adv,
                    targets: &mb.targets,
                    head_weights,
                };
                last = loss_and_grad(&self.model, &self.params, &lb, &lp, &mut grads, &mut self.cache);
                if !last.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "loss",
                        update: k,
                    });
                }
                grad_norm = clip_global(&mut grads, self.cfg.max_grad_norm);
                self.adam.step(&mut self.params, &grads)?;
                self.model.project(&mut self.params);
            }
        }
        let mean_target = targets.target.iter().sum::<f64>() / n as f64;
        let lagrange_lr = self.cfg.lagrange.lr(k, self.cfg.updates);
        self.w = lagrange_update(self.w, mean_target, self.threshold, lagrange_lr);
        if !self.w.is_finite() {
            return Err(Error::NonFinite {
                what: "multiplier",
                update: k,
            });
        }
        let episodes = batch.episodes.len();
        let violations = batch.episodes.iter().filter(|e| e.violated()).count();
        let successes = batch.episodes.iter().filter(|e| e.success).count();
        let mean_harm = if targets.harm.is_empty() {
            0.0
        } else {
            targets.harm.iter().sum::<f64>() / n as f64
        };
        Ok(UpdateMetrics {
            update: k,
            mean_reward: batch.rewards.iter().sum::<f64>() / n as f64,
            episodes,
            violations,
            successes,
            mean_episode_return: (episodes > 0).then(|| {
                batch.episodes.iter().map(|e| e.total_reward).sum::<f64>() / episodes as f64
            }),
            mean_target,
            threshold: self.threshold,
            mean_harm,
            w: self.w,
            lagrange_lr,
            policy_loss: last.policy,
            value_loss: last.value.iter().sum(),
            entropy: last.entropy,
            approx_kl: last.approx_kl,
            clip_fraction: last.clip_fraction,
            grad_norm,
        })
    }
}

#[derive(Default)]
struct MinibatchBuffers {
    obs: Vec<f64>,
    actions: Vec<f64>,
    log_probs: Vec<f64>,
    reward_adv: Vec<f64>,
    constraint_adv: Vec<f64>,
    targets: Vec<f64>,
}

impl MinibatchBuffers {
    #[allow(clippy::too_many_arguments)]
    fn fill<S>(
        &mut self,
        idx: &[usize],
        batch: &TrajectoryBatch<S>,
        reward_adv: &[f64],
        constraint_adv: &[f64],
        targets: &[f64],
        od: usize,
        ad: usize,
    ) {
        self.obs.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.reward_adv.clear();
        self.constraint_adv.clear();
        self.targets.clear();
        for &i in idx {
            self.obs.extend_from_slice(&batch.obs[i * od..(i + 1) * od]);
            self.actions.extend_from_slice(&batch.actions[i * ad..(i + 1) * ad]);
            self.log_probs.push(batch.log_probs[i]);
            self.reward_adv.push(reward_adv[i]);
            self.constraint_adv.push(constraint_adv[i]);
            self.targets
                .extend_from_slice(&targets[i * N_CRITICS..(i + 1) * N_CRITICS]);
        }
    }
}

fn normalize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = sqrt(var) + 1e-8;
    for v in x.iter_mut() {
        *v = (*v - mean) / sd;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{WallConfig, WallEnv};
    use crate::nn::CriticTrunk;

    #[test]
    fn schedule_breakpoints() {
        let s = LagrangeSchedule::rover();
        assert_eq!(s.lr(1, 15_000), 1e-3);
        assert_eq!(s.lr(250, 15_000), 1e-3);
        assert_eq!(s.lr(15_000, 15_000), 1.0);
        // Rescaled to 2,000 updates the ramp ends at the last update.
        assert_eq!(s.lr(2_000, 2_000), 1.0);
        let mid = s.lr(1_000, 2_000);
        assert!(mid > 1e-3 && mid < 1.0);
        let t = LagrangeSchedule::tractor_trailer();
        assert_eq!(t.lr(1_000, 15_000), 1e-3);
        assert!((t.lr(15_000, 15_000) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn multiplier_projection() {
        assert_eq!(lagrange_update(0.0, -1.0, 0.0, 0.5), 0.0);
        assert!((lagrange_update(0.5, 0.2, 0.0, 0.1) - 0.52).abs() < 1e-15);
    }

    #[test]
    fn clipped_objective_cases() {
        assert_eq!(clipped_objective(1.0, 2.0 - 0.5, 0.2).0, -1.5);
        // Positive advantage above the band is clipped and has no gradient.
        assert_eq!(clipped_objective(1.5, 1.0, 0.2), (-1.2, 0.0));
        // Negative advantage above the band keeps the unclipped term.
        assert_eq!(clipped_objective(1.5, -1.0, 0.2), (1.5, 1.0));
    }

    #[test]
    fn head_losses() {
        assert_eq!(head_loss(HeadKind::Linear, 1.0, 3.0).0, 4.0);
        assert_eq!(head_loss(HeadKind::Linear, 2.0, 2.0).0, 0.0);
        let (l, d) = head_loss(HeadKind::Sigmoid, 0.0, 1.0);
        assert!((l - libm::log(2.0)).abs() < 1e-15);
        assert_eq!(d, -0.5);
    }

    #[test]
    fn checkpoint_selection() {
        let s = |v: &[f64], su: &[f64]| -> Vec<(Option<f64>, Option<f64>)> {
            v.iter().zip(su).map(|(&a, &b)| (Some(a), Some(b))).collect()
        };
        assert_eq!(select_checkpoint(&s(&[0.3, 0.2, 0.1], &[0.1, 0.2, 0.3])).unwrap(), 2);
        assert_eq!(select_checkpoint(&s(&[0.1, 0.05, 0.2], &[0.0; 3])).unwrap(), 1);
        assert_eq!(select_checkpoint(&s(&[0.05, 0.05], &[0.8, 0.9])).unwrap(), 1);
        assert_eq!(select_checkpoint(&s(&[0.05, 0.05], &[0.9, 0.8])).unwrap(), 0);
        assert_eq!(select_checkpoint(&[(None, None), (Some(0.5), None)]).unwrap(), 1);
        assert!(select_checkpoint(&[]).is_err());
    }

    fn small_cfg(form: Formulation) -> TrainConfig {
        TrainConfig {
            formulation: form,
            n_envs: 4,
            updates: 3,
            steps_per_update: 8,
            hidden: vec![8],
            threshold_rollouts: 4,
            ..TrainConfig::rover()
        }
    }

    #[test]
    fn every_formulation_runs_and_is_reproducible() {
        for form in Formulation::ALL {
            let run = || {
                let env = WallEnv::new(WallConfig::default()).unwrap();
                let mut t = Trainer::new(env, small_cfg(form)).unwrap();
                (0..3).map(|_| t.step().unwrap()).collect::<Vec<_>>()
            };
            let (a, b) = (run(), run());
            assert_eq!(a, b, "{form}");
            assert!(a.iter().all(|m| m.w >= 0.0));
        }
    }

    #[test]
    fn w_zero_entropy_zero_reduces_to_ppo() {
        let env = WallEnv::new(WallConfig::default()).unwrap();
        let cfg = small_cfg(Formulation::Mc0);
        let model = Model::new(ModelSpec {
            critic_trunk: CriticTrunk::Separate,
            ..cfg.model_spec(env_obs(&env), 1)
        })
        .unwrap();
        let p = model.init(&mut rng::stream(5, Stream::Learner, 0));
        let obs = [0.1, 0.2, -0.4, 0.3, 0.9, -0.1];
        let actions = [0.3, -0.2, 1.0];
        let old = [-0.5, -1.5, -0.9];
        let adv = [1.0, -2.0, 0.5];
        let cadv = [3.0, 1.0, -1.0];
        let targets = [0.0; 12];
        let lb = LossBatch {
            obs: &obs,
            actions: &actions,
            old_log_probs: &old,
            reward_adv: &adv,
            constraint_adv: &cadv,
            targets: &targets,
            head_weights: [0.0; 4],
        };
        let lp = LossParams {
            clip: 0.2,
            entropy_coef: 0.0,
            value_coef: 0.5,
            clip_mode: ClipMode::Combined,
            w: 0.0,
        };
        let mut g = vec![0.0; model.n_params];
        let out = loss_and_grad(&model, &p, &lb, &lp, &mut g, &mut ModelCache::default());
        // Independent PPO loss: −mean(min(ρA, clip(ρ, 0.8, 1.2)A)).
        let mut cache = ModelCache::default();
        let ppo = |p: &[f64], cache: &mut ModelCache| {
            model.forward(p, &obs, 3, true, false, cache);
            let ls = model.log_std(p)[0];
            let mut total = 0.0;
            for r in 0..3 {
                let m = cache.means()[r];
                let lpv = -0.5 * ((actions[r] - m) / exp(ls)).powi(2) - ls - 0.5 * libm::log(2.0 * core::f64::consts::PI);
                let ratio = exp(lpv - old[r]);
                total -= (ratio * adv[r]).min(ratio.clamp(0.8, 1.2) * adv[r]);
            }
            total / 3.0
        };
        assert!((out.total - ppo(&p, &mut cache)).abs() < 1e-12);
        for i in 0..p.len() {
            let mut hi = p.clone();
            hi[i] += 1e-6;
            let mut lo = p.clone();
            lo[i] -= 1e-6;
            let fd = (ppo(&hi, &mut cache) - ppo(&lo, &mut cache)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "param {i}");
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let env = WallEnv::new(WallConfig::default()).unwrap();
        for (form, mode) in [
            (Formulation::HarmC, ClipMode::Combined),
            (Formulation::Cc, ClipMode::RewardOnly),
        ] {
            let model = Model::new(small_cfg(form).model_spec(env.obs_dim(), 1)).unwrap();
            let p = model.init(&mut rng::stream(9, Stream::Learner, 0));
            let obs = [0.1, 0.2, -0.4, 0.3, 0.9, -0.1, 0.5, 0.5];
            let actions = [0.3, -0.2, 1.0, 0.0];
            let old = [-0.5, -1.5, -0.9, -0.7];
            let adv = [1.0, -2.0, 0.5, 0.1];
            let cadv = [3.0, 1.0, -1.0, 0.2];
            let targets: Vec<f64> = (0..16).map(|i| (i % 5) as f64 * 0.2).collect();
            let lb = LossBatch {
                obs: &obs,
                actions: &actions,
                old_log_probs: &old,
                reward_adv: &adv,
                constraint_adv: &cadv,
                targets: &targets,
                head_weights: [1.0, 1.0, 1.0, 1.0],
            };
            let lp = LossParams {
                clip: 0.2,
                entropy_coef: 0.01,
                value_coef: 0.5,
                clip_mode: mode,
                w: 0.7,
            };
            let mut cache = ModelCache::default();
            let mut g = vec![0.0; model.n_params];
            loss_and_grad(&model, &p, &lb, &lp, &mut g, &mut cache);
            let mut scratch = vec![0.0; model.n_params];
            let mut f = |q: &[f64]| loss_and_grad(&model, q, &lb, &lp, &mut scratch, &mut cache).total;
            for i in 0..p.len() {
                let mut hi = p.clone();
                hi[i] += 1e-6;
                let mut lo = p.clone();
                lo[i] -= 1e-6;
                let fd = (f(&hi) - f(&lo)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-6, "{form} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn identity_intervention_has_zero_harm() {
        let env = WallEnv::new(WallConfig::default()).unwrap();
        let cfg = TrainConfig {
            n_envs: 6,
            steps_per_update: 30,
            ..small_cfg(Formulation::Harm)
        };
        let model = Model::new(cfg.model_spec(env.obs_dim(), 1)).unwrap();
        let p = model.init(&mut rng::stream(2, Stream::Learner, 0));
        let mut venv = VecEnv::new(env, cfg.n_envs, InitRegime::Wide, 4).unwrap();
        let mut cache = ModelCache::default();
        for _ in 0..3 {
            let batch = venv.rollout(&mut crate::scm::DefaultPolicy, cfg.steps_per_update).unwrap();
            assert!(batch.done.iter().any(|&d| d));
            let values = model.critic_values(&p, &batch.obs, batch.len(), &mut cache);
            let last = model.critic_values(&p, &batch.last_obs, batch.n_envs, &mut cache);
            let t = batch_targets(venv.env(), &batch, &values, &last, &model, &p, &cfg, &mut cache).unwrap();
            assert!(t.harm.iter().all(|&h| h == 0.0));
        }
    }

    fn env_obs(env: &WallEnv) -> usize {
        env.obs_dim()
    }
}
