//! Counterfactual shields for deployment: a Monte-Carlo harm discriminator,
//! an explicit shield that falls back to μ, and a sampling-based implicit
//! shield that searches for the smallest harmless correction.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, sin, sqrt};
use serde::{Deserialize, Serialize};

use crate::counterfactual::{default_branch, harm, path_estimate};
use crate::error::{Error, Result};
use crate::estimators::{tail_max, EstimatorConfig};
use crate::eval::default_outcome;
use crate::nn::{HeadKind, Model, ModelCache, V_G_MU, V_G_PI};
use crate::rng::{self, Stream};
use crate::scm::{replay_step, EnvState, Environment, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShieldMode {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShieldConfig {
    pub mode: ShieldMode,
    /// Monte-Carlo samples per discriminator call.
    pub samples: usize,
    /// Branch length: the proposed action, then the learner for `steps − 1`.
    pub steps: usize,
    /// Harm above this is rejected.
    pub threshold: f64,
    /// Implicit shield: perturbation radii, in action units.
    pub radii: Vec<f64>,
    /// Implicit shield: directions per ring for 2-D actions.
    pub directions: usize,
    pub estimator: EstimatorConfig,
    pub seed: u64,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            mode: ShieldMode::Explicit,
            samples: 32,
            steps: 5,
            threshold: 0.0,
            radii: vec![0.25, 0.5, 1.0, 2.0],
            directions: 8,
            estimator: EstimatorConfig::default(),
            seed: 0,
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if self.samples == 0 || self.steps == 0 {
            return Err(Error::Config("shield samples and steps must be positive".into()));
        }
        if self.directions == 0 || self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("shield radii and directions must be positive".into()));
        }
        Ok(())
    }
}

/// Bootstrap values at the ends of shield branches.
pub trait BranchValues<E: Environment> {
    /// Learner's constraint value at a branch state.
    fn learner(&mut self, env: &E, s: &EnvState<E::State>, obs: &[f64]) -> f64;
    /// Default policy's constraint value at a branch state.
    fn default(&mut self, env: &E, s: &EnvState<E::State>, obs: &[f64]) -> f64;
}

/// Both sides valued by a noise-free default rollout to the episode end,
/// i.e. "fall back to μ after the branch".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutValues {
    pub gamma: f64,
}

impl RolloutValues {
    fn value<E: Environment>(&self, env: &E, s: &EnvState<E::State>) -> f64 {
        let remaining = env.horizon().saturating_sub(s.step) as usize;
        let zeros = vec![0.0; remaining.max(1) * env.noise_dim()];
        match default_outcome(env, s, &zeros) {
            Ok(g) => tail_max(&g, self.gamma)[0],
            Err(_) => env.constraint(&s.phys),
        }
    }
}

impl<E: Environment> BranchValues<E> for RolloutValues {
    fn learner(&mut self, env: &E, s: &EnvState<E::State>, _: &[f64]) -> f64 {
        self.value(env, s)
    }

    fn default(&mut self, env: &E, s: &EnvState<E::State>, _: &[f64]) -> f64 {
        self.value(env, s)
    }
}

/// The trained `V_g^π` and `V_g^μ` critics.
pub struct CriticValues<'a> {
    pub model: &'a Model,
    pub params: &'a [f64],
    pub cache: ModelCache,
}

impl CriticValues<'_> {
    fn head(&mut self, obs: &[f64], k: usize) -> f64 {
        let raw = self.model.critic_values(self.params, obs, 1, &mut self.cache)[k];
        match self.model.spec.heads[k] {
            HeadKind::Linear => raw,
            kind => kind.value(raw),
        }
    }
}

impl<E: Environment> BranchValues<E> for CriticValues<'_> {
    fn learner(&mut self, _: &E, _: &EnvState<E::State>, obs: &[f64]) -> f64 {
        self.head(obs, V_G_PI)
    }

    fn default(&mut self, _: &E, _: &EnvState<E::State>, obs: &[f64]) -> f64 {
        self.head(obs, V_G_MU)
    }
}

/// Monte-Carlo estimate of the expected harm of proposing `action` in `s`.
/// Sample `j` draws its noise from a stream keyed by `(s.step, j)`, so all
/// candidates at one decision share realizations.
pub fn harm_discriminator<E: Environment, V: BranchValues<E>>(
    env: &E,
    s: &EnvState<E::State>,
    action: &[f64],
    policy: &mut dyn Policy<E>,
    values: &mut V,
    cfg: &ShieldConfig,
) -> Result<f64> {
    if s.done {
        return Err(Error::SteppedDoneState);
    }
    let (nd, od, ad) = (env.noise_dim(), env.obs_dim(), env.action_dim());
    let n = cfg.steps;
    let mut noise = vec![0.0; n * nd];
    let mut a = vec![0.0; ad];
    let mut total = 0.0;
    for j in 0..cfg.samples as u64 {
        let index = u64::from(s.step) * cfg.samples as u64 + j;
        let mut exo = rng::stream(cfg.seed, Stream::MonteCarlo, index);
        for r in noise.chunks_exact_mut(nd.max(1)) {
            env.sample_noise(&mut exo, r);
        }
        let mut arng = rng::stream(cfg.seed, Stream::Action, index);
        // Learner branch.
        let mut g = vec![env.constraint(&s.phys)];
        let mut vals = Vec::with_capacity(n);
        let mut state = s.clone();
        a.copy_from_slice(action);
        for k in 0..n {
            let step = replay_step(env, &state, &a, &noise[k * nd..(k + 1) * nd])?;
            g.push(step.g);
            vals.push(values.learner(env, &step.next, &step.obs));
            state = step.next;
            if state.done {
                break;
            }
            if k + 1 < n {
                policy.act(env, &state.phys, &step.obs, &mut arng, &mut a);
            }
        }
        let v_pi = path_estimate(&g, &vals, state.done, &cfg.estimator)?;
        // Default branch over the same draws.
        let br = default_branch(env, s, &noise, n)?;
        let v_mu = if br.is_empty() {
            br.g[0]
        } else {
            let dv: Vec<f64> = (0..br.len())
                .map(|k| values.default(env, &br.states[k + 1], &br.obs[k * od..(k + 1) * od]))
                .collect();
            path_estimate(&br.g, &dv, br.terminal, &cfg.estimator)?
        };
        total += harm(v_pi, v_mu);
    }
    Ok(total / cfg.samples as f64)
}

/// `μ(s)` if the discriminator exceeds the threshold, else the proposal.
pub fn explicit_shield<E: Environment>(env: &E, s: &E::State, proposed: &[f64], d: f64, threshold: f64, out: &mut [f64]) -> bool {
    if d > threshold {
        env.default_action(s, out);
        true
    } else {
        out.copy_from_slice(proposed);
        false
    }
}

/// Perturbations tried by the implicit shield, sorted by norm: zero, then
/// rings of `directions` unit vectors (2-D) or signed axes (otherwise).
pub fn candidate_offsets(action_dim: usize, radii: &[f64], directions: usize) -> Vec<Vec<f64>> {
    let mut units: Vec<Vec<f64>> = Vec::new();
    if action_dim == 2 {
        for k in 0..directions {
            let th = 2.0 * PI * k as f64 / directions as f64;
            units.push(vec![cos(th), sin(th)]);
        }
    } else {
        for i in 0..action_dim {
            for sign in [1.0, -1.0] {
                let mut u = vec![0.0; action_dim];
                u[i] = sign;
                units.push(u);
            }
        }
    }
    let mut r: Vec<f64> = radii.to_vec();
    r.sort_by(f64::total_cmp);
    let mut out = vec![vec![0.0; action_dim]];
    for radius in r {
        for u in &units {
            out.push(u.iter().map(|x| x * radius).collect());
        }
    }
    out
}

pub fn norm(x: &[f64]) -> f64 {
    sqrt(x.iter().map(|v| v * v).sum())
}

/// Outcome of one implicit-shield decision, with every evaluated candidate
/// for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitDecision {
    pub action: Vec<f64>,
    pub d: f64,
    pub proposed_d: f64,
    /// No candidate met the threshold; `action` minimizes the discriminator.
    pub infeasible: bool,
    /// `(offset norm, discriminator)` for each candidate, in search order.
    pub audit: Vec<(f64, f64)>,
}

/// Smallest perturbation of `proposed` whose discriminator is within the
/// threshold. Evaluates every candidate when `full_audit` is set, otherwise
/// stops at the first feasible one.
pub fn implicit_shield<E: Environment, V: BranchValues<E>>(
    env: &E,
    s: &EnvState<E::State>,
    proposed: &[f64],
    policy: &mut dyn Policy<E>,
    values: &mut V,
    cfg: &ShieldConfig,
    full_audit: bool,
) -> Result<ImplicitDecision> {
    let offsets = candidate_offsets(env.action_dim(), &cfg.radii, cfg.directions);
    let mut audit = Vec::with_capacity(offsets.len());
    let mut best: Option<(usize, f64)> = None;
    let mut chosen: Option<(usize, f64)> = None;
    let mut cand = vec![0.0; proposed.len()];
    for (i, off) in offsets.iter().enumerate() {
        for j in 0..cand.len() {
            cand[j] = proposed[j] + off[j];
        }
        let d = harm_discriminator(env, s, &cand, policy, values, cfg)?;
        audit.push((norm(off), d));
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
        if chosen.is_none() && d <= cfg.threshold {
            chosen = Some((i, d));
            if !full_audit {
                break;
            }
        }
    }
    let proposed_d = audit[0].1;
    let infeasible = chosen.is_none();
    let (i, d) = chosen.or(best).ok_or(Error::Empty("shield candidates"))?;
    Ok(ImplicitDecision {
        action: proposed.iter().zip(&offsets[i]).map(|(a, o)| a + o).collect(),
        d,
        proposed_d,
        infeasible,
        audit,
    })
}

/// Counters kept by a shielded policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShieldStats {
    pub decisions: u64,
    pub interventions: u64,
    pub infeasible: u64,
}

/// Wraps a policy with a shield. Branches are built from the physical state
/// at step 0, so they ignore the remaining horizon.
pub struct ShieldedPolicy<P, V> {
    pub inner: P,
    pub values: V,
    pub cfg: ShieldConfig,
    pub stats: ShieldStats,
}

impl<P, V> ShieldedPolicy<P, V> {
    pub fn new(inner: P, values: V, cfg: ShieldConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            inner,
            values,
            cfg,
            stats: ShieldStats::default(),
        })
    }
}

impl<E: Environment, P: Policy<E>, V: BranchValues<E>> Policy<E> for ShieldedPolicy<P, V> {
    fn act(&mut self, env: &E, state: &E::State, obs: &[f64], rng: &mut rng::SimRng, action: &mut [f64]) -> f64 {
        let mut proposed = vec![0.0; action.len()];
        self.inner.act(env, state, obs, rng, &mut proposed);
        let s = EnvState::new(state.clone());
        self.stats.decisions += 1;
        let changed = match self.cfg.mode {
            ShieldMode::Explicit => {
                // Discriminator errors (none expected on a live state) fall back to μ.
                let d = harm_discriminator(env, &s, &proposed, &mut self.inner, &mut self.values, &self.cfg)
                    .unwrap_or(f64::INFINITY);
                explicit_shield(env, state, &proposed, d, self.cfg.threshold, action)
            }
            ShieldMode::Implicit => {
                match implicit_shield(env, &s, &proposed, &mut self.inner, &mut self.values, &self.cfg, false) {
                    Ok(dec) => {
                        if dec.infeasible {
                            self.stats.infeasible += 1;
                        }
                        action.copy_from_slice(&dec.action);
                        dec.action != proposed
                    }
                    Err(_) => {
                        env.default_action(state, action);
                        true
                    }
                }
            }
        };
        if changed {
            self.stats.interventions += 1;
        }
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{WallConfig, WallEnv, WallState};
    use crate::eval::{evaluate, rollout_with_plan, NoisePlan};
    use crate::scm::{ConstantPolicy, DefaultPolicy, InitRegime};

    fn wall() -> WallEnv {
        WallEnv::new(WallConfig::default()).unwrap()
    }

    fn oracle() -> RolloutValues {
        RolloutValues { gamma: 0.99 }
    }

    #[test]
    fn identity_intervention_is_harmless() {
        let env = wall();
        let cfg = ShieldConfig::default();
        let s = EnvState::new(WallState { x: 6.0, v: 2.0 });
        let mut mu = [0.0];
        env.default_action(&s.phys, &mut mu);
        let d = harm_discriminator(&env, &s, &mu, &mut DefaultPolicy, &mut oracle(), &cfg).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn discriminator_is_deterministic() {
        let env = wall();
        let cfg = ShieldConfig { samples: 1, ..Default::default() };
        let s = EnvState::new(WallState { x: 7.0, v: 2.0 });
        let f = || harm_discriminator(&env, &s, &[1.0], &mut ConstantPolicy(vec![1.0]), &mut oracle(), &cfg).unwrap();
        assert_eq!(f(), f());
    }

    #[test]
    fn throttle_into_the_wall_is_harmful_braking_is_not() {
        let env = wall();
        let cfg = ShieldConfig::default();
        // Braking from 2 m/s needs 2.1 m; 2.6 m of clearance is enough, but
        // one more step of full throttle is not.
        let s = EnvState::new(WallState { x: 7.4, v: 2.0 });
        let d_go = harm_discriminator(&env, &s, &[1.0], &mut ConstantPolicy(vec![1.0]), &mut oracle(), &cfg).unwrap();
        let d_brake = harm_discriminator(&env, &s, &[-1.0], &mut DefaultPolicy, &mut oracle(), &cfg).unwrap();
        assert!(d_go > 0.0);
        assert_eq!(d_brake, 0.0);
    }

    #[test]
    fn explicit_shield_cases() {
        let env = wall();
        let s = WallState { x: 5.0, v: 1.0 };
        let mut out = [0.0];
        assert!(!explicit_shield(&env, &s, &[0.7], 0.0, 0.0, &mut out));
        assert_eq!(out, [0.7]);
        assert!(explicit_shield(&env, &s, &[0.7], 0.3, 0.0, &mut out));
        let mut mu = [0.0];
        env.default_action(&s, &mut mu);
        assert_eq!(out, mu);
    }

    #[test]
    fn candidates_sorted_by_norm() {
        let c = candidate_offsets(2, &[1.0, 0.5], 8);
        assert_eq!(c.len(), 17);
        assert_eq!(c[0], vec![0.0, 0.0]);
        let norms: Vec<f64> = c.iter().map(|x| norm(x)).collect();
        assert!(norms.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        assert_eq!(candidate_offsets(1, &[0.5], 8).len(), 3);
    }

    #[test]
    fn implicit_shield_keeps_feasible_proposal() {
        let env = wall();
        let cfg = ShieldConfig { mode: ShieldMode::Implicit, ..Default::default() };
        let s = EnvState::new(WallState { x: 1.0, v: 0.0 });
        let dec = implicit_shield(&env, &s, &[0.2], &mut DefaultPolicy, &mut oracle(), &cfg, false).unwrap();
        assert_eq!(dec.action, vec![0.2]);
        assert!(!dec.infeasible);
        assert_eq!(dec.audit.len(), 1);
    }

    #[test]
    fn implicit_shield_infeasible_fallback() {
        let env = wall();
        let cfg = ShieldConfig {
            mode: ShieldMode::Implicit,
            threshold: -1.0,
            ..Default::default()
        };
        let s = EnvState::new(WallState { x: 7.5, v: 2.5 });
        let dec = implicit_shield(&env, &s, &[1.0], &mut ConstantPolicy(vec![1.0]), &mut oracle(), &cfg, true).unwrap();
        assert!(dec.infeasible);
        let min = dec.audit.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
        assert_eq!(dec.d, min);
    }

    #[test]
    fn implicit_shield_audit_on_reckless_episodes() {
        let env = wall();
        let cfg = ShieldConfig { mode: ShieldMode::Implicit, samples: 8, ..Default::default() };
        let mut states = 0;
        for i in 0..5 {
            let plan = NoisePlan::sample(&env, 21, i);
            let s0 = EnvState::new(env.sample_initial(InitRegime::Feasible, &mut rng::stream(21, Stream::Init, i)).unwrap());
            let ep = rollout_with_plan(&env, &s0, &plan, &mut ConstantPolicy(vec![1.0]), &mut rng::stream(0, Stream::Action, 0)).unwrap();
            for s in ep.states.iter().filter(|s| !s.done).step_by(5) {
                let s = EnvState::new(s.phys.clone());
                let dec = implicit_shield(&env, &s, &[1.0], &mut ConstantPolicy(vec![1.0]), &mut oracle(), &cfg, true).unwrap();
                assert!(dec.d <= dec.proposed_d);
                let chosen = norm(&[dec.action[0] - 1.0]);
                if !dec.infeasible {
                    for &(n, d) in &dec.audit {
                        if d <= cfg.threshold {
                            assert!(chosen <= n + 1e-15);
                        }
                    }
                }
                states += 1;
            }
        }
        assert!(states > 10);
    }

    #[test]
    fn explicit_shield_stops_a_reckless_policy() {
        let env = wall();
        let cfg = ShieldConfig { samples: 8, ..Default::default() };
        let mut shielded = ShieldedPolicy::new(ConstantPolicy(vec![1.0]), oracle(), cfg).unwrap();
        let r = evaluate(&env, &mut shielded, 40, InitRegime::Feasible, 0.99, 2).unwrap();
        assert_eq!(r.summary.learner_violation, 0.0);
        assert!(shielded.stats.interventions > 0);
        let raw = evaluate(&env, &mut ConstantPolicy(vec![1.0]), 40, InitRegime::Feasible, 0.99, 2).unwrap();
        assert!(raw.summary.learner_violation > 0.5);
    }
}
