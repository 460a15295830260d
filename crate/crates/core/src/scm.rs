//! Structural-causal-model environments.
//!
//! An environment is a deterministic transition `f(s, a, ξ)` plus a sampler
//! for the exogenous draws `ξ`. Stepping records the draws in a
//! [`NoiseRecord`] so any transition can be replayed bit-exactly, under the
//! original action or under an intervention.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, SimRng, Stream};

/// Initial-state distribution selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitRegime {
    /// Heuristic subset of the viability kernel, at rest.
    Feasible,
    /// States in and out of the default viability kernel.
    Wide,
}

/// Physical state of an environment, flattenable for digests and logging.
pub trait PhysicalState: Clone + PartialEq + Debug {
    fn components(&self) -> Vec<f64>;
}

/// A structural causal model with a hand-designed default policy.
///
/// `transition`, `observe`, `reward` and `constraint` must be pure functions
/// of their arguments; all randomness enters through the noise slice, whose
/// layout is documented by each implementation.
pub trait Environment {
    type State: PhysicalState;

    fn name(&self) -> &'static str;
    fn action_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Number of raw exogenous draws per transition.
    fn noise_dim(&self) -> usize;
    /// Episode length in steps.
    fn horizon(&self) -> u32;

    /// Draw one transition's worth of raw (unscaled) exogenous variables.
    fn sample_noise(&self, rng: &mut SimRng, out: &mut [f64]);
    /// Deterministic dynamics. Actions are clamped here, not by callers.
    fn transition(&self, s: &Self::State, action: &[f64], noise: &[f64]) -> Self::State;
    /// Noisy observation of `s` using the observation part of `noise`.
    fn observe(&self, s: &Self::State, noise: &[f64], out: &mut [f64]);
    fn reward(&self, s: &Self::State, action: &[f64], next: &Self::State) -> f64;
    /// Raw constraint; the 0-sublevel set is safe.
    fn constraint(&self, s: &Self::State) -> f64;
    fn is_goal(&self, s: &Self::State) -> bool;
    /// The default policy μ.
    fn default_action(&self, s: &Self::State, out: &mut [f64]);
    fn sample_initial(&self, regime: InitRegime, rng: &mut SimRng) -> Result<Self::State>;
}

/// Raw exogenous draws consumed by one transition, in the environment's
/// documented order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord(pub Vec<f64>);

impl NoiseRecord {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Physical state plus episode bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState<S> {
    pub phys: S,
    pub step: u32,
    pub done: bool,
}

impl<S> EnvState<S> {
    pub fn new(phys: S) -> Self {
        Self {
            phys,
            step: 0,
            done: false,
        }
    }
}

/// Result of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub next: EnvState<S>,
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Constraint value at the next state.
    pub g: f64,
}

/// Apply `f(s, a, ξ)` with a recorded `ξ`.
pub fn replay_step<E: Environment>(
    env: &E,
    state: &EnvState<E::State>,
    action: &[f64],
    noise: &[f64],
) -> Result<Step<E::State>> {
    if state.done {
        return Err(Error::SteppedDoneState);
    }
    check_len("action", env.action_dim(), action.len())?;
    check_len("noise record", env.noise_dim(), noise.len())?;
    let phys = env.transition(&state.phys, action, noise);
    let step = state.step + 1;
    let done = step >= env.horizon() || env.is_goal(&phys);
    let mut obs = vec![0.0; env.obs_dim()];
    env.observe(&phys, noise, &mut obs);
    let reward = env.reward(&state.phys, action, &phys);
    let g = env.constraint(&phys);
    Ok(Step {
        next: EnvState { phys, step, done },
        obs,
        reward,
        g,
    })
}

/// Step with fresh exogenous draws from `rng`, returning them for replay.
pub fn step_recorded<E: Environment>(
    env: &E,
    state: &EnvState<E::State>,
    action: &[f64],
    rng: &mut SimRng,
) -> Result<(Step<E::State>, NoiseRecord)> {
    if state.done {
        return Err(Error::SteppedDoneState);
    }
    let mut noise = NoiseRecord::zeros(env.noise_dim());
    env.sample_noise(rng, &mut noise.0);
    let step = replay_step(env, state, action, &noise.0)?;
    Ok((step, noise))
}

/// Sample an initial state and its observation.
pub fn reset<E: Environment>(
    env: &E,
    regime: InitRegime,
    init_rng: &mut SimRng,
    noise_rng: &mut SimRng,
) -> Result<(EnvState<E::State>, Vec<f64>)> {
    let phys = env.sample_initial(regime, init_rng)?;
    let mut noise = vec![0.0; env.noise_dim()];
    env.sample_noise(noise_rng, &mut noise);
    let mut obs = vec![0.0; env.obs_dim()];
    env.observe(&phys, &noise, &mut obs);
    Ok((EnvState::new(phys), obs))
}

/// Anything that maps a state/observation to an action.
///
/// Learned policies read `obs`; hand-designed ones read `state`. The return
/// value is the log-density of the chosen action (0 for deterministic
/// policies).
pub trait Policy<E: Environment> {
    fn act(
        &mut self,
        env: &E,
        state: &E::State,
        obs: &[f64],
        rng: &mut SimRng,
        action: &mut [f64],
    ) -> f64;
}

impl<E: Environment, P: Policy<E> + ?Sized> Policy<E> for &mut P {
    fn act(&mut self, env: &E, state: &E::State, obs: &[f64], rng: &mut SimRng, action: &mut [f64]) -> f64 {
        (**self).act(env, state, obs, rng, action)
    }
}

/// The environment's default policy μ.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultPolicy;

impl<E: Environment> Policy<E> for DefaultPolicy {
    fn act(&mut self, env: &E, state: &E::State, _: &[f64], _: &mut SimRng, a: &mut [f64]) -> f64 {
        env.default_action(state, a);
        0.0
    }
}

/// Always emits the same action.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy(pub Vec<f64>);

impl<E: Environment> Policy<E> for ConstantPolicy {
    fn act(&mut self, _: &E, _: &E::State, _: &[f64], _: &mut SimRng, a: &mut [f64]) -> f64 {
        a.copy_from_slice(&self.0);
        0.0
    }
}

/// Summary of an episode that finished inside a rollout window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub env: usize,
    pub length: u32,
    pub total_reward: f64,
    /// Largest constraint value over every visited state, initial included.
    pub max_g: f64,
    pub success: bool,
}

impl EpisodeSummary {
    pub fn violated(&self) -> bool {
        self.max_g > 0.0
    }
}

/// Rollout storage, environment-major: entry `(e, t)` lives at `e * n_steps + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch<S> {
    pub n_envs: usize,
    pub n_steps: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub noise_dim: usize,
    /// States the actions were taken in.
    pub states: Vec<EnvState<S>>,
    /// Successor states; terminal states keep `done = true`.
    pub next_states: Vec<EnvState<S>>,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// `g(s_t)` for the stored state.
    pub g: Vec<f64>,
    /// `g(s_{t+1})`.
    pub next_g: Vec<f64>,
    pub noise: Vec<f64>,
    /// Episode ended with this transition (the environment was then reset).
    pub done: Vec<bool>,
    /// Observation of each environment's state after the window.
    pub last_obs: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

impl<S> TrajectoryBatch<S> {
    pub fn len(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, env: usize, t: usize) -> usize {
        env * self.n_steps + t
    }

    pub fn obs_at(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_at(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn noise_at(&self, i: usize) -> &[f64] {
        &self.noise[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    pub fn last_obs_at(&self, env: usize) -> &[f64] {
        &self.last_obs[env * self.obs_dim..(env + 1) * self.obs_dim]
    }
}

impl<S: PhysicalState> TrajectoryBatch<S> {
    /// Digest over the bit patterns of every stored quantity.
    pub fn bit_digest(&self) -> u64 {
        let mut flat = Vec::new();
        for (s, n) in self.states.iter().zip(&self.next_states) {
            flat.extend(s.phys.components());
            flat.push(f64::from(s.step));
            flat.extend(n.phys.components());
            flat.push(f64::from(n.step));
            flat.push(if n.done { 1.0 } else { 0.0 });
        }
        for v in [
            &self.obs,
            &self.actions,
            &self.log_probs,
            &self.rewards,
            &self.g,
            &self.next_g,
            &self.noise,
            &self.last_obs,
        ] {
            flat.extend_from_slice(v);
        }
        flat.extend(self.done.iter().map(|&d| if d { 1.0 } else { 0.0 }));
        rng::digest(&flat)
    }
}

/// E parallel copies of one environment with per-copy random streams.
pub struct VecEnv<E: Environment> {
    env: E,
    regime: InitRegime,
    states: Vec<EnvState<E::State>>,
    obs: Vec<f64>,
    noise_rngs: Vec<SimRng>,
    action_rngs: Vec<SimRng>,
    init_rngs: Vec<SimRng>,
    ep_reward: Vec<f64>,
    ep_max_g: Vec<f64>,
}

impl<E: Environment> VecEnv<E> {
    pub fn new(env: E, n_envs: usize, regime: InitRegime, seed: u64) -> Result<Self> {
        if n_envs == 0 {
            return Err(Error::Config("at least one environment is required".into()));
        }
        let obs_dim = env.obs_dim();
        let mut out = Self {
            regime,
            states: Vec::with_capacity(n_envs),
            obs: vec![0.0; n_envs * obs_dim],
            noise_rngs: (0..n_envs as u64)
                .map(|e| rng::stream(seed, Stream::Exogenous, e))
                .collect(),
            action_rngs: (0..n_envs as u64)
                .map(|e| rng::stream(seed, Stream::Action, e))
                .collect(),
            init_rngs: (0..n_envs as u64)
                .map(|e| rng::stream(seed, Stream::Init, e))
                .collect(),
            ep_reward: vec![0.0; n_envs],
            ep_max_g: vec![0.0; n_envs],
            env,
        };
        for e in 0..n_envs {
            let (s, o) = reset(
                &out.env,
                regime,
                &mut out.init_rngs[e],
                &mut out.noise_rngs[e],
            )?;
            out.ep_max_g[e] = out.env.constraint(&s.phys);
            out.obs[e * obs_dim..(e + 1) * obs_dim].copy_from_slice(&o);
            out.states.push(s);
        }
        Ok(out)
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn n_envs(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[EnvState<E::State>] {
        &self.states
    }

    /// Collect `steps` transitions from every environment. Episodes that end
    /// are recorded in `episodes` and their environment is reset.
    pub fn rollout<P: Policy<E>>(
        &mut self,
        policy: &mut P,
        steps: usize,
    ) -> Result<TrajectoryBatch<E::State>> {
        if steps == 0 {
            return Err(Error::Config("rollout needs at least one step".into()));
        }
        let n_envs = self.n_envs();
        let (od, ad, nd) = (
            self.env.obs_dim(),
            self.env.action_dim(),
            self.env.noise_dim(),
        );
        let n = n_envs * steps;
        let mut b = TrajectoryBatch {
            n_envs,
            n_steps: steps,
            obs_dim: od,
            action_dim: ad,
            noise_dim: nd,
            states: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n),
            obs: vec![0.0; n * od],
            actions: vec![0.0; n * ad],
            log_probs: vec![0.0; n],
            rewards: vec![0.0; n],
            g: vec![0.0; n],
            next_g: vec![0.0; n],
            noise: vec![0.0; n * nd],
            done: vec![false; n],
            last_obs: vec![0.0; n_envs * od],
            episodes: Vec::new(),
        };
        for e in 0..n_envs {
            for t in 0..steps {
                let i = e * steps + t;
                let state = self.states[e].clone();
                let obs = &self.obs[e * od..(e + 1) * od];
                b.obs[i * od..(i + 1) * od].copy_from_slice(obs);
                let action = &mut b.actions[i * ad..(i + 1) * ad];
                b.log_probs[i] =
                    policy.act(&self.env, &state.phys, obs, &mut self.action_rngs[e], action);
                b.g[i] = self.env.constraint(&state.phys);
                let (step, noise) =
                    step_recorded(&self.env, &state, action, &mut self.noise_rngs[e])?;
                b.noise[i * nd..(i + 1) * nd].copy_from_slice(&noise.0);
                b.rewards[i] = step.reward;
                b.next_g[i] = step.g;
                b.done[i] = step.next.done;
                self.ep_reward[e] += step.reward;
                self.ep_max_g[e] = self.ep_max_g[e].max(step.g);
                b.states.push(state);
                if step.next.done {
                    b.episodes.push(EpisodeSummary {
                        env: e,
                        length: step.next.step,
                        total_reward: self.ep_reward[e],
                        max_g: self.ep_max_g[e],
                        success: self.env.is_goal(&step.next.phys),
                    });
                    b.next_states.push(step.next);
                    let (s, o) = reset(
                        &self.env,
                        self.regime,
                        &mut self.init_rngs[e],
                        &mut self.noise_rngs[e],
                    )?;
                    self.ep_reward[e] = 0.0;
                    self.ep_max_g[e] = self.env.constraint(&s.phys);
                    self.states[e] = s;
                    self.obs[e * od..(e + 1) * od].copy_from_slice(&o);
                } else {
                    b.next_states.push(step.next.clone());
                    self.states[e] = step.next;
                    self.obs[e * od..(e + 1) * od].copy_from_slice(&step.obs);
                }
            }
            b.last_obs[e * od..(e + 1) * od].copy_from_slice(&self.obs[e * od..(e + 1) * od]);
        }
        Ok(b)
    }
}

/// Rebuild a batch from its episode starts, actions and noise records alone.
///
/// Successor states, observations, rewards and constraint values are
/// recomputed through [`replay_step`]; episode-start states and
/// observations, actions, log-probabilities and episode summaries are
/// copied.
pub fn replay_batch<E: Environment>(
    env: &E,
    batch: &TrajectoryBatch<E::State>,
) -> Result<TrajectoryBatch<E::State>> {
    let (m, od) = (batch.n_steps, batch.obs_dim);
    let mut out = TrajectoryBatch {
        states: Vec::with_capacity(batch.len()),
        next_states: Vec::with_capacity(batch.len()),
        obs: vec![0.0; batch.obs.len()],
        rewards: vec![0.0; batch.len()],
        g: vec![0.0; batch.len()],
        next_g: vec![0.0; batch.len()],
        done: vec![false; batch.len()],
        last_obs: vec![0.0; batch.last_obs.len()],
        ..batch.clone()
    };
    for e in 0..batch.n_envs {
        let mut carry: Option<(EnvState<E::State>, Vec<f64>)> = None;
        for t in 0..m {
            let i = batch.idx(e, t);
            let (state, obs) = match carry.take() {
                Some(c) => c,
                None => (batch.states[i].clone(), batch.obs_at(i).to_vec()),
            };
            out.obs[i * od..(i + 1) * od].copy_from_slice(&obs);
            out.g[i] = env.constraint(&state.phys);
            let step = replay_step(env, &state, batch.action_at(i), batch.noise_at(i))?;
            out.rewards[i] = step.reward;
            out.next_g[i] = step.g;
            out.done[i] = step.next.done;
            out.states.push(state);
            if !step.next.done {
                carry = Some((step.next.clone(), step.obs.clone()));
            }
            out.next_states.push(step.next);
            if t + 1 == m {
                let last = match &carry {
                    Some((_, o)) => o.as_slice(),
                    None => batch.last_obs_at(e),
                };
                out.last_obs[e * od..(e + 1) * od].copy_from_slice(last);
            }
        }
    }
    Ok(out)
}
