//! N-step counterfactual inference of the default policy's outcome, harm and
//! CCATE targets, and the registry of constraint formulations.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{tail_max, tdl_max, EstimatorConfig};
use crate::nn::HeadKind;
use crate::rng::{self, Stream};
use crate::scm::{replay_step, reset, EnvState, Environment, InitRegime};

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Monotone map applied to a constraint signal, with `f(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `1{x > 0}`.
    Indicator,
    /// `min(ReLU(x), cap)`.
    Clip(f64),
}

impl Transform {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Indicator => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Transform::Clip(cap) => relu(x).min(cap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Cumulative,
    Max,
}

/// Which per-state quantity the Lagrangian constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    /// The (transformed) constraint value `g`.
    Constraint,
    /// The CCATE target.
    Ccate,
    /// The counterfactual harm return.
    Harm,
}

/// The ten constraint formulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Formulation {
    Dbs,
    Ic,
    Mc0,
    Cc0,
    Mc,
    Cc,
    Ccate,
    CcateC,
    Harm,
    HarmC,
}

/// Cap of the clipped cumulative formulation.
pub const IC_CAP: f64 = 1.0;

impl Formulation {
    pub const ALL: [Formulation; 10] = [
        Formulation::Dbs,
        Formulation::Ic,
        Formulation::Mc0,
        Formulation::Cc0,
        Formulation::Mc,
        Formulation::Cc,
        Formulation::Ccate,
        Formulation::CcateC,
        Formulation::Harm,
        Formulation::HarmC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Formulation::Dbs => "DBS",
            Formulation::Ic => "IC",
            Formulation::Mc0 => "MC_0",
            Formulation::Cc0 => "CC_0",
            Formulation::Mc => "MC",
            Formulation::Cc => "CC",
            Formulation::Ccate => "CCATE",
            Formulation::CcateC => "CCATE_C",
            Formulation::Harm => "HARM",
            Formulation::HarmC => "HARM_C",
        }
    }

    /// Initial-state regime the formulation is trained under.
    pub fn init_regime(self) -> InitRegime {
        match self {
            Formulation::Dbs | Formulation::Ic | Formulation::Mc0 | Formulation::Cc0 => {
                InitRegime::Feasible
            }
            _ => InitRegime::Wide,
        }
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            Formulation::Dbs | Formulation::Ic => Aggregation::Cumulative,
            _ => Aggregation::Max,
        }
    }

    pub fn transform(self) -> Transform {
        match self {
            Formulation::Dbs
            | Formulation::Cc0
            | Formulation::Cc
            | Formulation::CcateC
            | Formulation::HarmC => Transform::Indicator,
            Formulation::Ic => Transform::Clip(IC_CAP),
            _ => Transform::Identity,
        }
    }

    pub fn signal(self) -> Signal {
        match self {
            Formulation::Ccate | Formulation::CcateC => Signal::Ccate,
            Formulation::Harm | Formulation::HarmC => Signal::Harm,
            _ => Signal::Constraint,
        }
    }

    /// Transform applied to the raw constraint before the learner estimate.
    pub fn constraint_transform(self) -> Transform {
        match self.signal() {
            Signal::Constraint => self.transform(),
            _ => Transform::Identity,
        }
    }

    /// Transform applied to CCATE or harm targets.
    pub fn target_transform(self) -> Transform {
        match self.signal() {
            Signal::Constraint => Transform::Identity,
            _ => self.transform(),
        }
    }

    pub fn needs_counterfactual(self) -> bool {
        self.signal() != Signal::Constraint
    }

    /// Whether the threshold is the default policy's expected outcome.
    pub fn default_threshold(self) -> bool {
        matches!(self, Formulation::Mc | Formulation::Cc)
    }

    /// Output heads of the four critics (`V_r`, `V_g^π`, `V_g^μ`, `V_H`).
    pub fn heads(self) -> [HeadKind; 4] {
        let gpi = if matches!(self, Formulation::Cc0 | Formulation::Cc) {
            HeadKind::Sigmoid
        } else {
            HeadKind::Linear
        };
        let h = if matches!(self, Formulation::CcateC | Formulation::HarmC) {
            HeadKind::Sigmoid
        } else {
            HeadKind::Linear
        };
        [HeadKind::Linear, gpi, HeadKind::Linear, h]
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        Formulation::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::UnknownFormulation(s.to_string()))
    }
}

impl TryFrom<String> for Formulation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Formulation> for String {
    fn from(f: Formulation) -> String {
        f.name().to_string()
    }
}

/// Per-state counterfactual harm `ReLU(V̂π − ReLU(V̂μ))`.
#[inline]
pub fn harm(v_pi: f64, v_mu: f64) -> f64 {
    relu(v_pi - relu(v_mu))
}

/// Per-state CCATE `V̂π − ReLU(V_μ)`.
#[inline]
pub fn ccate(v_pi: f64, v_mu: f64) -> f64 {
    v_pi - relu(v_mu)
}

pub fn harm_targets(v_pi: &[f64], v_mu: &[f64]) -> Result<Vec<f64>> {
    if v_pi.len() != v_mu.len() {
        return Err(Error::LengthMismatch("learner and default outcomes"));
    }
    Ok(v_pi.iter().zip(v_mu).map(|(&p, &m)| harm(p, m)).collect())
}

pub fn ccate_targets(v_pi: &[f64], v_mu: &[f64]) -> Result<Vec<f64>> {
    if v_pi.len() != v_mu.len() {
        return Err(Error::LengthMismatch("learner estimates and default critic values"));
    }
    Ok(v_pi.iter().zip(v_mu).map(|(&p, &m)| ccate(p, m)).collect())
}

/// A short path: `g[τ]` at `s̃_τ` for `τ = 0..=n`, observations of
/// `s̃_1..s̃_n`, and whether `s̃_n` ends its episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<S> {
    pub states: Vec<EnvState<S>>,
    pub g: Vec<f64>,
    pub obs: Vec<f64>,
    pub terminal: bool,
}

impl<S> Branch<S> {
    pub fn len(&self) -> usize {
        self.g.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Roll the default policy forward `n` steps from `start`, replaying the
/// recorded exogenous draws `noise` (`n × noise_dim`, step-major). Stops
/// early if the branch's own episode ends.
pub fn default_branch<E: Environment>(
    env: &E,
    start: &EnvState<E::State>,
    noise: &[f64],
    n: usize,
) -> Result<Branch<E::State>> {
    let nd = env.noise_dim();
    if noise.len() < n * nd {
        return Err(Error::MissingNoise {
            needed: n,
            have: noise.len() / nd.max(1),
        });
    }
    let mut action = vec![0.0; env.action_dim()];
    let mut states = Vec::with_capacity(n + 1);
    let mut g = Vec::with_capacity(n + 1);
    let mut obs = Vec::with_capacity(n * env.obs_dim());
    g.push(env.constraint(&start.phys));
    states.push(start.clone());
    let mut terminal = start.done;
    for k in 0..n {
        if terminal {
            break;
        }
        let s = &states[states.len() - 1];
        env.default_action(&s.phys, &mut action);
        let step = replay_step(env, s, &action, &noise[k * nd..(k + 1) * nd])?;
        g.push(step.g);
        obs.extend_from_slice(&step.obs);
        terminal = step.next.done;
        states.push(step.next);
    }
    Ok(Branch {
        states,
        g,
        obs,
        terminal,
    })
}

/// TD(λ)-max estimate at the start of a path of length `n ≥ 1`.
///
/// `g` holds `n + 1` constraint values, `values` the critic at `s̃_1..s̃_n`.
/// A terminal end state is valued at its own constraint, otherwise at the
/// critic.
pub fn path_estimate(g: &[f64], values: &[f64], terminal: bool, cfg: &EstimatorConfig) -> Result<f64> {
    let n = values.len();
    if n == 0 || g.len() != n + 1 {
        return Err(Error::LengthMismatch("path constraint values and critic values"));
    }
    let mut boot = values.to_vec();
    let seed = if terminal { g[n] } else { values[n - 1] };
    boot[n - 1] = seed;
    Ok(tdl_max(&g[..n], &boot, seed, cfg)?[0])
}

/// Algorithm of N-step counterfactual inference for one state: replay the
/// recorded draws under the default policy and estimate its discounted
/// worst-case outcome, bootstrapped with `value(state, obs)`.
pub fn counterfactual_inference<E, V>(
    env: &E,
    start: &EnvState<E::State>,
    noise: &[f64],
    n: usize,
    mut value: V,
    cfg: &EstimatorConfig,
) -> Result<f64>
where
    E: Environment,
    V: FnMut(&EnvState<E::State>, &[f64]) -> f64,
{
    if n == 0 {
        return Err(Error::Config("counterfactual window must be at least one step".into()));
    }
    let branch = default_branch(env, start, noise, n)?;
    if branch.is_empty() {
        return Ok(branch.g[0]);
    }
    let od = env.obs_dim();
    let values: Vec<f64> = (0..branch.len())
        .map(|k| value(&branch.states[k + 1], &branch.obs[k * od..(k + 1) * od]))
        .collect();
    path_estimate(&branch.g, &values, branch.terminal, cfg)
}

/// Monte-Carlo estimate of the default policy's expected clipped worst
/// outcome from the initial distribution, `E[ReLU(max_t γ^t f(g(s_t)))]`,
/// with fresh (marginal) noise.
pub fn estimate_default_threshold<E: Environment>(
    env: &E,
    regime: InitRegime,
    transform: Transform,
    gamma: f64,
    n_rollouts: usize,
    seed: u64,
) -> Result<f64> {
    if n_rollouts == 0 {
        return Err(Error::Empty("default-threshold rollouts"));
    }
    let mut total = 0.0;
    let mut action = vec![0.0; env.action_dim()];
    let mut noise = vec![0.0; env.noise_dim()];
    for k in 0..n_rollouts as u64 {
        let mut init = rng::stream(seed, Stream::Init, k);
        let mut exo = rng::stream(seed, Stream::MonteCarlo, k);
        let (mut s, _) = reset(env, regime, &mut init, &mut exo)?;
        let mut g = vec![transform.apply(env.constraint(&s.phys))];
        while !s.done {
            env.default_action(&s.phys, &mut action);
            env.sample_noise(&mut exo, &mut noise);
            let step = replay_step(env, &s, &action, &noise)?;
            g.push(transform.apply(step.g));
            s = step.next;
        }
        total += relu(tail_max(&g, gamma)[0]);
    }
    Ok(total / n_rollouts as f64)
}

/// Mean of clipped outcomes; the threshold given precomputed rollouts.
pub fn mean_clipped(outcomes: &[f64]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("outcomes"));
    }
    Ok(outcomes.iter().map(|&v| relu(v)).sum::<f64>() / outcomes.len() as f64)
}
