//! Paired evaluation against the default policy: kernel membership,
//! Recall/DR/Success/P_harm and empirical CDFs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::counterfactual::relu;
use crate::error::{Error, Result};
use crate::estimators::tail_max;
use crate::rng::{self, digest, Stream};
use crate::scm::{replay_step, EnvState, Environment, InitRegime, Policy};

/// One fixed realization of exogenous noise for an evaluation episode:
/// the initial observation's record followed by one record per step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePlan {
    pub dim: usize,
    pub records: Vec<f64>,
}

impl NoisePlan {
    pub fn sample<E: Environment>(env: &E, seed: u64, index: u64) -> Self {
        let dim = env.noise_dim();
        let n = 1 + env.horizon() as usize;
        let mut records = vec![0.0; n * dim];
        let mut rng = rng::stream(seed, Stream::Exogenous, index);
        for r in records.chunks_exact_mut(dim.max(1)) {
            env.sample_noise(&mut rng, r);
        }
        Self { dim, records }
    }

    pub fn initial(&self) -> &[f64] {
        &self.records[..self.dim]
    }

    /// Record consumed by the transition out of step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        &self.records[(t + 1) * self.dim..(t + 2) * self.dim]
    }

    /// Records from step `t` onward.
    pub fn from_step(&self, t: usize) -> &[f64] {
        &self.records[(t + 1) * self.dim..]
    }

    pub fn digest(&self) -> u64 {
        digest(&self.records)
    }
}

/// A full episode under a noise plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<S> {
    /// Visited states, initial included.
    pub states: Vec<EnvState<S>>,
    /// `g` at each visited state.
    pub g: Vec<f64>,
    pub actions: Vec<f64>,
    pub total_reward: f64,
    pub goal: bool,
}

impl<S> Episode<S> {
    pub fn max_g(&self) -> f64 {
        self.g.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn safe(&self) -> bool {
        self.max_g() <= 0.0
    }
}

/// Roll `policy` from `s0` consuming the plan's records in order.
pub fn rollout_with_plan<E: Environment, P: Policy<E> + ?Sized>(
    env: &E,
    s0: &EnvState<E::State>,
    plan: &NoisePlan,
    policy: &mut P,
    action_rng: &mut rng::SimRng,
) -> Result<Episode<E::State>> {
    let mut obs = vec![0.0; env.obs_dim()];
    env.observe(&s0.phys, plan.initial(), &mut obs);
    let mut action = vec![0.0; env.action_dim()];
    let mut ep = Episode {
        states: vec![s0.clone()],
        g: vec![env.constraint(&s0.phys)],
        actions: Vec::new(),
        total_reward: 0.0,
        goal: env.is_goal(&s0.phys),
    };
    let mut s = s0.clone();
    let mut t = 0;
    while !s.done {
        policy.act(env, &s.phys, &obs, action_rng, &mut action);
        let step = replay_step(env, &s, &action, plan.step(t))?;
        ep.actions.extend_from_slice(&action);
        ep.total_reward += step.reward;
        ep.g.push(step.g);
        obs = step.obs;
        s = step.next;
        ep.goal = env.is_goal(&s.phys);
        ep.states.push(s.clone());
        t += 1;
    }
    Ok(ep)
}

/// Constraint values of the default policy from `start` to the end of its
/// episode, replaying `noise` step by step. Observations are skipped.
pub fn default_outcome<E: Environment>(
    env: &E,
    start: &EnvState<E::State>,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let nd = env.noise_dim();
    let mut action = vec![0.0; env.action_dim()];
    let mut g = vec![env.constraint(&start.phys)];
    let mut phys = start.phys.clone();
    let mut step = start.step;
    let mut done = start.done;
    let mut k = 0;
    while !done {
        if (k + 1) * nd > noise.len() {
            return Err(Error::MissingNoise {
                needed: k + 1,
                have: noise.len() / nd.max(1),
            });
        }
        env.default_action(&phys, &mut action);
        phys = env.transition(&phys, &action, &noise[k * nd..(k + 1) * nd]);
        step += 1;
        done = step >= env.horizon() || env.is_goal(&phys);
        g.push(env.constraint(&phys));
        k += 1;
    }
    Ok(g)
}

/// Whether `s0` lies in the default viability kernel under this realization.
pub fn kernel_membership<E: Environment>(
    env: &E,
    s0: &EnvState<E::State>,
    plan: &NoisePlan,
) -> Result<bool> {
    Ok(default_outcome(env, s0, plan.from_step(0))?
        .iter()
        .all(|&g| g <= 0.0))
}

/// Exact per-state harm along a learner episode, with full-horizon default
/// branches over the same realization, and the episode harm
/// `max_t γ^t h_t`.
pub fn episode_harm<E: Environment>(
    env: &E,
    episode: &Episode<E::State>,
    plan: &NoisePlan,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let v_pi = tail_max(&episode.g, gamma);
    let mut h = Vec::with_capacity(episode.states.len());
    let mut worst: f64 = 0.0;
    let mut discount = 1.0;
    for (t, s) in episode.states.iter().enumerate() {
        let branch = default_outcome(env, s, plan.from_step(t))?;
        let v_mu = tail_max(&branch, gamma)[0];
        let ht = relu(v_pi[t] - relu(v_mu));
        worst = worst.max(discount * ht);
        discount *= gamma;
        h.push(ht);
    }
    Ok((worst, h))
}

/// Per-state evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub index: u64,
    pub member: bool,
    pub learner_max_g: f64,
    pub default_max_g: f64,
    pub harm: f64,
    pub success: bool,
    pub learner_return: f64,
    pub steps: u32,
    pub noise_digest: u64,
}

impl StateRow {
    pub fn learner_safe(&self) -> bool {
        self.learner_max_g <= 0.0
    }

    pub fn default_safe(&self) -> bool {
        self.default_max_g <= 0.0
    }
}

/// Aggregates; `None` where a denominator is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_states: usize,
    pub members: usize,
    pub recall: Option<f64>,
    pub dr: f64,
    pub success: Option<f64>,
    pub p_harm: f64,
    pub learner_violation: f64,
    pub default_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViabilityReport {
    pub rows: Vec<StateRow>,
    pub summary: Summary,
}

pub fn summarize(rows: &[StateRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation states"));
    }
    let n = rows.len();
    let count = |f: &dyn Fn(&StateRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let default_safe = count(&|r| r.default_safe());
    let members = count(&|r| r.member);
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Summary {
        n_states: n,
        members,
        recall: ratio(count(&|r| r.learner_safe() && r.default_safe()), default_safe),
        dr: count(&|r| r.learner_safe() && !r.default_safe()) as f64 / n as f64,
        success: ratio(count(&|r| r.success && r.learner_safe() && r.member), members),
        p_harm: count(&|r| r.harm > 0.0) as f64 / n as f64,
        learner_violation: count(&|r| !r.learner_safe()) as f64 / n as f64,
        default_violation: (n - default_safe) as f64 / n as f64,
    })
}

/// Nearest whole percent, for rendered tables only.
pub fn percent(x: f64) -> i64 {
    libm::round(x * 100.0) as i64
}

/// Evaluate `policy` from `n_states` initial states, each paired with μ
/// under its own noise plan. State `i` uses init/exogenous/action streams
/// indexed by `i`.
pub fn evaluate<E: Environment, P: Policy<E> + ?Sized>(
    env: &E,
    policy: &mut P,
    n_states: usize,
    regime: InitRegime,
    gamma: f64,
    seed: u64,
) -> Result<ViabilityReport> {
    if n_states == 0 {
        return Err(Error::Empty("evaluation states"));
    }
    let mut rows = Vec::with_capacity(n_states);
    for i in 0..n_states as u64 {
        let mut init = rng::stream(seed, Stream::Init, i);
        let s0 = EnvState::new(env.sample_initial(regime, &mut init)?);
        let plan = NoisePlan::sample(env, seed, i);
        let default = default_outcome(env, &s0, plan.from_step(0))?;
        let default_max_g = default.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut arng = rng::stream(seed, Stream::Action, i);
        let ep = rollout_with_plan(env, &s0, &plan, policy, &mut arng)?;
        let (harm, _) = episode_harm(env, &ep, &plan, gamma)?;
        rows.push(StateRow {
            index: i,
            member: default_max_g <= 0.0,
            learner_max_g: ep.max_g(),
            default_max_g,
            harm,
            success: ep.goal,
            learner_return: ep.total_reward,
            steps: (ep.states.len() - 1) as u32,
            noise_digest: plan.digest(),
        });
    }
    let summary = summarize(&rows)?;
    Ok(ViabilityReport { rows, summary })
}

/// Empirical CDF as an exact step function over distinct values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cdf {
    pub values: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl Cdf {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("CDF values"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::OutOfRange("NaN in CDF values".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mut out = Cdf {
            values: Vec::new(),
            fractions: Vec::new(),
        };
        for (i, &x) in v.iter().enumerate() {
            if i + 1 < v.len() && v[i + 1] == x {
                continue;
            }
            out.values.push(x);
            out.fractions.push((i + 1) as f64 / n);
        }
        Ok(out)
    }

    /// Fraction of values `≤ x`.
    pub fn at(&self, x: f64) -> f64 {
        match self.values.partition_point(|&v| v <= x) {
            0 => 0.0,
            k => self.fractions[k - 1],
        }
    }
}

/// Learner harm and violation CDFs, plus μ's violation CDF from the same rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCdfs {
    pub harm: Cdf,
    pub violation: Cdf,
    pub default_violation: Cdf,
}

pub fn report_cdfs(rows: &[StateRow]) -> Result<ReportCdfs> {
    let harm: Vec<f64> = rows.iter().map(|r| r.harm).collect();
    let viol: Vec<f64> = rows.iter().map(|r| relu(r.learner_max_g)).collect();
    let dviol: Vec<f64> = rows.iter().map(|r| relu(r.default_max_g)).collect();
    Ok(ReportCdfs {
        harm: Cdf::new(&harm)?,
        violation: Cdf::new(&viol)?,
        default_violation: Cdf::new(&dviol)?,
    })
}

/// Fraction of default-policy episodes from `regime` that violate, with
/// states and noise drawn as in `evaluate`.
pub fn default_violation_probability<E: Environment>(
    env: &E,
    n_states: usize,
    regime: InitRegime,
    seed: u64,
) -> Result<f64> {
    if n_states == 0 {
        return Err(Error::Empty("evaluation states"));
    }
    let mut violations = 0;
    for i in 0..n_states as u64 {
        let mut init = rng::stream(seed, Stream::Init, i);
        let s0 = EnvState::new(env.sample_initial(regime, &mut init)?);
        let plan = NoisePlan::sample(env, seed, i);
        if !kernel_membership(env, &s0, &plan)? {
            violations += 1;
        }
    }
    Ok(violations as f64 / n_states as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{WallConfig, WallEnv, WallState};
    use crate::scm::{ConstantPolicy, DefaultPolicy};

    fn row(member: bool, learner_safe: bool, default_safe: bool, harm: f64, success: bool) -> StateRow {
        StateRow {
            index: 0,
            member,
            learner_max_g: if learner_safe { -1.0 } else { 0.5 },
            default_max_g: if default_safe { -1.0 } else { 0.5 },
            harm,
            success,
            learner_return: 0.0,
            steps: 1,
            noise_digest: 0,
        }
    }

    #[test]
    fn hand_counted_metrics() {
        // 80 default-safe (learner safe on 76), 20 default-unsafe (learner safe on 3).
        let mut rows = Vec::new();
        for i in 0..80 {
            rows.push(row(true, i < 76, true, if i >= 76 { 0.2 } else { 0.0 }, i < 40));
        }
        for i in 0..20 {
            rows.push(row(false, i < 3, false, 0.0, true));
        }
        let s = summarize(&rows).unwrap();
        assert_eq!(s.recall, Some(76.0 / 80.0));
        assert_eq!(s.dr, 0.03);
        assert_eq!(s.success, Some(40.0 / 80.0));
        assert_eq!(s.p_harm, 0.04);
        assert_eq!(s.default_violation, 0.2);
        assert_eq!(percent(s.recall.unwrap()), 95);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn empty_denominators() {
        let s = summarize(&[row(false, false, false, 0.0, false)]).unwrap();
        assert_eq!(s.recall, None);
        assert_eq!(s.success, None);
    }

    #[test]
    fn cdf_cases() {
        let c = Cdf::new(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.values, vec![0.0]);
        assert_eq!(c.fractions, vec![1.0]);
        let c = Cdf::new(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.at(2.0), 2.0 / 3.0);
        assert_eq!(c.at(0.5), 0.0);
        assert_eq!(c.at(10.0), 1.0);
        assert!(Cdf::new(&[]).is_err());
        // Pointwise smaller values dominate.
        let a = Cdf::new(&[0.0, 0.1, 0.5, 1.0]).unwrap();
        let b = Cdf::new(&[0.2, 0.1, 0.9, 1.5]).unwrap();
        for x in [0.0, 0.05, 0.1, 0.3, 0.6, 1.0, 1.2, 2.0] {
            assert!(a.at(x) >= b.at(x));
        }
    }

    fn wall() -> WallEnv {
        WallEnv::new(WallConfig::default()).unwrap()
    }

    #[test]
    fn membership_examples() {
        let env = wall();
        let plan = NoisePlan::sample(&env, 1, 0);
        let rest = EnvState::new(WallState { x: 2.0, v: 0.0 });
        assert!(kernel_membership(&env, &rest, &plan).unwrap());
        let inside = EnvState::new(WallState { x: 10.5, v: 0.0 });
        assert!(!kernel_membership(&env, &inside, &plan).unwrap());
        // Braking from 3 m/s needs 4.5 m; 0.5 m of clearance is not enough.
        let fast = EnvState::new(WallState { x: 9.5, v: 3.0 });
        assert!(!kernel_membership(&env, &fast, &plan).unwrap());
    }

    #[test]
    fn learner_equal_to_default_is_perfect() {
        let env = wall();
        let r = evaluate(&env, &mut DefaultPolicy, 200, InitRegime::Wide, 0.99, 3).unwrap();
        assert_eq!(r.summary.recall, Some(1.0));
        assert_eq!(r.summary.dr, 0.0);
        assert_eq!(r.summary.p_harm, 0.0);
        assert!(r.rows.iter().all(|row| row.learner_max_g == row.default_max_g));
        assert!(r.summary.default_violation > 0.0);
    }

    #[test]
    fn reckless_policy_is_harmful_and_reproducible() {
        let env = wall();
        let run = || evaluate(&env, &mut ConstantPolicy(vec![1.0]), 50, InitRegime::Wide, 0.99, 8).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.summary.p_harm > 0.5);
        assert!(a.summary.learner_violation >= a.summary.default_violation);
        // Paired rows share realizations with the default run.
        let d = evaluate(&env, &mut DefaultPolicy, 50, InitRegime::Wide, 0.99, 8).unwrap();
        for (x, y) in a.rows.iter().zip(&d.rows) {
            assert_eq!(x.noise_digest, y.noise_digest);
            assert_eq!(x.default_max_g, y.default_max_g);
        }
    }

    #[test]
    fn episode_harm_matches_direct_computation() {
        let env = wall();
        let plan = NoisePlan::sample(&env, 4, 0);
        let s0 = EnvState::new(WallState { x: 4.0, v: 1.0 });
        let ep = rollout_with_plan(&env, &s0, &plan, &mut ConstantPolicy(vec![1.0]), &mut rng::stream(0, Stream::Action, 0)).unwrap();
        let (worst, h) = episode_harm(&env, &ep, &plan, 0.9).unwrap();
        // Oracle: recompute each term by explicit discounted maxima.
        let mut expect: f64 = 0.0;
        for t in 0..ep.states.len() {
            let vp = (t..ep.g.len()).map(|k| 0.9f64.powi((k - t) as i32) * ep.g[k]).fold(f64::NEG_INFINITY, f64::max);
            let br = default_outcome(&env, &ep.states[t], plan.from_step(t)).unwrap();
            let vm = (0..br.len()).map(|k| 0.9f64.powi(k as i32) * br[k]).fold(f64::NEG_INFINITY, f64::max);
            let ht = (vp - vm.max(0.0)).max(0.0);
            assert!((ht - h[t]).abs() < 1e-12);
            expect = expect.max(0.9f64.powi(t as i32) * ht);
        }
        assert!((worst - expect).abs() < 1e-12);
        assert!(worst > 0.0);
    }

    #[test]
    fn default_violation_matches_report() {
        let env = wall();
        let p = default_violation_probability(&env, 100, InitRegime::Wide, 5).unwrap();
        let r = evaluate(&env, &mut DefaultPolicy, 100, InitRegime::Wide, 0.99, 5).unwrap();
        assert_eq!(p, r.summary.default_violation);
    }
}
