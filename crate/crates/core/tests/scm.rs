//! Contracts of the structural-causal-model layer.

use cfharm_core::env::{WallConfig, WallEnv, WallState};
use cfharm_core::rng::{stream, Stream};
use cfharm_core::scm::{
    replay_batch, replay_step, step_recorded, ConstantPolicy, DefaultPolicy, EnvState, Environment, InitRegime,
    VecEnv,
};
use cfharm_core::Error;
use proptest::prelude::*;

fn wall() -> WallEnv {
    WallEnv::new(WallConfig::default()).unwrap()
}

#[test]
fn stepping_a_done_state_is_an_error() {
    let env = wall();
    let mut s = EnvState::new(WallState { x: 1.0, v: 0.0 });
    s.done = true;
    let err = replay_step(&env, &s, &[0.0], &[0.0; 3]).unwrap_err();
    assert!(matches!(err, Error::SteppedDoneState));
}

#[test]
fn wrong_lengths_are_errors() {
    let env = wall();
    let s = EnvState::new(WallState { x: 1.0, v: 0.0 });
    assert!(replay_step(&env, &s, &[0.0, 1.0], &[0.0; 3]).is_err());
    assert!(replay_step(&env, &s, &[0.0], &[0.0; 2]).is_err());
}

#[test]
fn episodes_end_at_the_horizon_and_reset() {
    let env = wall();
    let horizon = env.horizon() as usize;
    let mut venv = VecEnv::new(env, 3, InitRegime::Feasible, 1).unwrap();
    let b = venv.rollout(&mut ConstantPolicy(vec![0.0]), 2 * horizon).unwrap();
    for e in 0..3 {
        let dones: Vec<usize> = (0..b.n_steps).filter(|&t| b.done[b.idx(e, t)]).collect();
        assert_eq!(dones, vec![horizon - 1, 2 * horizon - 1], "env {e}");
        // The step after a reset starts a fresh episode.
        assert_eq!(b.states[b.idx(e, horizon)].step, 0);
    }
    assert_eq!(b.episodes.len(), 6);
}

#[test]
fn rollouts_are_seeded() {
    let run = |seed| {
        let mut venv = VecEnv::new(wall(), 4, InitRegime::Wide, seed).unwrap();
        venv.rollout(&mut DefaultPolicy, 30).unwrap().bit_digest()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn replayed_batches_match_after_resets() {
    let mut venv = VecEnv::new(wall(), 5, InitRegime::Wide, 2).unwrap();
    let b = venv.rollout(&mut DefaultPolicy, 130).unwrap();
    assert!(!b.episodes.is_empty());
    assert_eq!(replay_batch(venv.env(), &b).unwrap(), b);
}

proptest! {
    #[test]
    fn recorded_noise_replays_exactly(x in 0.0..9.0f64, v in -1.0..2.0f64, a in -3.0..3.0f64, seed in 0u64..1000) {
        let env = wall();
        let s = EnvState::new(WallState { x, v });
        let (step, noise) = step_recorded(&env, &s, &[a], &mut stream(seed, Stream::Exogenous, 0)).unwrap();
        let again = replay_step(&env, &s, &[a], &noise.0).unwrap();
        prop_assert_eq!(step.next.phys.x.to_bits(), again.next.phys.x.to_bits());
        prop_assert_eq!(step.next.phys.v.to_bits(), again.next.phys.v.to_bits());
        prop_assert_eq!(step, again);
    }
}
