//! One-dimensional vehicle approaching a wall.
//!
//! Small enough that kernel membership has a closed form up to
//! discretization: braking at full deceleration from `(x, v)` stops before
//! the wall roughly when `x + v²/(2 a_max) ≤ wall`. Used for tests and for
//! quick command-line runs.
//!
//! Noise layout: 0 acceleration, 1 observed position, 2 observed speed.

use rand_distr::{Distribution, StandardNormal};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{brake, integrate_speed};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::scm::{Environment, InitRegime, PhysicalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallState {
    pub x: f64,
    pub v: f64,
}

impl PhysicalState for WallState {
    fn components(&self) -> alloc::vec::Vec<f64> {
        alloc::vec![self.x, self.v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WallConfig {
    pub wall: f64,
    pub goal: f64,
    pub goal_tol: f64,
    pub goal_speed: f64,
    pub goal_bonus: f64,
    pub dt: f64,
    pub horizon: u32,
    pub accel_max: f64,
    pub speed_max: f64,
    pub accel_noise: f64,
    pub obs_noise: f64,
    /// Wide regime: initial positions in `[0, wide_x_max]`.
    pub wide_x_max: f64,
}

impl Default for WallConfig {
    fn default() -> Self {
        Self {
            wall: 10.0,
            goal: 9.0,
            goal_tol: 0.2,
            goal_speed: 0.1,
            goal_bonus: 5.0,
            dt: 0.1,
            horizon: 50,
            accel_max: 1.0,
            speed_max: 3.0,
            accel_noise: 0.05,
            obs_noise: 0.01,
            wide_x_max: 9.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WallEnv {
    pub cfg: WallConfig,
}

impl WallEnv {
    pub fn new(cfg: WallConfig) -> Result<Self> {
        if !(cfg.dt > 0.0 && cfg.accel_max > 0.0 && cfg.speed_max > 0.0 && cfg.horizon > 0) {
            return Err(Error::Config("wall limits must be positive".into()));
        }
        if !(cfg.goal < cfg.wall) {
            return Err(Error::Config("goal must lie before the wall".into()));
        }
        Ok(Self { cfg })
    }
}

impl Environment for WallEnv {
    type State = WallState;

    fn name(&self) -> &'static str {
        "wall"
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        3
    }

    fn horizon(&self) -> u32 {
        self.cfg.horizon
    }

    fn sample_noise(&self, rng: &mut SimRng, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }

    fn transition(&self, s: &WallState, action: &[f64], xi: &[f64]) -> WallState {
        let c = &self.cfg;
        let accel = (action[0].clamp(-c.accel_max, c.accel_max) + c.accel_noise * xi[0])
            .clamp(-c.accel_max, c.accel_max);
        WallState {
            x: s.x + s.v * c.dt,
            v: integrate_speed(s.v, accel, c.dt, -c.speed_max, c.speed_max),
        }
    }

    fn observe(&self, s: &WallState, xi: &[f64], out: &mut [f64]) {
        let c = &self.cfg;
        out[0] = (s.x + c.obs_noise * xi[1]) / c.wall;
        out[1] = (s.v + c.obs_noise * xi[2]) / c.speed_max;
    }

    fn reward(&self, s: &WallState, _: &[f64], next: &WallState) -> f64 {
        let g = self.cfg.goal;
        let bonus = if self.is_goal(next) { self.cfg.goal_bonus } else { 0.0 };
        (s.x - g).abs() - (next.x - g).abs() + bonus
    }

    fn constraint(&self, s: &WallState) -> f64 {
        s.x - self.cfg.wall
    }

    fn is_goal(&self, s: &WallState) -> bool {
        (s.x - self.cfg.goal).abs() <= self.cfg.goal_tol && s.v.abs() <= self.cfg.goal_speed
    }

    fn default_action(&self, s: &WallState, out: &mut [f64]) {
        out[0] = brake(s.v, self.cfg.accel_max);
    }

    fn sample_initial(&self, regime: InitRegime, rng: &mut SimRng) -> Result<WallState> {
        let c = &self.cfg;
        Ok(match regime {
            InitRegime::Feasible => WallState {
                x: rng.random_range(0.0..=c.goal - 1.0),
                v: 0.0,
            },
            InitRegime::Wide => WallState {
                x: rng.random_range(0.0..=c.wide_x_max.min(c.wall)),
                v: rng.random_range(0.0..=c.speed_max),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn braking_from_the_kernel_boundary() {
        let env = WallEnv::new(WallConfig::default()).unwrap();
        let zero = [0.0; 3];
        // Discrete braking distance: v·dt per step while decelerating.
        let stop = |mut s: WallState| {
            let mut a = [0.0];
            for _ in 0..100 {
                env.default_action(&s, &mut a);
                s = env.transition(&s, &a, &zero);
            }
            s
        };
        let s = stop(WallState { x: 0.0, v: 2.0 });
        assert_eq!(s.v, 0.0);
        // Oracle: Σ_{k=0}^{19} (2 - 0.1k)·0.1 = 2.1.
        assert!((s.x - 2.1).abs() < 1e-9);
    }

    #[test]
    fn wall_signs() {
        let env = WallEnv::new(WallConfig::default()).unwrap();
        assert!(env.constraint(&WallState { x: 9.5, v: 0.0 }) < 0.0);
        assert!(env.constraint(&WallState { x: 10.5, v: 0.0 }) > 0.0);
        assert!(WallEnv::new(WallConfig { goal: 11.0, ..Default::default() }).is_err());
    }
}
