//! Rover in a U-shaped corridor with uncertain road friction.
//!
//! Kinematic bicycle model with a circular footprint. Longitudinal and
//! lateral accelerations are jointly clipped to the friction ellipse
//! `(a_long / a_max)² + (a_lat / a_lat_max)² ≤ ρ²`, where `ρ = 1` admits the
//! full actuator range.
//!
//! Noise layout (all standard normal, scaled inside the dynamics):
//!
//! | index | use                             |
//! |-------|---------------------------------|
//! | 0     | acceleration command            |
//! | 1     | wheel-angle command             |
//! | 2     | friction coefficient this step  |
//! | 3..=4 | observed position x, y          |
//! | 5     | observed heading                |
//! | 6     | observed speed                  |
//! | 7     | observed friction               |

use core::f64::consts::PI;

use libm::{cos, hypot, sin, sqrt, tan};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::track::UTrack;
use super::{brake, integrate_speed, wrap_angle};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::scm::{Environment, InitRegime, PhysicalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoverState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    /// True friction coefficient of this environment's surface.
    pub friction: f64,
}

impl PhysicalState for RoverState {
    fn components(&self) -> alloc::vec::Vec<f64> {
        alloc::vec![self.x, self.y, self.heading, self.v, self.friction]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoverConfig {
    pub dt: f64,
    pub horizon: u32,
    pub wheelbase: f64,
    pub radius: f64,
    pub accel_max: f64,
    pub wheel_max: f64,
    pub speed_max: f64,
    pub friction_min: f64,
    pub friction_max: f64,
    pub accel_noise: f64,
    pub wheel_noise: f64,
    pub friction_noise: f64,
    pub obs_position_noise: f64,
    pub obs_heading_noise: f64,
    pub obs_speed_noise: f64,
    pub obs_friction_noise: f64,
    pub goal_radius: f64,
    pub goal_speed: f64,
    pub goal_bonus: f64,
    /// Initial states keep this much centerline distance from the goal.
    pub init_goal_clearance: f64,
    /// Wide regime: initial speed drawn from `[wide_speed_min, speed_max]`.
    pub wide_speed_min: f64,
    /// Wide regime: probability that the initial heading points into the
    /// nearer wall (otherwise it is uniform).
    pub wide_wall_heading_prob: f64,
    /// Wide regime: clearance to the wall faced, drawn from `[0, band]`.
    pub wide_wall_band: f64,
    pub track: UTrack,
}

impl Default for RoverConfig {
    fn default() -> Self {
        Self {
            dt: 0.5,
            horizon: 100,
            wheelbase: 0.5,
            radius: 0.5,
            accel_max: 1.0,
            wheel_max: 0.5,
            speed_max: 1.0,
            friction_min: 0.3,
            friction_max: 1.0,
            accel_noise: 0.05,
            wheel_noise: 0.02,
            friction_noise: 0.05,
            obs_position_noise: 0.05,
            obs_heading_noise: 0.02,
            obs_speed_noise: 0.02,
            obs_friction_noise: 0.05,
            goal_radius: 0.5,
            goal_speed: 0.1,
            goal_bonus: 10.0,
            init_goal_clearance: 3.0,
            wide_speed_min: 0.35,
            wide_wall_heading_prob: 0.8,
            wide_wall_band: 0.5,
            track: UTrack::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rover {
    pub cfg: RoverConfig,
}

impl Rover {
    pub const NOISE_DIM: usize = 8;
    pub const OBS_DIM: usize = 10;

    pub fn new(cfg: RoverConfig) -> Result<Self> {
        if !(cfg.dt > 0.0
            && cfg.wheelbase > 0.0
            && cfg.accel_max > 0.0
            && cfg.wheel_max > 0.0
            && cfg.speed_max > 0.0
            && cfg.horizon > 0)
        {
            return Err(Error::Config("rover limits must be positive".into()));
        }
        if !(0.0 < cfg.friction_min && cfg.friction_min <= cfg.friction_max) {
            return Err(Error::Config("friction range must be positive".into()));
        }
        Ok(Self { cfg })
    }

    /// Lateral acceleration reached at full speed and full lock; the
    /// friction ellipse is normalized by it.
    pub fn lateral_accel_max(&self) -> f64 {
        let c = &self.cfg;
        c.speed_max * c.speed_max * tan(c.wheel_max) / c.wheelbase
    }

    /// Project `(a_long, a_lat)` radially onto the friction ellipse of
    /// coefficient `friction`.
    pub fn friction_clip(&self, a_long: f64, a_lat: f64, friction: f64) -> (f64, f64) {
        let nl = a_long / self.cfg.accel_max;
        let nt = a_lat / self.lateral_accel_max();
        let n = sqrt(nl * nl + nt * nt);
        if n > friction {
            let k = friction / n;
            (a_long * k, a_lat * k)
        } else {
            (a_long, a_lat)
        }
    }

    fn effective_friction(&self, s: &RoverState, xi: f64) -> f64 {
        (s.friction + self.cfg.friction_noise * xi).clamp(self.cfg.friction_min, self.cfg.friction_max)
    }

    fn sample_friction(&self, rng: &mut SimRng) -> f64 {
        rng.random_range(self.cfg.friction_min..=self.cfg.friction_max)
    }
}

impl Environment for Rover {
    type State = RoverState;

    fn name(&self) -> &'static str {
        "rover"
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        Self::OBS_DIM
    }

    fn noise_dim(&self) -> usize {
        Self::NOISE_DIM
    }

    fn horizon(&self) -> u32 {
        self.cfg.horizon
    }

    fn sample_noise(&self, rng: &mut SimRng, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }

    fn transition(&self, s: &RoverState, action: &[f64], xi: &[f64]) -> RoverState {
        let c = &self.cfg;
        let accel = (action[0].clamp(-c.accel_max, c.accel_max) + c.accel_noise * xi[0])
            .clamp(-c.accel_max, c.accel_max);
        let wheel = (action[1].clamp(-c.wheel_max, c.wheel_max) + c.wheel_noise * xi[1])
            .clamp(-c.wheel_max, c.wheel_max);
        let friction = self.effective_friction(s, xi[2]);
        // Curvature magnitude tan(δ)/L; the yaw rate follows the clipped
        // lateral acceleration.
        let curvature = tan(wheel) / c.wheelbase;
        let a_lat = s.v * s.v * curvature;
        let (a_long, a_lat_clipped) = self.friction_clip(accel, a_lat, friction);
        let scale = if a_lat != 0.0 { a_lat_clipped / a_lat } else { 1.0 };
        let yaw_rate = -s.v * curvature * scale;
        RoverState {
            x: s.x + s.v * cos(s.heading) * c.dt,
            y: s.y + s.v * sin(s.heading) * c.dt,
            heading: wrap_angle(s.heading + yaw_rate * c.dt),
            v: integrate_speed(s.v, a_long, c.dt, -c.speed_max, c.speed_max),
            friction: s.friction,
        }
    }

    fn observe(&self, s: &RoverState, xi: &[f64], out: &mut [f64]) {
        let c = &self.cfg;
        let x = s.x + c.obs_position_noise * xi[3];
        let y = s.y + c.obs_position_noise * xi[4];
        let heading = s.heading + c.obs_heading_noise * xi[5];
        let v = s.v + c.obs_speed_noise * xi[6];
        let friction = s.friction + c.obs_friction_noise * xi[7];
        let f = c.track.frenet(x, y);
        let err = wrap_angle(heading - f.heading);
        out[0] = x / c.track.leg_length;
        out[1] = y / c.track.leg_length;
        out[2] = cos(heading);
        out[3] = sin(heading);
        out[4] = v / c.speed_max;
        out[5] = friction;
        out[6] = f.lateral / c.track.half_width();
        out[7] = sin(err);
        out[8] = cos(err);
        out[9] = (c.track.length() - f.s) / c.track.length();
    }

    fn reward(&self, s: &RoverState, _: &[f64], next: &RoverState) -> f64 {
        let t = &self.cfg.track;
        let progress = t.distance_to_goal(s.x, s.y) - t.distance_to_goal(next.x, next.y);
        let bonus = if self.is_goal(next) { self.cfg.goal_bonus } else { 0.0 };
        progress + bonus
    }

    fn constraint(&self, s: &RoverState) -> f64 {
        self.cfg.track.signed_distance(s.x, s.y, self.cfg.radius)
    }

    fn is_goal(&self, s: &RoverState) -> bool {
        hypot(s.x, s.y) <= self.cfg.goal_radius && s.v.abs() <= self.cfg.goal_speed
    }

    fn default_action(&self, s: &RoverState, out: &mut [f64]) {
        let c = &self.cfg;
        let f = c.track.frenet(s.x, s.y);
        let err = wrap_angle(s.heading - f.heading);
        // Left of the centerline or pointing left of the corridor: steer right.
        let wheel = 0.5 * f.lateral + err;
        out[0] = brake(s.v, c.accel_max);
        out[1] = wheel.clamp(-c.wheel_max, c.wheel_max);
    }

    fn sample_initial(&self, regime: InitRegime, rng: &mut SimRng) -> Result<RoverState> {
        const TRIES: usize = 1000;
        let c = &self.cfg;
        let t = &c.track;
        let s_max = t.length() - c.init_goal_clearance;
        let free = t.half_width() - c.radius;
        for _ in 0..TRIES {
            let s = rng.random_range(0.0..s_max);
            let friction = self.sample_friction(rng);
            let state = match regime {
                InitRegime::Feasible => {
                    let (x, y, h) = t.point(s, 0.0);
                    let heading = wrap_angle(h + rng.random_range(-0.5 * PI..=0.5 * PI));
                    RoverState {
                        x,
                        y,
                        heading,
                        v: 0.0,
                        friction,
                    }
                }
                InitRegime::Wide => {
                    let toward_wall = rng.random_bool(c.wide_wall_heading_prob);
                    let (lateral, rel) = if toward_wall {
                        // Positive lateral offsets lie left of the centerline.
                        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        let clearance = rng.random_range(0.0..=c.wide_wall_band.min(2.0 * free));
                        (side * (free - clearance), side * rng.random_range(0.25 * PI..=0.75 * PI))
                    } else {
                        (rng.random_range(-free..=free), rng.random_range(-PI..PI))
                    };
                    let (x, y, h) = t.point(s, lateral);
                    RoverState {
                        x,
                        y,
                        heading: wrap_angle(h + rel),
                        v: rng.random_range(c.wide_speed_min..=c.speed_max),
                        friction,
                    }
                }
            };
            if self.constraint(&state) <= 0.0 {
                return Ok(state);
            }
        }
        Err(Error::SamplerExhausted { tries: TRIES })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn rover() -> Rover {
        Rover::new(RoverConfig::default()).unwrap()
    }

    fn on_centerline(r: &Rover, s: f64, v: f64, friction: f64) -> RoverState {
        let (x, y, heading) = r.cfg.track.point(s, 0.0);
        RoverState {
            x,
            y,
            heading,
            v,
            friction,
        }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let r = rover();
        let s = on_centerline(&r, 4.0, 0.0, 0.7);
        let next = r.transition(&s, &[0.0, 0.0], &[0.0; Rover::NOISE_DIM]);
        assert_eq!(next, s);
    }

    #[test]
    fn acceleration_is_clamped() {
        let r = rover();
        let s = on_centerline(&r, 4.0, 0.0, 1.0);
        let next = r.transition(&s, &[2.0, 0.0], &[0.0; Rover::NOISE_DIM]);
        assert!((next.v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_policy_examples() {
        let r = rover();
        let mut a = [9.0; 2];
        r.default_action(&on_centerline(&r, 4.0, 0.0, 1.0), &mut a);
        assert_eq!(a[0], 0.0);
        assert!(a[1].abs() < 1e-9);
        r.default_action(&on_centerline(&r, 4.0, 1.0, 1.0), &mut a);
        assert_eq!(a[0], -1.0);
        let (x, y, heading) = r.cfg.track.point(4.0, 0.8);
        let left = RoverState {
            x,
            y,
            heading,
            v: 0.5,
            friction: 1.0,
        };
        r.default_action(&left, &mut a);
        assert!(a[1] > 0.0, "{a:?}");
    }

    #[test]
    fn feasible_starts_at_rest_inside() {
        let r = rover();
        let mut rng = stream(1, Stream::Init, 0);
        for _ in 0..500 {
            let s = r.sample_initial(InitRegime::Feasible, &mut rng).unwrap();
            assert_eq!(s.v, 0.0);
            assert!(r.constraint(&s) <= 0.0);
            let w = r.sample_initial(InitRegime::Wide, &mut rng).unwrap();
            assert!(r.constraint(&w) <= 0.0);
        }
    }

    proptest! {
        #[test]
        fn friction_clip_respects_the_ellipse(
            a_long in -3.0..3.0f64,
            a_lat in -3.0..3.0f64,
            rho in 0.3..1.0f64,
        ) {
            let r = rover();
            let (l, t) = r.friction_clip(a_long, a_lat, rho);
            let nl = l / r.cfg.accel_max;
            let nt = t / r.lateral_accel_max();
            prop_assert!(nl * nl + nt * nt <= rho * rho + 1e-9);
            // Radial: direction is preserved.
            prop_assert!((l * a_lat - t * a_long).abs() < 1e-9);
            let inside = (a_long / r.cfg.accel_max).powi(2) + (a_lat / r.lateral_accel_max()).powi(2) <= rho * rho;
            if inside {
                prop_assert_eq!((l, t), (a_long, a_lat));
            }
        }

        #[test]
        fn steps_are_deterministic_and_clamped(
            s in 0.0..25.0f64,
            v in -1.0..1.0f64,
            accel in -5.0..5.0f64,
            wheel in -2.0..2.0f64,
            xi in proptest::collection::vec(-3.0..3.0f64, Rover::NOISE_DIM),
        ) {
            let r = rover();
            let st = on_centerline(&r, s, v, 0.5);
            let a = r.transition(&st, &[accel, wheel], &xi);
            let b = r.transition(&st, &[accel, wheel], &xi);
            prop_assert_eq!(a, b);
            prop_assert!(a.v.abs() <= r.cfg.speed_max);
            prop_assert!(a.heading > -PI - 1e-12 && a.heading <= PI + 1e-12);
        }

        #[test]
        fn constraint_is_one_lipschitz(
            x in -8.0..8.0f64,
            y in -2.0..14.0f64,
            dx in -0.05..0.05f64,
            dy in -0.05..0.05f64,
        ) {
            let r = rover();
            let s = RoverState { x, y, heading: 0.0, v: 0.0, friction: 1.0 };
            let moved = RoverState { x: x + dx, y: y + dy, ..s };
            prop_assert!((r.constraint(&s) - r.constraint(&moved)).abs() <= hypot(dx, dy) + 1e-12);
        }
    }
}
