//! Tractor with a single trailer parking in an occupancy-grid lot.
//!
//! The tractor is a kinematic bicycle with its hitch on the rear axle; the
//! trailer follows `θ̇ = (v / L₂) sin(ψ − θ)` with a hidden wheelbase `L₂`
//! drawn per episode. Process noise on the joint angle, yaw rate and lateral
//! velocity scales with speed, so a stopped vehicle stays put.
//!
//! Noise layout: 0 joint angle, 1 yaw rate, 2 lateral velocity (standard
//! normal), then one uniform draw in `[-1, 1]` per ray for range noise.

use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, hypot, sin, tan};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grid::{OccupancyGrid, ParkingSpot, DEFAULT_GRID};
use super::{brake, integrate_speed, wrap_angle};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::scm::{Environment, InitRegime, PhysicalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrailerState {
    /// Tractor rear axle, which is also the hitch point.
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    /// Tractor yaw minus trailer yaw.
    pub joint: f64,
    pub v: f64,
    pub wheel: f64,
    /// Hidden per-episode trailer wheelbase.
    pub trailer_wheelbase: f64,
    /// Index of the target parking spot.
    pub spot: u32,
}

impl TrailerState {
    pub fn trailer_yaw(&self) -> f64 {
        wrap_angle(self.yaw - self.joint)
    }
}

impl PhysicalState for TrailerState {
    fn components(&self) -> Vec<f64> {
        alloc::vec![
            self.x,
            self.y,
            self.yaw,
            self.joint,
            self.v,
            self.wheel,
            self.trailer_wheelbase,
            self.spot as f64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrailerConfig {
    pub dt: f64,
    pub horizon: u32,
    pub tractor_wheelbase: f64,
    pub tractor_length: f64,
    pub tractor_width: f64,
    /// Tractor body behind the rear axle.
    pub tractor_rear_overhang: f64,
    pub trailer_length: f64,
    pub trailer_width: f64,
    /// Trailer body ahead of the hitch.
    pub trailer_front_overhang: f64,
    pub trailer_wheelbase_mean: f64,
    pub trailer_wheelbase_std: f64,
    pub trailer_wheelbase_min: f64,
    pub trailer_wheelbase_max: f64,
    pub accel_max: f64,
    pub wheel_rate_max: f64,
    pub wheel_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub joint_max: f64,
    pub joint_noise: f64,
    pub yaw_rate_noise: f64,
    pub lateral_noise: f64,
    pub rays: usize,
    pub ray_range: f64,
    /// Relative range noise amplitude.
    pub ray_noise: f64,
    /// Spacing of footprint boundary samples.
    pub footprint_spacing: f64,
    pub goal_position_tol: f64,
    pub goal_heading_tol: f64,
    pub goal_speed: f64,
    pub goal_bonus: f64,
    pub heading_weight: f64,
    pub obs_scale: f64,
    /// Initial hitch distance in front of the spot.
    pub init_distance_min: f64,
    pub init_distance_max: f64,
    pub init_lateral: f64,
    pub init_yaw_spread: f64,
    pub init_joint_spread: f64,
    /// Wide regime speed range (either direction of travel).
    pub wide_speed_min: f64,
    pub wide_speed_max: f64,
    /// Grid in text form; empty selects the built-in lot.
    pub grid: alloc::string::String,
}

impl Default for TrailerConfig {
    fn default() -> Self {
        Self {
            dt: 0.5,
            horizon: 300,
            tractor_wheelbase: 3.5,
            tractor_length: 4.0,
            tractor_width: 2.0,
            tractor_rear_overhang: 0.5,
            trailer_length: 8.0,
            trailer_width: 2.5,
            trailer_front_overhang: 0.5,
            trailer_wheelbase_mean: 8.0,
            trailer_wheelbase_std: 0.5,
            trailer_wheelbase_min: 6.0,
            trailer_wheelbase_max: 10.0,
            accel_max: 2.0,
            wheel_rate_max: 1.0,
            wheel_max: 0.6,
            speed_min: -2.0,
            speed_max: 5.0,
            joint_max: 1.2,
            joint_noise: 0.02,
            yaw_rate_noise: 0.02,
            lateral_noise: 0.02,
            rays: 32,
            ray_range: 20.0,
            ray_noise: 0.02,
            footprint_spacing: 0.5,
            goal_position_tol: 1.0,
            goal_heading_tol: 0.2,
            goal_speed: 0.2,
            goal_bonus: 10.0,
            heading_weight: 2.0,
            obs_scale: 20.0,
            init_distance_min: 10.0,
            init_distance_max: 18.0,
            init_lateral: 6.0,
            init_yaw_spread: 0.25 * PI,
            init_joint_spread: 0.3,
            wide_speed_min: 3.0,
            wide_speed_max: 5.0,
            grid: alloc::string::String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TractorTrailer {
    pub cfg: TrailerConfig,
    pub grid: OccupancyGrid,
    /// Boundary samples in the tractor frame (rear axle origin).
    tractor_points: Vec<(f64, f64)>,
    /// Boundary samples in the trailer frame (hitch origin).
    trailer_points: Vec<(f64, f64)>,
}

const STATE_OBS: usize = 10;

impl TractorTrailer {
    pub fn new(cfg: TrailerConfig) -> Result<Self> {
        let grid = if cfg.grid.trim().is_empty() {
            OccupancyGrid::parse(DEFAULT_GRID)?
        } else {
            OccupancyGrid::parse(&cfg.grid)?
        };
        Self::with_grid(cfg, grid)
    }

    pub fn with_grid(cfg: TrailerConfig, grid: OccupancyGrid) -> Result<Self> {
        if grid.spots().is_empty() {
            return Err(Error::GridFormat("grid has no parking spots".into()));
        }
        if !(cfg.dt > 0.0 && cfg.horizon > 0 && cfg.footprint_spacing > 0.0 && cfg.rays > 0) {
            return Err(Error::Config("trailer limits must be positive".into()));
        }
        if !(cfg.trailer_wheelbase_min > 0.0 && cfg.trailer_wheelbase_min <= cfg.trailer_wheelbase_max)
        {
            return Err(Error::Config("trailer wheelbase range must be positive".into()));
        }
        let tractor_points = rectangle_boundary(
            -cfg.tractor_rear_overhang,
            cfg.tractor_length - cfg.tractor_rear_overhang,
            0.5 * cfg.tractor_width,
            cfg.footprint_spacing,
        );
        let trailer_points = rectangle_boundary(
            cfg.trailer_front_overhang - cfg.trailer_length,
            cfg.trailer_front_overhang,
            0.5 * cfg.trailer_width,
            cfg.footprint_spacing,
        );
        Ok(Self {
            cfg,
            grid,
            tractor_points,
            trailer_points,
        })
    }

    pub fn spot(&self, s: &TrailerState) -> &ParkingSpot {
        &self.grid.spots()[s.spot as usize % self.grid.spots().len()]
    }

    /// Center of the trailer body.
    pub fn trailer_center(&self, s: &TrailerState) -> (f64, f64) {
        let t = s.trailer_yaw();
        let off = self.cfg.trailer_front_overhang - 0.5 * self.cfg.trailer_length;
        (s.x + off * cos(t), s.y + off * sin(t))
    }

    /// World coordinates of all footprint boundary samples.
    pub fn footprint(&self, s: &TrailerState) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.tractor_points.len() + self.trailer_points.len());
        let place = |out: &mut Vec<(f64, f64)>, pts: &[(f64, f64)], yaw: f64| {
            let (c, sn) = (cos(yaw), sin(yaw));
            for &(px, py) in pts {
                out.push((s.x + c * px - sn * py, s.y + sn * px + c * py));
            }
        };
        place(&mut out, &self.tractor_points, s.yaw);
        place(&mut out, &self.trailer_points, s.trailer_yaw());
        out
    }

    /// Signed distance of the whole footprint: the largest value over the
    /// boundary samples.
    pub fn footprint_distance(&self, s: &TrailerState) -> f64 {
        self.footprint(s)
            .into_iter()
            .map(|(x, y)| self.grid.signed_distance(x, y))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn pose_error(&self, s: &TrailerState) -> (f64, f64) {
        let spot = self.spot(s);
        let (cx, cy) = self.trailer_center(s);
        (
            hypot(cx - spot.x, cy - spot.y),
            wrap_angle(s.trailer_yaw() - spot.heading),
        )
    }

    fn potential(&self, s: &TrailerState) -> f64 {
        let (d, h) = self.pose_error(s);
        -(d + self.cfg.heading_weight * h.abs())
    }

    fn sample_wheelbase(&self, rng: &mut SimRng) -> f64 {
        let c = &self.cfg;
        let draw = match Normal::new(c.trailer_wheelbase_mean, c.trailer_wheelbase_std) {
            Ok(n) => n.sample(rng),
            Err(_) => c.trailer_wheelbase_mean,
        };
        draw.clamp(c.trailer_wheelbase_min, c.trailer_wheelbase_max)
    }
}

/// Points along a rectangle `[x0, x1] × [-hw, hw]` at most `spacing` apart.
fn rectangle_boundary(x0: f64, x1: f64, hw: f64, spacing: f64) -> Vec<(f64, f64)> {
    let corners = [(x0, -hw), (x1, -hw), (x1, hw), (x0, hw)];
    let mut pts = Vec::new();
    for k in 0..4 {
        let (ax, ay) = corners[k];
        let (bx, by) = corners[(k + 1) % 4];
        let n = libm::ceil(hypot(bx - ax, by - ay) / spacing).max(1.0) as usize;
        for i in 0..n {
            let f = i as f64 / n as f64;
            pts.push((ax + f * (bx - ax), ay + f * (by - ay)));
        }
    }
    pts
}

impl Environment for TractorTrailer {
    type State = TrailerState;

    fn name(&self) -> &'static str {
        "tractor-trailer"
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        STATE_OBS + 2 * self.cfg.rays
    }

    fn noise_dim(&self) -> usize {
        3 + self.cfg.rays
    }

    fn horizon(&self) -> u32 {
        self.cfg.horizon
    }

    fn sample_noise(&self, rng: &mut SimRng, out: &mut [f64]) {
        for v in out[..3].iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        for v in out[3..].iter_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
    }

    fn transition(&self, s: &TrailerState, action: &[f64], xi: &[f64]) -> TrailerState {
        let c = &self.cfg;
        let accel = action[0].clamp(-c.accel_max, c.accel_max);
        let rate = action[1].clamp(-c.wheel_rate_max, c.wheel_rate_max);
        let wheel = (s.wheel + rate * c.dt).clamp(-c.wheel_max, c.wheel_max);
        let speed = s.v.abs();
        let yaw_rate = -s.v * tan(wheel) / c.tractor_wheelbase + c.yaw_rate_noise * speed * xi[1];
        let v_lat = c.lateral_noise * speed * xi[2];
        let (ch, sh) = (cos(s.yaw), sin(s.yaw));
        let yaw = wrap_angle(s.yaw + yaw_rate * c.dt);
        let trailer = s.trailer_yaw() + s.v / s.trailer_wheelbase * sin(s.joint) * c.dt;
        let joint = (wrap_angle(yaw - trailer) + c.joint_noise * speed * c.dt * xi[0])
            .clamp(-c.joint_max, c.joint_max);
        TrailerState {
            x: s.x + (s.v * ch - v_lat * sh) * c.dt,
            y: s.y + (s.v * sh + v_lat * ch) * c.dt,
            yaw,
            joint,
            v: integrate_speed(s.v, accel, c.dt, c.speed_min, c.speed_max),
            wheel,
            trailer_wheelbase: s.trailer_wheelbase,
            spot: s.spot,
        }
    }

    fn observe(&self, s: &TrailerState, xi: &[f64], out: &mut [f64]) {
        let c = &self.cfg;
        let spot = self.spot(s);
        let (cx, cy) = self.trailer_center(s);
        let (dx, dy) = (cx - spot.x, cy - spot.y);
        let (ch, sh) = (cos(spot.heading), sin(spot.heading));
        let rel_trailer = wrap_angle(s.trailer_yaw() - spot.heading);
        let rel_tractor = wrap_angle(s.yaw - spot.heading);
        out[0] = (ch * dx + sh * dy) / c.obs_scale;
        out[1] = (-sh * dx + ch * dy) / c.obs_scale;
        out[2] = cos(rel_trailer);
        out[3] = sin(rel_trailer);
        out[4] = cos(rel_tractor);
        out[5] = sin(rel_tractor);
        out[6] = s.joint / c.joint_max;
        out[7] = s.v / c.speed_max;
        out[8] = s.wheel / c.wheel_max;
        out[9] = hypot(dx, dy) / c.obs_scale;
        let velocity = (s.v * cos(s.yaw), s.v * sin(s.yaw));
        let n = c.rays;
        match self
            .grid
            .raycast(s.x, s.y, s.yaw, velocity, n, c.ray_range)
        {
            Ok(scan) => {
                for k in 0..n {
                    let d = scan.distances[k] * (1.0 + c.ray_noise * xi[3 + k]);
                    out[STATE_OBS + k] = d.clamp(0.0, c.ray_range) / c.ray_range;
                    out[STATE_OBS + n + k] = scan.relative_velocities[k] / c.speed_max;
                }
            }
            Err(_) => {
                for v in out[STATE_OBS..STATE_OBS + 2 * n].iter_mut() {
                    *v = 0.0;
                }
            }
        }
    }

    fn reward(&self, s: &TrailerState, _: &[f64], next: &TrailerState) -> f64 {
        let bonus = if self.is_goal(next) { self.cfg.goal_bonus } else { 0.0 };
        self.potential(next) - self.potential(s) + bonus
    }

    fn constraint(&self, s: &TrailerState) -> f64 {
        let d = self.footprint_distance(s);
        if d <= 0.0 {
            d
        } else {
            d * (1.0 + 0.5 * s.v * s.v)
        }
    }

    fn is_goal(&self, s: &TrailerState) -> bool {
        let (d, h) = self.pose_error(s);
        d <= self.cfg.goal_position_tol
            && h.abs() <= self.cfg.goal_heading_tol
            && s.v.abs() <= self.cfg.goal_speed
    }

    fn default_action(&self, s: &TrailerState, out: &mut [f64]) {
        out[0] = brake(s.v, self.cfg.accel_max);
        out[1] = 0.0;
    }

    fn sample_initial(&self, regime: InitRegime, rng: &mut SimRng) -> Result<TrailerState> {
        const TRIES: usize = 1000;
        let c = &self.cfg;
        let n_spots = self.grid.spots().len();
        for _ in 0..TRIES {
            let spot_index = rng.random_range(0..n_spots);
            let spot = self.grid.spots()[spot_index];
            let (ch, sh) = (cos(spot.heading), sin(spot.heading));
            let joint = rng.random_range(-c.init_joint_spread..=c.init_joint_spread);
            let wheel = rng.random_range(-c.wheel_max..=c.wheel_max);
            let (x, y, yaw, v) = match regime {
                InitRegime::Feasible => {
                    let along = rng.random_range(c.init_distance_min..=c.init_distance_max);
                    let across = rng.random_range(-c.init_lateral..=c.init_lateral);
                    let yaw = spot.heading + rng.random_range(-c.init_yaw_spread..=c.init_yaw_spread);
                    (spot.x + along * ch - across * sh, spot.y + along * sh + across * ch, yaw, 0.0)
                }
                InitRegime::Wide => {
                    let x = rng.random_range(0.0..self.grid.world_width());
                    let y = rng.random_range(0.0..self.grid.world_height());
                    let speed = rng.random_range(c.wide_speed_min..=c.wide_speed_max);
                    let v = if rng.random_bool(0.5) {
                        speed.min(c.speed_max)
                    } else {
                        (-speed).max(c.speed_min)
                    };
                    (x, y, rng.random_range(-PI..PI), v)
                }
            };
            let state = TrailerState {
                x,
                y,
                yaw: wrap_angle(yaw),
                joint,
                v,
                wheel,
                trailer_wheelbase: self.sample_wheelbase(rng),
                spot: spot_index as u32,
            };
            if self.grid.contains(state.x, state.y) && self.footprint_distance(&state) <= 0.0 {
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

    fn env() -> TractorTrailer {
        TractorTrailer::new(TrailerConfig::default()).unwrap()
    }

    fn open_state(env: &TractorTrailer) -> TrailerState {
        let s = TrailerState {
            x: 20.0,
            y: 30.0,
            yaw: 0.0,
            joint: 0.0,
            v: 2.0,
            wheel: 0.0,
            trailer_wheelbase: 8.0,
            spot: 0,
        };
        assert!(env.constraint(&s) < 0.0);
        s
    }

    #[test]
    fn straight_motion_keeps_trailer_aligned() {
        let env = env();
        let mut s = open_state(&env);
        let zero = [0.0; 35];
        for _ in 0..6 {
            s = env.transition(&s, &[0.0, 0.0], &zero);
            assert_eq!(s.joint, 0.0);
            assert_eq!(s.trailer_yaw(), s.yaw);
        }
        assert!((s.x - 26.0).abs() < 1e-12 && s.v == 2.0);
    }

    #[test]
    fn stopped_vehicle_ignores_process_noise() {
        let env = env();
        let mut s = open_state(&env);
        s.v = 0.0;
        let mut xi = [0.0; 35];
        xi[..3].copy_from_slice(&[3.0, -2.0, 1.5]);
        let next = env.transition(&s, &[0.0, 0.0], &xi);
        assert_eq!((next.x, next.y, next.yaw, next.joint), (s.x, s.y, s.yaw, s.joint));
    }

    #[test]
    fn trailer_heading_relaxes_toward_tractor() {
        let env = env();
        let mut s = open_state(&env);
        s.joint = 0.3;
        let zero = [0.0; 35];
        let next = env.transition(&s, &[0.0, 0.0], &zero);
        // Oracle: the trailer heading integrates (v/L₂) sin(joint).
        let expected = s.trailer_yaw() + 2.0 / 8.0 * libm::sin(0.3) * 0.5;
        assert!((next.trailer_yaw() - expected).abs() < 1e-12);
        assert!(next.joint < s.joint);
    }

    #[test]
    fn constraint_scales_with_speed_inside_obstacles() {
        let env = env();
        let mut s = open_state(&env);
        // Back the trailer into the left boundary wall.
        s.x = 4.0;
        s.v = 2.0;
        let d = env.footprint_distance(&s);
        assert!(d > 0.0);
        assert!((env.constraint(&s) - d * 3.0).abs() < 1e-12);
        s.v = 0.0;
        assert!((env.constraint(&s) - d).abs() < 1e-12);
    }

    #[test]
    fn footprint_spacing_is_respected() {
        let env = env();
        let pts = &env.tractor_points;
        for k in 0..pts.len() {
            let (a, b) = (pts[k], pts[(k + 1) % pts.len()]);
            assert!(hypot(a.0 - b.0, a.1 - b.1) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn parked_pose_is_goal_and_feasible() {
        let env = env();
        let spot = env.grid.spots()[2];
        let back = env.cfg.trailer_front_overhang - 0.5 * env.cfg.trailer_length;
        let s = TrailerState {
            x: spot.x - back * cos(spot.heading),
            y: spot.y - back * sin(spot.heading),
            yaw: spot.heading,
            joint: 0.0,
            v: 0.0,
            wheel: 0.0,
            trailer_wheelbase: 8.0,
            spot: 2,
        };
        assert!(env.is_goal(&s));
        assert!(env.constraint(&s) < 0.0);
    }

    #[test]
    fn initial_states_are_collision_free() {
        let env = env();
        for (k, regime) in [InitRegime::Feasible, InitRegime::Wide].into_iter().enumerate() {
            let mut rng = stream(7, Stream::Init, k as u64);
            for _ in 0..50 {
                let s = env.sample_initial(regime, &mut rng).unwrap();
                assert!(env.constraint(&s) <= 0.0);
                if regime == InitRegime::Feasible {
                    assert_eq!(s.v, 0.0);
                }
                assert!((6.0..=10.0).contains(&s.trailer_wheelbase));
            }
        }
    }

    #[test]
    fn observation_layout() {
        let env = env();
        let s = open_state(&env);
        let mut xi = [0.0; 35];
        let mut rng = stream(1, Stream::Exogenous, 0);
        env.sample_noise(&mut rng, &mut xi);
        assert!(xi[3..].iter().all(|u| (-1.0..=1.0).contains(u)));
        let mut obs = alloc::vec![0.0; env.obs_dim()];
        env.observe(&s, &xi, &mut obs);
        assert!(obs.iter().all(|v| v.is_finite()));
        // Forward ray: relative velocity is minus the speed.
        assert!((obs[STATE_OBS + 32] + 2.0 / 5.0).abs() < 1e-12);
    }
}
