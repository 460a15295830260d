//! Benchmark environments.
//!
//! Steering angles are positive to the right: a positive wheel angle turns
//! a forward-moving vehicle clockwise.

pub mod grid;
pub mod rover;
pub mod track;
pub mod trailer;
pub mod wall;

use core::f64::consts::PI;

pub use grid::{OccupancyGrid, ParkingSpot, RayScan};
pub use rover::{Rover, RoverConfig, RoverState};
pub use track::UTrack;
pub use trailer::{TractorTrailer, TrailerConfig, TrailerState};
pub use wall::{WallConfig, WallEnv, WallState};

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = libm::fmod(a + PI, 2.0 * PI);
    if a <= 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

/// Velocity update that cannot reverse direction within one step: braking
/// stops the vehicle at zero.
pub(crate) fn integrate_speed(v: f64, accel: f64, dt: f64, lo: f64, hi: f64) -> f64 {
    let next = v + accel * dt;
    let next = if (v > 0.0 && next < 0.0) || (v < 0.0 && next > 0.0) {
        0.0
    } else {
        next
    };
    next.clamp(lo, hi)
}

/// Brake at `decel` against the direction of motion.
pub(crate) fn brake(v: f64, decel: f64) -> f64 {
    if v.abs() < 1e-9 {
        0.0
    } else {
        -v.signum() * decel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, -1.0, 0.0, 1.0, PI, 4.0, 10.0] {
            let w = wrap_angle(a);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!((libm::sin(w) - libm::sin(a)).abs() < 1e-12);
            assert!((libm::cos(w) - libm::cos(a)).abs() < 1e-12);
        }
    }

    #[test]
    fn braking_stops_at_zero() {
        assert_eq!(integrate_speed(0.3, -1.0, 0.5, -1.0, 1.0), 0.0);
        assert_eq!(integrate_speed(-0.3, 1.0, 0.5, -1.0, 1.0), 0.0);
        assert_eq!(integrate_speed(0.0, -1.0, 0.5, -1.0, 1.0), -0.5);
        assert_eq!(integrate_speed(0.9, 1.0, 0.5, -1.0, 1.0), 1.0);
    }
}
