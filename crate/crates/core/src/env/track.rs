//! Analytic U-shaped corridor.
//!
//! Two straight legs of length `leg_length` along the x axis, joined at
//! `x = leg_length` by a semicircular bend. The centerline starts at
//! `(0, 2R)`, runs in +x, turns clockwise around `(leg_length, R)` and ends
//! at the goal `(0, 0)`, where `R` is the bend's centerline radius. The
//! inner obstacle and the outer boundary are both level sets of the
//! distance to the segment `[(end_wall_x, R), (leg_length, R)]`, which keeps
//! the signed distance exact everywhere.

use core::f64::consts::PI;

use libm::{atan2, cos, hypot, sin};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UTrack {
    pub width: f64,
    pub leg_length: f64,
    /// Centerline radius of the bend.
    pub bend_radius: f64,
    /// Wall closing both leg ends behind the start and the goal.
    pub end_wall_x: f64,
}

impl Default for UTrack {
    fn default() -> Self {
        Self {
            width: 4.0,
            leg_length: 10.0,
            bend_radius: 3.0,
            end_wall_x: -1.5,
        }
    }
}

/// Position of a point relative to the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frenet {
    /// Arc length of the closest centerline point, measured from the start.
    pub s: f64,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: f64,
    /// Heading of the direction of travel at `s`.
    pub heading: f64,
}

impl UTrack {
    pub fn half_width(&self) -> f64 {
        0.5 * self.width
    }

    pub fn length(&self) -> f64 {
        2.0 * self.leg_length + PI * self.bend_radius
    }

    fn spine_distance(&self, x: f64, y: f64) -> f64 {
        let cx = x.clamp(self.end_wall_x, self.leg_length);
        hypot(x - cx, y - self.bend_radius)
    }

    /// Signed distance from a disc of `radius` centered at `(x, y)` to the
    /// walls: positive when the disc penetrates the inner obstacle, the
    /// outer boundary or the end wall.
    pub fn signed_distance(&self, x: f64, y: f64, radius: f64) -> f64 {
        let d = self.spine_distance(x, y);
        let r = self.bend_radius;
        let h = self.half_width();
        let inner = (r - h + radius) - d;
        let outer = d - (r + h - radius);
        let end = (self.end_wall_x + radius) - x;
        inner.max(outer).max(end)
    }

    pub fn frenet(&self, x: f64, y: f64) -> Frenet {
        let (l, r) = (self.leg_length, self.bend_radius);
        if x > l {
            let phi = atan2(y - r, x - l);
            Frenet {
                s: l + r * (0.5 * PI - phi),
                lateral: r - hypot(x - l, y - r),
                heading: phi - 0.5 * PI,
            }
        } else if y >= r {
            Frenet {
                s: x,
                lateral: y - 2.0 * r,
                heading: 0.0,
            }
        } else {
            Frenet {
                s: l + PI * r + (l - x),
                lateral: -y,
                heading: PI,
            }
        }
    }

    /// Point at arc length `s` shifted `lateral` to the left of travel.
    pub fn point(&self, s: f64, lateral: f64) -> (f64, f64, f64) {
        let (l, r) = (self.leg_length, self.bend_radius);
        if s <= l {
            (s, 2.0 * r + lateral, 0.0)
        } else if s <= l + PI * r {
            let phi = 0.5 * PI - (s - l) / r;
            let rad = r - lateral;
            (l + rad * cos(phi), r + rad * sin(phi), phi - 0.5 * PI)
        } else {
            let x = l - (s - l - PI * r);
            (x, -lateral, PI)
        }
    }

    /// Distance to the goal at the origin measured along the corridor.
    pub fn distance_to_goal(&self, x: f64, y: f64) -> f64 {
        let f = self.frenet(x, y);
        hypot(self.length() - f.s, f.lateral)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const R: f64 = 0.5;

    #[test]
    fn centerline_is_interior() {
        let t = UTrack::default();
        for s in [0.5, 5.0, 10.0, 12.0, 14.0, 20.0, 28.0] {
            let (x, y, _) = t.point(s, 0.0);
            assert!(t.signed_distance(x, y, R) < 0.0, "s = {s}");
            assert!((t.signed_distance(x, y, R) + 1.5).abs() < 1e-12 || s < 1.0);
        }
    }

    #[test]
    fn violation_surface_is_zero() {
        let t = UTrack::default();
        // Inner surface for the disc center lies 1.5 m from the spine.
        assert!(t.signed_distance(5.0, 3.0 + 1.5, R).abs() < 1e-12);
        assert!(t.signed_distance(5.0, 3.0 + 4.5, R).abs() < 1e-12);
        assert!(t.signed_distance(-1.0, 0.0, R).abs() < 1e-12);
    }

    #[test]
    fn penetration_of_inner_obstacle() {
        let t = UTrack::default();
        // 0.2 m beyond the inner-obstacle violation surface on a straight leg...
        assert!((t.signed_distance(5.0, 4.3, R) - 0.2).abs() < 1e-12);
        // ...and in the bend, radially.
        let (x, y, _) = t.point(10.0 + 1.5 * PI, 1.7);
        assert!((t.signed_distance(x, y, R) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn frenet_inverts_point() {
        let t = UTrack::default();
        for s in [1.0, 9.0, 11.0, 15.0, 19.0, 21.0, 29.0] {
            for lat in [-1.2, 0.0, 0.7] {
                let (x, y, h) = t.point(s, lat);
                let f = t.frenet(x, y);
                assert!((f.s - s).abs() < 1e-9, "s {s} lat {lat}: {f:?}");
                assert!((f.lateral - lat).abs() < 1e-9);
                assert!((f.heading - h).abs() < 1e-9);
            }
        }
        assert!(t.distance_to_goal(0.0, 0.0) < 1e-12);
    }
}
