//! Occupancy grid with exact signed distance and ray traversal.
//!
//! Text format: a header line `W H cell_size`, then `H` rows of `W`
//! characters: `#` occupied, `.` free, `P` free and part of a parking
//! target. The first row is the top of the map (largest y). Cell `(i, j)`
//! covers `[i·c, (i+1)·c] × [j·c, (j+1)·c]` in world coordinates.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{atan2, cos, floor, hypot, sin, sqrt};

use crate::error::{Error, Result};

/// A parking target extracted from a connected group of `P` cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParkingSpot {
    pub x: f64,
    pub y: f64,
    /// Direction pointing out of the spot through its open end.
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    occupied: Vec<bool>,
    spots: Vec<ParkingSpot>,
    /// Per cell, the cells of opposite occupancy that can be nearest to some
    /// point of the cell; flattened with `cand_start` offsets.
    cand: Vec<u32>,
    cand_start: Vec<u32>,
}

/// Per-ray distances and radial relative velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct RayScan {
    pub distances: Vec<f64>,
    pub relative_velocities: Vec<f64>,
}

impl OccupancyGrid {
    /// Build from an occupancy bitmap (row 0 = bottom) and `P` markers.
    pub fn from_cells(
        width: usize,
        height: usize,
        cell_size: f64,
        occupied: Vec<bool>,
        target: &[bool],
    ) -> Result<Self> {
        if width < 3 || height < 3 || !(cell_size > 0.0) {
            return Err(Error::GridFormat("grid must be at least 3x3 with positive cells".into()));
        }
        if occupied.len() != width * height || target.len() != width * height {
            return Err(Error::GridFormat("cell count does not match W x H".into()));
        }
        for i in 0..width {
            for j in 0..height {
                let border = i == 0 || j == 0 || i + 1 == width || j + 1 == height;
                if border && !occupied[j * width + i] {
                    return Err(Error::GridFormat(format!(
                        "boundary cell ({i}, {j}) is free; the world must be closed"
                    )));
                }
            }
        }
        let mut grid = Self {
            cell_size,
            width,
            height,
            occupied,
            spots: Vec::new(),
            cand: Vec::new(),
            cand_start: Vec::new(),
        };
        grid.spots = grid.extract_spots(target);
        grid.build_candidates();
        Ok(grid)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::GridFormat("missing header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::GridFormat(format!("header `{header}` is not `W H cell_size`")));
        }
        let bad = |f: &str| Error::GridFormat(format!("bad header field `{f}`"));
        let width: usize = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let height: usize = fields[1].parse().map_err(|_| bad(fields[1]))?;
        let cell_size: f64 = fields[2].parse().map_err(|_| bad(fields[2]))?;
        let mut occupied = vec![false; width * height];
        let mut target = vec![false; width * height];
        let mut rows = 0;
        for (r, line) in lines.enumerate() {
            if r >= height {
                return Err(Error::GridFormat("more rows than the header declares".into()));
            }
            let line = line.trim_end();
            if line.chars().count() != width {
                return Err(Error::GridFormat(format!(
                    "row {r} has {} cells, expected {width}",
                    line.chars().count()
                )));
            }
            let j = height - 1 - r;
            for (i, ch) in line.chars().enumerate() {
                match ch {
                    '#' => occupied[j * width + i] = true,
                    '.' => {}
                    'P' => target[j * width + i] = true,
                    other => {
                        return Err(Error::GridFormat(format!("unknown cell character `{other}`")))
                    }
                }
            }
            rows += 1;
        }
        if rows != height {
            return Err(Error::GridFormat(format!("expected {height} rows, found {rows}")));
        }
        Self::from_cells(width, height, cell_size, occupied, &target)
    }

    /// Render back to the text format.
    pub fn to_text(&self, targets: &[bool]) -> alloc::string::String {
        let mut out = format!("{} {} {}\n", self.width, self.height, self.cell_size);
        for j in (0..self.height).rev() {
            for i in 0..self.width {
                let k = j * self.width + i;
                out.push(if self.occupied[k] {
                    '#'
                } else if targets.get(k).copied().unwrap_or(false) {
                    'P'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn spots(&self) -> &[ParkingSpot] {
        &self.spots
    }

    pub fn world_width(&self) -> f64 {
        self.width as f64 * self.cell_size
    }

    pub fn world_height(&self) -> f64 {
        self.height as f64 * self.cell_size
    }

    pub fn is_occupied(&self, i: i64, j: i64) -> bool {
        if i < 0 || j < 0 || i >= self.width as i64 || j >= self.height as i64 {
            return true;
        }
        self.occupied[j as usize * self.width + i as usize]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.world_width() && y < self.world_height()
    }

    fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            floor(x / self.cell_size) as i64,
            floor(y / self.cell_size) as i64,
        )
    }

    fn cell_box(&self, k: usize) -> (f64, f64, f64, f64) {
        let c = self.cell_size;
        let (i, j) = ((k % self.width) as f64, (k / self.width) as f64);
        (i * c, j * c, (i + 1.0) * c, (j + 1.0) * c)
    }

    fn extract_spots(&self, target: &[bool]) -> Vec<ParkingSpot> {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut spots = Vec::new();
        for start in 0..w * h {
            if !target[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let (mut i0, mut j0, mut i1, mut j1) = (usize::MAX, usize::MAX, 0, 0);
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            while let Some(k) = stack.pop() {
                let (i, j) = (k % w, k / w);
                i0 = i0.min(i);
                j0 = j0.min(j);
                i1 = i1.max(i);
                j1 = j1.max(j);
                sx += i as f64 + 0.5;
                sy += j as f64 + 0.5;
                n += 1.0;
                let mut push = |ni: usize, nj: usize| {
                    let nk = nj * w + ni;
                    if target[nk] && !seen[nk] {
                        seen[nk] = true;
                        stack.push(nk);
                    }
                };
                if i > 0 {
                    push(i - 1, j);
                }
                if i + 1 < w {
                    push(i + 1, j);
                }
                if j > 0 {
                    push(i, j - 1);
                }
                if j + 1 < h {
                    push(i, j + 1);
                }
            }
            let c = self.cell_size;
            let (lx, ly) = ((i1 - i0 + 1) as f64 * c, (j1 - j0 + 1) as f64 * c);
            // The open end is the short side with more free cells in front.
            let free_run = |cells: &mut dyn Iterator<Item = (i64, i64)>| {
                cells.filter(|&(a, b)| !self.is_occupied(a, b)).count()
            };
            let (i0, j0, i1, j1) = (i0 as i64, j0 as i64, i1 as i64, j1 as i64);
            let heading = if lx >= ly {
                let right = free_run(&mut (j0..=j1).map(|b| (i1 + 1, b)));
                let left = free_run(&mut (j0..=j1).map(|b| (i0 - 1, b)));
                if right >= left {
                    0.0
                } else {
                    PI
                }
            } else {
                let up = free_run(&mut (i0..=i1).map(|a| (a, j1 + 1)));
                let down = free_run(&mut (i0..=i1).map(|a| (a, j0 - 1)));
                if up >= down {
                    0.5 * PI
                } else {
                    -0.5 * PI
                }
            };
            spots.push(ParkingSpot {
                x: sx / n * c,
                y: sy / n * c,
                heading,
                length: lx.max(ly),
                width: lx.min(ly),
            });
        }
        spots
    }

    /// Search square rings around each cell until no farther ring can hold
    /// a closer cell of the opposite kind.
    fn build_candidates(&mut self) {
        let (w, h) = (self.width as i64, self.height as i64);
        let n = self.width * self.height;
        let c = self.cell_size;
        self.cand_start = Vec::with_capacity(n + 1);
        self.cand_start.push(0);
        let mut found: Vec<(u32, f64)> = Vec::new();
        for k in 0..n {
            let (i, j) = ((k % self.width) as i64, (k / self.width) as i64);
            let kind = self.occupied[k];
            let cb = self.cell_box(k);
            let mut bound = f64::INFINITY;
            found.clear();
            for r in 0..w.max(h) {
                if (r - 1) as f64 * c > bound {
                    break;
                }
                let mut visit = |a: i64, b: i64| {
                    if a < 0 || b < 0 || a >= w || b >= h {
                        return;
                    }
                    let o = (b * w + a) as usize;
                    if self.occupied[o] != kind {
                        let ob = self.cell_box(o);
                        bound = bound.min(box_max_distance(cb, ob));
                        found.push((o as u32, box_min_distance(cb, ob)));
                    }
                };
                if r == 0 {
                    visit(i, j);
                    continue;
                }
                for a in i - r..=i + r {
                    visit(a, j - r);
                    visit(a, j + r);
                }
                for b in j - r + 1..j + r {
                    visit(i - r, b);
                    visit(i + r, b);
                }
            }
            for &(o, d) in &found {
                if d <= bound {
                    self.cand.push(o);
                }
            }
            self.cand_start.push(self.cand.len() as u32);
        }
    }

    /// Signed distance to the occupied region: negative clearance in free
    /// space, positive penetration depth inside obstacles. Points outside
    /// the grid are measured from the nearest boundary cell.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (i, j) = self.cell_of(x, y);
        let i = i.clamp(0, self.width as i64 - 1) as usize;
        let j = j.clamp(0, self.height as i64 - 1) as usize;
        let k = j * self.width + i;
        let (a, b) = (self.cand_start[k] as usize, self.cand_start[k + 1] as usize);
        let mut best = f64::INFINITY;
        for &o in &self.cand[a..b] {
            best = best.min(point_box_distance(x, y, self.cell_box(o as usize)));
        }
        if best == f64::INFINITY {
            // Grid entirely of one kind.
            best = 0.0;
        }
        let inside = self.occupied[k] || !self.contains(x, y);
        if inside {
            best
        } else {
            -best
        }
    }

    /// Distance along a ray to the first occupied cell, by exact grid
    /// traversal, clipped at `max_range`.
    pub fn ray_distance(&self, x: f64, y: f64, angle: f64, max_range: f64) -> Result<f64> {
        if !self.contains(x, y) {
            return Err(Error::OutsideGrid);
        }
        let c = self.cell_size;
        let (dx, dy) = (cos(angle), sin(angle));
        let (mut i, mut j) = self.cell_of(x, y);
        if self.is_occupied(i, j) {
            return Ok(0.0);
        }
        let axis = |p: f64, d: f64, cell: i64| -> (i64, f64, f64) {
            if d > 0.0 {
                (1, ((cell + 1) as f64 * c - p) / d, c / d)
            } else if d < 0.0 {
                (-1, (cell as f64 * c - p) / d, -c / d)
            } else {
                (0, f64::INFINITY, f64::INFINITY)
            }
        };
        let (si, mut tx, ddx) = axis(x, dx, i);
        let (sj, mut ty, ddy) = axis(y, dy, j);
        loop {
            let t = if tx < ty {
                i += si;
                let t = tx;
                tx += ddx;
                t
            } else {
                j += sj;
                let t = ty;
                ty += ddy;
                t
            };
            if t >= max_range {
                return Ok(max_range);
            }
            if self.is_occupied(i, j) {
                return Ok(t.max(0.0));
            }
        }
    }

    /// `n_rays` rays evenly spaced around `heading`. For the static world the
    /// relative velocity of a hit point is minus the agent velocity
    /// projected on the ray.
    pub fn raycast(
        &self,
        x: f64,
        y: f64,
        heading: f64,
        velocity: (f64, f64),
        n_rays: usize,
        max_range: f64,
    ) -> Result<RayScan> {
        let mut distances = Vec::with_capacity(n_rays);
        let mut relative_velocities = Vec::with_capacity(n_rays);
        for k in 0..n_rays {
            let angle = heading + 2.0 * PI * k as f64 / n_rays as f64;
            distances.push(self.ray_distance(x, y, angle, max_range)?);
            relative_velocities.push(-(velocity.0 * cos(angle) + velocity.1 * sin(angle)));
        }
        Ok(RayScan {
            distances,
            relative_velocities,
        })
    }

    /// Bearing from a point to a spot center, for diagnostics.
    pub fn bearing_to(&self, x: f64, y: f64, spot: &ParkingSpot) -> f64 {
        atan2(spot.y - y, spot.x - x)
    }

    /// Number of occupied cells.
    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Textual summary, handy in error messages.
    pub fn describe(&self) -> alloc::string::String {
        format!(
            "{}x{} cells of {} m, {} spots",
            self.width,
            self.height,
            self.cell_size.to_string(),
            self.spots.len()
        )
    }
}

fn point_box_distance(x: f64, y: f64, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> f64 {
    let dx = (x0 - x).max(0.0).max(x - x1);
    let dy = (y0 - y).max(0.0).max(y - y1);
    hypot(dx, dy)
}

fn box_min_distance(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let dx = (b.0 - a.2).max(a.0 - b.2).max(0.0);
    let dy = (b.1 - a.3).max(a.1 - b.3).max(0.0);
    sqrt(dx * dx + dy * dy)
}

/// Largest distance from a point of box `a` to box `b`; the distance to a
/// box is convex, so the maximum sits on a corner of `a`.
fn box_max_distance(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    [(a.0, a.1), (a.2, a.1), (a.0, a.3), (a.2, a.3)]
        .into_iter()
        .map(|(x, y)| point_box_distance(x, y, b))
        .fold(0.0, f64::max)
}

/// The shipped parking lot: four bays along the bottom wall and a few
/// pillars in the yard.
pub const DEFAULT_GRID: &str = include_str!("../../assets/parking_lot.grid");

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(w: usize, h: usize) -> (Vec<bool>, Vec<bool>) {
        let mut occ = vec![false; w * h];
        for i in 0..w {
            for j in 0..h {
                if i == 0 || j == 0 || i + 1 == w || j + 1 == h {
                    occ[j * w + i] = true;
                }
            }
        }
        (occ, vec![false; w * h])
    }

    /// Brute-force signed distance over every cell.
    fn sdf_oracle(g: &OccupancyGrid, x: f64, y: f64) -> f64 {
        let (i, j) = g.cell_of(x, y);
        let inside = g.is_occupied(i, j);
        let mut best = f64::INFINITY;
        for k in 0..g.width * g.height {
            if g.occupied[k] != inside {
                best = best.min(point_box_distance(x, y, g.cell_box(k)));
            }
        }
        if inside {
            best
        } else {
            -best
        }
    }

    #[test]
    fn parse_rejects_open_world() {
        let text = "3 3 1.0\n###\n#..\n###\n";
        assert!(matches!(OccupancyGrid::parse(text), Err(Error::GridFormat(_))));
        assert!(OccupancyGrid::parse("3 3\n###\n").is_err());
        assert!(OccupancyGrid::parse("3 3 1\n###\n#x#\n###\n").is_err());
    }

    #[test]
    fn parse_round_trips_text() {
        let text = "5 4 0.5\n#####\n#.P.#\n#...#\n#####\n";
        let g = OccupancyGrid::parse(text).unwrap();
        let mut targets = vec![false; 20];
        targets[2 * 5 + 2] = true;
        assert_eq!(g.to_text(&targets), text);
        assert_eq!(g.spots().len(), 1);
        let s = g.spots()[0];
        assert!((s.x - 1.25).abs() < 1e-12 && (s.y - 1.25).abs() < 1e-12);
    }

    #[test]
    fn signed_distance_matches_brute_force() {
        let g = OccupancyGrid::parse(DEFAULT_GRID).unwrap();
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..300 {
            let x = next() * g.world_width();
            let y = next() * g.world_height();
            let fast = g.signed_distance(x, y);
            let slow = sdf_oracle(&g, x, y);
            assert!((fast - slow).abs() < 1e-12, "({x}, {y}): {fast} vs {slow}");
        }
    }

    #[test]
    fn clearance_and_penetration() {
        let (occ, t) = boxed(10, 10);
        let g = OccupancyGrid::from_cells(10, 10, 1.0, occ, &t).unwrap();
        assert!((g.signed_distance(1.3, 5.0) + 0.3).abs() < 1e-12);
        assert!((g.signed_distance(0.9, 5.0) - 0.1).abs() < 1e-12);
        assert!(g.signed_distance(1.0, 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_interior_rays_reach_max_range() {
        let (occ, t) = boxed(200, 200);
        let g = OccupancyGrid::from_cells(200, 200, 0.5, occ, &t).unwrap();
        let scan = g.raycast(50.0, 50.0, 0.3, (0.0, 0.0), 32, 20.0).unwrap();
        assert!(scan.distances.iter().all(|&d| d == 20.0));
    }

    #[test]
    fn wall_along_axis() {
        let (mut occ, t) = boxed(20, 20);
        for j in 0..20 {
            occ[j * 20 + 7] = true;
        }
        let g = OccupancyGrid::from_cells(20, 20, 0.5, occ, &t).unwrap();
        // From the boundary between cells 1 and 2 the wall starts 5 cells on.
        let d = g.ray_distance(1.0, 5.1, 0.0, 20.0).unwrap();
        assert!((d - 2.5).abs() < 1e-12);
        assert!(g.ray_distance(-1.0, 5.0, 0.0, 20.0).is_err());
    }

    #[test]
    fn traversal_matches_fine_marching() {
        let g = OccupancyGrid::parse(DEFAULT_GRID).unwrap();
        let (x, y) = (20.3, 25.7);
        for k in 0..64 {
            let a = 2.0 * PI * k as f64 / 64.0 + 0.01;
            let d = g.ray_distance(x, y, a, 25.0).unwrap();
            let mut t = 0.0;
            let step = 1e-3;
            while t < 25.0 {
                let (cx, cy) = g.cell_of(x + t * cos(a), y + t * sin(a));
                if g.is_occupied(cx, cy) {
                    break;
                }
                t += step;
            }
            assert!((d - t.min(25.0)).abs() <= step + 1e-9, "angle {a}: {d} vs {t}");
        }
    }

    #[test]
    fn static_world_relative_velocity() {
        let (occ, t) = boxed(40, 40);
        let g = OccupancyGrid::from_cells(40, 40, 0.5, occ, &t).unwrap();
        let (v, h) = (2.0, 0.4);
        let scan = g.raycast(10.0, 10.0, h, (v * cos(h), v * sin(h)), 4, 20.0).unwrap();
        // Ray 0 points along the heading, ray 2 behind.
        assert!((scan.relative_velocities[0] + v).abs() < 1e-12);
        assert!(scan.relative_velocities[1].abs() < 1e-12);
        assert!((scan.relative_velocities[2] - v).abs() < 1e-12);
    }

    #[test]
    fn default_grid_has_four_spots() {
        let g = OccupancyGrid::parse(DEFAULT_GRID).unwrap();
        assert_eq!(g.spots().len(), 4);
        for s in g.spots() {
            assert!((s.heading - 0.5 * PI).abs() < 1e-12);
            assert!(g.signed_distance(s.x, s.y) < 0.0);
        }
    }
}
