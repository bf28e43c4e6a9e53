//! Planar geometry shared by the simulator, rasteriser and scorer.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Rectangle with arbitrary heading. `half_length` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, heading: f64, half_length: f64, half_width: f64) -> Self {
        Self {
            center,
            heading,
            half_length,
            half_width,
        }
    }

    pub fn axes(&self) -> [Vec2; 2] {
        let u = Vec2::from_angle(self.heading);
        [u, u.perp()]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, v] = self.axes();
        let (a, b) = (u * self.half_length, v * self.half_width);
        let c = self.center;
        [c + a + b, c - a + b, c - a - b, c + a - b]
    }

    /// Closed containment test.
    pub fn contains(&self, p: Vec2) -> bool {
        let [u, v] = self.axes();
        let d = p - self.center;
        d.dot(u).abs() <= self.half_length && d.dot(v).abs() <= self.half_width
    }

    fn project(&self, axis: Vec2) -> (f64, f64) {
        let c = self.center.dot(axis);
        let [u, v] = self.axes();
        let r = self.half_length * u.dot(axis).abs() + self.half_width * v.dot(axis).abs();
        (c - r, c + r)
    }

    /// Separating-axis overlap test. Touching rectangles count as overlapping.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (a0, a1) = self.project(axis);
            let (b0, b1) = other.project(axis);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
        true
    }

    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let cs = self.corners();
        let mut lo = cs[0];
        let mut hi = cs[0];
        for c in &cs[1..] {
            lo = Vec2::new(lo.x.min(c.x), lo.y.min(c.y));
            hi = Vec2::new(hi.x.max(c.x), hi.y.max(c.y));
        }
        (lo, hi)
    }
}

/// Position of a point relative to a polyline: arc length of the foot point
/// and signed lateral offset (positive to the left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frenet {
    pub s: f64,
    pub lateral: f64,
}

/// Polyline with cached cumulative arc length. The first and last segments
/// are treated as extending to infinity when projecting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec2>", try_from = "Vec<Vec2>")]
pub struct Polyline {
    points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs two points");
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            let last = *cum.last().expect("non-empty");
            cum.push(last + (w[1] - w[0]).norm());
        }
        Self { points, cum }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().expect("non-empty")
    }

    pub fn project(&self, p: Vec2) -> Frenet {
        let last = self.points.len() - 2;
        let mut best = (f64::INFINITY, Frenet { s: 0.0, lateral: 0.0 });
        for k in 0..=last {
            let a = self.points[k];
            let seg = self.points[k + 1] - a;
            let len2 = seg.dot(seg);
            if len2 == 0.0 {
                continue;
            }
            let mut u = (p - a).dot(seg) / len2;
            if k > 0 {
                u = u.max(0.0);
            }
            if k < last {
                u = u.min(1.0);
            }
            let foot = a + seg * u;
            let d = (p - foot).norm();
            if d < best.0 {
                let len = len2.sqrt();
                let side = seg.cross(p - a).signum();
                best = (
                    d,
                    Frenet {
                        s: self.cum[k] + u * len,
                        lateral: if side < 0.0 { -d } else { d },
                    },
                );
            }
        }
        best.1
    }

    /// Point and tangent heading at arc length `s`, extrapolating linearly past either end.
    pub fn sample(&self, s: f64) -> (Vec2, f64) {
        let n = self.points.len();
        let k = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let a = self.points[k];
        let seg = self.points[k + 1] - a;
        let len = (self.cum[k + 1] - self.cum[k]).max(1e-12);
        let u = (s - self.cum[k]) / len;
        (a + seg * u, seg.angle())
    }

    /// Largest discrete (Menger) curvature over consecutive point triples.
    pub fn max_curvature(&self) -> f64 {
        self.points
            .windows(3)
            .map(|w| menger_curvature(w[0], w[1], w[2]))
            .fold(0.0, f64::max)
    }
}

impl From<Polyline> for Vec<Vec2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl TryFrom<Vec<Vec2>> for Polyline {
    type Error = String;

    fn try_from(points: Vec<Vec2>) -> Result<Self, Self::Error> {
        if points.len() < 2 || points.iter().any(|p| !p.is_finite()) {
            return Err(format!("polyline needs at least two finite points, got {}", points.len()));
        }
        Ok(Polyline::new(points))
    }
}

/// Curvature of the circle through three points; zero for degenerate triples.
pub fn menger_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let denom = (b - a).norm() * (c - b).norm() * (c - a).norm();
    if denom < 1e-12 {
        return 0.0;
    }
    2.0 * (b - a).cross(c - b).abs() / denom
}

/// Axis-aligned bird's-eye-view window. Lateral extent is centred on the ego,
/// longitudinal extent is shifted forward so a 4 s horizon at the highest
/// speed limit stays inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevWindow {
    pub x_min: f64,
    pub y_min: f64,
    pub size: f64,
}

pub const BEV_WINDOW: BevWindow = BevWindow {
    x_min: -4.0,
    y_min: -32.0,
    size: 64.0,
};

impl BevWindow {
    pub fn x_max(&self) -> f64 {
        self.x_min + self.size
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.size
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max() && p.y >= self.y_min && p.y <= self.y_max()
    }

    /// Distance by which `p` lies outside the window (zero inside).
    pub fn excess(&self, p: Vec2) -> f64 {
        let dx = (self.x_min - p.x).max(p.x - self.x_max()).max(0.0);
        let dy = (self.y_min - p.y).max(p.y - self.y_max()).max(0.0);
        dx.hypot(dy)
    }
}

/// Square grid of `n x n` cells over a window. Cell `(i, j)` spans the
/// `i`-th longitudinal and `j`-th lateral interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub window: BevWindow,
    pub n: usize,
}

impl Grid {
    pub fn cell_size(&self) -> f64 {
        self.window.size / self.n as f64
    }

    pub fn center(&self, i: usize, j: usize) -> Vec2 {
        let c = self.cell_size();
        Vec2::new(
            self.window.x_min + (i as f64 + 0.5) * c,
            self.window.y_min + (j as f64 + 0.5) * c,
        )
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let c = self.cell_size();
        let fi = ((p.x - self.window.x_min) / c).floor();
        let fj = ((p.y - self.window.y_min) / c).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.n as f64 || fj >= self.n as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Index range of cells whose centres may fall inside `[lo, hi]`.
    pub fn cell_range(&self, lo: Vec2, hi: Vec2) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let c = self.cell_size();
        let to_idx = |v: f64, min: f64| ((v - min) / c - 0.5).ceil();
        let to_idx_hi = |v: f64, min: f64| ((v - min) / c - 0.5).floor();
        let i0 = to_idx(lo.x, self.window.x_min).max(0.0);
        let j0 = to_idx(lo.y, self.window.y_min).max(0.0);
        let i1 = to_idx_hi(hi.x, self.window.x_min).min(self.n as f64 - 1.0);
        let j1 = to_idx_hi(hi.y, self.window.y_min).min(self.n as f64 - 1.0);
        if i1 < i0 || j1 < j0 {
            return None;
        }
        Some((i0 as usize..i1 as usize + 1, j0 as usize..j1 as usize + 1))
    }
}
