//! Planar geometry helpers for the image-method tracer.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

/// A point or vector in the plane, in meters. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Self) -> f64 {
        (self - o).norm()
    }

    /// Direction angle in `[-pi, pi)`.
    pub fn angle(self) -> f64 {
        wrap_angle(self.y.atan2(self.x))
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        Self::new(self.x * c, self.y * c)
    }
}

/// Reflector/blocker segment. Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Wall {
    pub a: Point2,
    pub b: Point2,
}

impl Wall {
    pub fn new(a: Point2, b: Point2) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    /// Mirror image of `p` across the wall's supporting line.
    pub fn mirror(&self, p: Point2) -> Point2 {
        let d = self.b - self.a;
        let t = (p - self.a).dot(d) / d.dot(d);
        let foot = self.a + d * t;
        foot * 2.0 - p
    }

    /// Signed side of `p` relative to the supporting line.
    pub fn side(&self, p: Point2) -> f64 {
        (self.b - self.a).cross(p - self.a)
    }
}

impl From<[f64; 4]> for Wall {
    fn from(v: [f64; 4]) -> Self {
        Self::new(Point2::new(v[0], v[1]), Point2::new(v[2], v[3]))
    }
}

impl From<Wall> for [f64; 4] {
    fn from(w: Wall) -> Self {
        [w.a.x, w.a.y, w.b.x, w.b.y]
    }
}

/// Axis-aligned rectangle. Serialized as `[xmin, ymin, xmax, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn new(min: Point2, max: Point2) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

impl From<[f64; 4]> for Bounds {
    fn from(v: [f64; 4]) -> Self {
        Self::new(Point2::new(v[0], v[1]), Point2::new(v[2], v[3]))
    }
}

impl From<Bounds> for [f64; 4] {
    fn from(b: Bounds) -> Self {
        [b.min.x, b.min.y, b.max.x, b.max.y]
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Parameters `(t, u)` where `p + t (p2 - p)` meets `q + u (q2 - q)`, or
/// `None` for parallel segments.
pub fn intersect_params(p: Point2, p2: Point2, q: Point2, q2: Point2) -> Option<(f64, f64)> {
    let r = p2 - p;
    let s = q2 - q;
    let denom = r.cross(s);
    if denom.abs() < 1e-12 {
        return None;
    }
    let qp = q - p;
    Some((qp.cross(s) / denom, qp.cross(r) / denom))
}

/// Whether segment `p -> p2` crosses `wall`. Touching at the segment's own
/// endpoints (within `EPS` of the parameter range) does not count.
pub fn blocks(wall: &Wall, p: Point2, p2: Point2) -> bool {
    const EPS: f64 = 1e-9;
    match intersect_params(p, p2, wall.a, wall.b) {
        Some((t, u)) => t > EPS && t < 1.0 - EPS && (-EPS..=1.0 + EPS).contains(&u),
        None => false,
    }
}
