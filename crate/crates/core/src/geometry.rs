//! Plane geometry on the unit torus.
//!
//! All coordinates inside the engine live in `[0, 1)^2`; the physical domain
//! lengths enter only when distances are converted to micrometers. Every
//! difference of coordinates goes through the minimum-image rule so that
//! periodicity has a single source of truth.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    /// Wrap both components into `[0, 1)`.
    pub fn wrapped(self) -> Self {
        Vec2::new(wrap_unit(self.x), wrap_unit(self.y))
    }

    pub fn scale(self, s: f64) -> Self {
        Vec2::new(self.x * s, self.y * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Wrap a scalar into `[0, 1)`.
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer can round to exactly 1.0.
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Minimum-image difference on the unit torus, in `[-0.5, 0.5)`.
pub fn min_image(d: f64) -> f64 {
    d - d.round()
}

/// Minimum-image vector difference `a - b`.
pub fn min_image_vec(a: Vec2, b: Vec2) -> Vec2 {
    Vec2::new(min_image(a.x - b.x), min_image(a.y - b.y))
}

/// Physical distance between two wrapped points for domain lengths `(lx, ly)`.
pub fn periodic_distance(a: Vec2, b: Vec2, lx: f64, ly: f64) -> f64 {
    let d = min_image_vec(a, b);
    (d.x * lx).hypot(d.y * ly)
}

/// Midpoint of the shortest periodic segment from `a` to `b`, wrapped.
pub fn periodic_midpoint(a: Vec2, b: Vec2) -> Vec2 {
    (a + min_image_vec(b, a).scale(0.5)).wrapped()
}

/// Mean of wrapped points, unwrapped around the first entry, wrapped again.
/// The caller decides which point anchors the unwrap.
pub fn periodic_mean(points: &[Vec2]) -> Vec2 {
    assert!(!points.is_empty(), "periodic mean of no points");
    let anchor = points[0];
    let mut sx = 0.0;
    let mut sy = 0.0;
    for p in points {
        let d = min_image_vec(*p, anchor);
        sx += d.x;
        sy += d.y;
    }
    let n = points.len() as f64;
    (anchor + Vec2::new(sx / n, sy / n)).wrapped()
}

/// Signed shoelace area of a plane polygon (unwrapped coordinates).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

/// Circumcenter of a plane triangle. Returns `None` for (near-)degenerate
/// triangles where the denominator vanishes.
pub fn circumcenter(a: Vec2, b: Vec2, c: Vec2) -> Option<Vec2> {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let ex = c.x - a.x;
    let ey = c.y - a.y;
    let bl = dx * dx + dy * dy;
    let cl = ex * ex + ey * ey;
    let d = 2.0 * (dx * ey - dy * ex);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let x = a.x + (ey * bl - dy * cl) / d;
    let y = a.y + (dx * cl - ex * bl) / d;
    Some(Vec2::new(x, y))
}

/// Exact running sum of f64 values.
///
/// Keeps a nonoverlapping expansion of the partial sum (Shewchuk's
/// grow-expansion), so the rounded total is independent of the order in
/// which terms arrive. Vertex relabelings permute neighbor reductions; this
/// keeps those reductions bitwise reproducible.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    parts: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum { parts: Vec::new() }
    }

    pub fn add(&mut self, value: f64) {
        let mut x = value;
        let mut out = 0;
        for i in 0..self.parts.len() {
            let y = self.parts[i];
            let hi = x + y;
            let lo = {
                let virt = hi - x;
                (x - (hi - virt)) + (y - virt)
            };
            if lo != 0.0 {
                self.parts[out] = lo;
                out += 1;
            }
            x = hi;
        }
        self.parts.truncate(out);
        self.parts.push(x);
    }

    /// Correctly ordered total: components are nonoverlapping and stored in
    /// increasing magnitude, so summing in order is exact to one rounding.
    pub fn total(&self) -> f64 {
        self.parts.iter().sum()
    }
}
