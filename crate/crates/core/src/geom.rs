//! Planar points and the handful of vector operations the rest of the crate needs.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_polar(r: f64, angle: f64) -> Self {
        Self::new(r * angle.cos(), r * angle.sin())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub(crate) fn to_robust(self) -> robust::Coord<f64> {
        robust::Coord {
            x: self.x,
            y: self.y,
        }
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Area of the triangle spanned by three points.
pub fn triangle_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * (b - a).cross(c - a).abs()
}

/// Circumcenter and circumradius of a non-degenerate triangle.
///
/// Returns `None` when the three points are (numerically) collinear.
pub fn circumcircle(a: Point2, b: Point2, c: Point2) -> Option<(Point2, f64)> {
    let ba = b - a;
    let ca = c - a;
    let d = 2.0 * ba.cross(ca);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let bl = ba.norm_sq();
    let cl = ca.norm_sq();
    let ux = (ca.y * bl - ba.y * cl) / d;
    let uy = (ba.x * cl - ca.x * bl) / d;
    let center = Point2::new(a.x + ux, a.y + uy);
    Some((center, ux.hypot(uy)))
}

/// `|d|^alpha` computed as `exp(alpha * ln d)`, with distances below `1e-300`
/// mapped to zero.
#[inline]
pub fn pow_dist(d: f64, alpha: f64) -> f64 {
    if d < 1e-300 {
        0.0
    } else {
        (alpha * d.ln()).exp()
    }
}
