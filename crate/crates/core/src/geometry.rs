//! Cubic Bezier geometry for text instances.
//!
//! Coordinates are image-normalized: valid ground truth lives in `[0, 1]^2`.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn midpoint(self, other: Point2) -> Point2 {
        Point2::new((self.x + other.x) * 0.5, (self.y + other.y) * 0.5)
    }

    /// `|dx| + |dy|`.
    pub fn l1(self, other: Point2) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
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

/// A cubic Bezier curve; control points are ordered in reading direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BezierCurve {
    pub control: [Point2; 4],
}

impl BezierCurve {
    pub const fn new(control: [Point2; 4]) -> Self {
        Self { control }
    }

    pub fn start(&self) -> Point2 {
        self.control[0]
    }

    pub fn end(&self) -> Point2 {
        self.control[3]
    }

    pub fn is_finite(&self) -> bool {
        self.control.iter().all(Point2::is_finite)
    }

    /// Adds `offsets[i]` to control point `i`.
    pub fn offset(&self, offsets: &[Point2; 4]) -> BezierCurve {
        let mut control = self.control;
        for (c, o) in control.iter_mut().zip(offsets) {
            *c = *c + *o;
        }
        BezierCurve { control }
    }

    /// Same geometry traversed in the opposite direction.
    pub fn reversed(&self) -> BezierCurve {
        let [a, b, c, d] = self.control;
        BezierCurve::new([d, c, b, a])
    }

    /// Bernstein-form evaluation without the range check.
    pub(crate) fn point_at(&self, t: f64) -> Point2 {
        let [w0, w1, w2, w3] = bernstein(t);
        let [p0, p1, p2, p3] = self.control;
        Point2::new(
            w0 * p0.x + w1 * p1.x + w2 * p2.x + w3 * p3.x,
            w0 * p0.y + w1 * p1.y + w2 * p2.y + w3 * p3.y,
        )
    }
}

/// Cubic Bernstein basis weights at `t`.
pub fn bernstein(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t]
}

/// Ground-truth text instance: boundary curves plus transcript.
///
/// Transcript entries are class indices in `[0, C)`; index `C` is the
/// background/blank class and never appears here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: u64,
    pub top: BezierCurve,
    pub bottom: BezierCurve,
    pub transcript: Vec<usize>,
}

impl TextInstance {
    pub fn center(&self) -> BezierCurve {
        center_curve(&self.top, &self.bottom)
    }

    /// Checks the instance invariants against an alphabet of `alphabet_size`
    /// foreground classes.
    pub fn validate(&self, alphabet_size: usize) -> Result<()> {
        if self.transcript.is_empty() {
            return Err(Error::Empty("transcript"));
        }
        if let Some(&c) = self.transcript.iter().find(|&&c| c >= alphabet_size) {
            return Err(invalid(
                "transcript",
                format!("class {c} outside alphabet of size {alphabet_size}"),
            ));
        }
        if !self.top.is_finite() || !self.bottom.is_finite() {
            return Err(Error::NonFinite(format!("instance {} control points", self.id)));
        }
        Ok(())
    }
}

/// Center line of a text instance: control-point-wise midpoint of the boundaries.
pub fn center_curve(top: &BezierCurve, bottom: &BezierCurve) -> BezierCurve {
    let mut control = [Point2::default(); 4];
    for (i, c) in control.iter_mut().enumerate() {
        *c = top.control[i].midpoint(bottom.control[i]);
    }
    BezierCurve { control }
}

pub fn eval_bezier(curve: &BezierCurve, t: f64) -> Result<Point2> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid("t", format!("{t} is outside [0, 1]")));
    }
    Ok(curve.point_at(t))
}

/// Samples `count` points at parameters `k / (count - 1)`.
pub fn sample_uniform(curve: &BezierCurve, count: usize) -> Result<Vec<Point2>> {
    if count < 2 {
        return Err(invalid("count", format!("need at least 2 samples, got {count}")));
    }
    let last = (count - 1) as f64;
    Ok((0..count).map(|k| curve.point_at(k as f64 / last)).collect())
}

/// Per-axis absolute distances between corresponding control points.
///
/// Returns `(D_x[i], D_y[i])` for each of the four control points.
pub fn control_point_distances(center: &BezierCurve, top: &BezierCurve) -> [(f64, f64); 4] {
    let mut out = [(0.0, 0.0); 4];
    for (i, d) in out.iter_mut().enumerate() {
        let (c, t) = (center.control[i], top.control[i]);
        *d = ((t.x - c.x).abs(), (t.y - c.y).abs());
    }
    out
}
