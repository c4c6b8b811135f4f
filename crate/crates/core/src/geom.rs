//! Rotated rectangles: restoration from per-pixel geometry, convex clipping,
//! IoU and greedy non-maximum suppression.
//!
//! Coordinates are image pixels with x to the right and y down. A rectangle's
//! vertices are `p0..p3`, starting top-left and running clockwise on screen.
//! `theta` is counter-clockwise positive and lives in `(-pi/2, pi/2)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate geometry: width {width}, height {height}")]
    Degenerate { width: f64, height: f64 },
    #[error("negative or non-finite edge distance {0:?}")]
    BadDistance([f64; 4]),
    #[error("not a rectangle: {0}")]
    NotRectangle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// `[[cos t, -sin t], [sin t, cos t]]`.
pub fn rotation_matrix(theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

fn apply(m: [[f64; 2]; 2], p: Point) -> Point {
    Point::new(m[0][0] * p.x + m[0][1] * p.y, m[1][0] * p.x + m[1][1] * p.y)
}

/// Edge distances `(top, right, bottom, left)` in pixels.
pub type EdgeDistances = [f64; 4];

/// Geometry predicted at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGeometry {
    pub point: Point,
    pub distances: EdgeDistances,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedRect {
    pub vertices: [Point; 4],
    pub theta: f64,
    #[serde(default)]
    pub score: f64,
}

/// Solve `M(theta) v = rhs` for `v`.
fn unrotate(theta: f64, rhs: Point) -> Point {
    apply(rotation_matrix(-theta), rhs)
}

/// Rebuilds the rectangle a pixel belongs to from its edge distances and
/// rotation. The auxiliary frame has its origin at `p3` with axes parallel to
/// the image axes; in that frame the rotated-back rectangle spans
/// `[0, ld + rd] x [-(td + bd), 0]`.
pub fn restore_rect(g: &PixelGeometry) -> Result<RotatedRect, GeomError> {
    let [td, rd, bd, ld] = g.distances;
    if g.distances.iter().any(|d| !d.is_finite() || *d < 0.0) || !g.theta.is_finite() {
        return Err(GeomError::BadDistance(g.distances));
    }
    let (width, height) = (ld + rd, td + bd);
    if width <= 0.0 || height <= 0.0 {
        return Err(GeomError::Degenerate { width, height });
    }
    let local = unrotate(g.theta, Point::new(ld, -bd));
    let p3 = g.point.sub(local);
    let corner = |x: f64, y: f64| unrotate(g.theta, Point::new(x, y)).add(p3);
    Ok(RotatedRect {
        vertices: [corner(0.0, -height), corner(width, -height), corner(width, 0.0), p3],
        theta: g.theta,
        score: 0.0,
    })
}

impl RotatedRect {
    /// Rectangle of the given size centred at `center`, rotated by `theta`.
    pub fn from_center(center: Point, width: f64, height: f64, theta: f64) -> Self {
        let half = Point::new(width / 2.0, -height / 2.0);
        let corner = |x: f64, y: f64| unrotate(theta, Point::new(x, y).sub(half)).add(center);
        RotatedRect {
            vertices: [corner(0.0, -height), corner(width, -height), corner(width, 0.0), corner(0.0, 0.0)],
            theta,
            score: 0.0,
        }
    }

    /// Axis-aligned box with upper-left corner `(x, y)`.
    pub fn from_axis_aligned(x: f64, y: f64, w: f64, h: f64) -> Self {
        RotatedRect {
            vertices: [Point::new(x, y), Point::new(x + w, y), Point::new(x + w, y + h), Point::new(x, y + h)],
            theta: 0.0,
            score: 0.0,
        }
    }

    /// Builds a rectangle from four vertices in `p0..p3` order, deriving theta
    /// from the `p0 -> p1` edge.
    pub fn from_vertices(vertices: [Point; 4]) -> Self {
        let e = vertices[1].sub(vertices[0]);
        RotatedRect { vertices, theta: (-e.y).atan2(e.x), score: 0.0 }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Length of the `p0 -> p1` edge.
    pub fn width(&self) -> f64 {
        self.vertices[1].sub(self.vertices[0]).norm()
    }

    /// Length of the `p0 -> p3` edge.
    pub fn height(&self) -> f64 {
        self.vertices[3].sub(self.vertices[0]).norm()
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices).abs()
    }

    pub fn center(&self) -> Point {
        let s = self.vertices.iter().fold(Point::default(), |acc, p| acc.add(*p));
        Point::new(s.x / 4.0, s.y / 4.0)
    }

    /// Length of whichever side runs closer to the image's vertical axis.
    pub fn vertical_extent(&self) -> f64 {
        let side_w = self.vertices[1].sub(self.vertices[0]);
        let side_h = self.vertices[3].sub(self.vertices[0]);
        if side_w.y.abs() * side_h.norm() > side_h.y.abs() * side_w.norm() {
            side_w.norm()
        } else {
            side_h.norm()
        }
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b, c, d), p| {
            (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y))
        })
    }

    /// Perpendicular distances `(top, right, bottom, left)` from `p` to this
    /// rectangle's edges, measured in the frame defined by `self.theta`.
    /// Values are negative on the outer side of an edge.
    pub fn distances_from(&self, p: Point) -> EdgeDistances {
        let local = apply(rotation_matrix(self.theta), p.sub(self.vertices[3]));
        let (ld, bd) = (local.x, -local.y);
        [self.height() - bd, self.width() - ld, bd, ld]
    }

    /// Inclusive point-in-rectangle test.
    pub fn contains(&self, p: Point) -> bool {
        self.distances_from(p).iter().all(|d| *d >= 0.0)
    }

    /// Checks the rectangle invariants at absolute/relative tolerance `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), GeomError> {
        let v = &self.vertices;
        if v.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) || !self.theta.is_finite() {
            return Err(GeomError::NotRectangle("non-finite coordinate".into()));
        }
        let (w, h) = (self.width(), self.height());
        if w <= tol || h <= tol {
            return Err(GeomError::Degenerate { width: w, height: h });
        }
        let opposite_w = v[2].sub(v[3]).norm();
        let opposite_h = v[2].sub(v[1]).norm();
        if (w - opposite_w).abs() > tol * w.max(1.0) || (h - opposite_h).abs() > tol * h.max(1.0) {
            return Err(GeomError::NotRectangle(format!("opposite sides differ: {w}/{opposite_w}, {h}/{opposite_h}")));
        }
        for i in 0..4 {
            let a = v[(i + 1) % 4].sub(v[i]);
            let b = v[(i + 3) % 4].sub(v[i]);
            let cos = a.dot(b) / (a.norm() * b.norm());
            if cos.abs() > tol {
                return Err(GeomError::NotRectangle(format!("corner {i} not square (cos {cos})")));
            }
        }
        let derived = RotatedRect::from_vertices(self.vertices).theta;
        if angle_diff(derived, self.theta).abs() > tol {
            return Err(GeomError::NotRectangle(format!("theta {} inconsistent with vertices ({derived})", self.theta)));
        }
        Ok(())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let mut r = *self;
        for p in &mut r.vertices {
            p.x += dx;
            p.y += dy;
        }
        r
    }

    /// Reflection about the vertical line `x = image_width / 2`. Theta is
    /// negated and vertices are relabelled so `p0` stays top-left.
    pub fn mirror_x(&self, image_width: f64) -> Self {
        let m = |p: Point| Point::new(image_width - p.x, p.y);
        let v = &self.vertices;
        RotatedRect { vertices: [m(v[1]), m(v[0]), m(v[3]), m(v[2])], theta: -self.theta, score: self.score }
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
    if d > std::f64::consts::PI {
        d - 2.0 * std::f64::consts::PI
    } else {
        d
    }
}

/// Shoelace signed area; positive for clockwise-on-screen order with y down.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum::<f64>() / 2.0
}

fn oriented(poly: &[Point]) -> Vec<Point> {
    let mut v = poly.to_vec();
    if polygon_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

/// Sutherland-Hodgman clipping of `subject` against the convex polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let clip = oriented(clip);
    let mut output = oriented(subject);
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let edge = b.sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

pub fn polygon_intersection_area(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return 0.0;
    }
    let poly = clip_convex(&a.vertices, &b.vertices);
    if poly.len() < 3 {
        return 0.0;
    }
    polygon_area(&poly).abs()
}

pub fn iou(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let inter = polygon_intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy NMS: indices of kept boxes in descending score order (ties keep
/// input order). A box is kept when its IoU with every kept box is at most
/// `iou_threshold`.
pub fn nms_indices(boxes: &[RotatedRect], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(boxes: &[RotatedRect], iou_threshold: f64) -> Vec<RotatedRect> {
    nms_indices(boxes, iou_threshold).into_iter().map(|i| boxes[i]).collect()
}
