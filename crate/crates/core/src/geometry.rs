//! Planar geometry: polylines, oriented rectangles, frame transforms.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("polyline points {0} and {1} coincide")]
    CoincidentPoints(usize, usize),
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// `(sin, cos)` that is exact at the four axis directions, so 90° rotations
/// of a scene stay bit-exact through frame transforms.
pub fn sin_cos(a: f64) -> (f64, f64) {
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == FRAC_PI_2 {
        (1.0, 0.0)
    } else if a == -FRAC_PI_2 {
        (-1.0, 0.0)
    } else if a == PI || a == -PI {
        (0.0, -1.0)
    } else {
        a.sin_cos()
    }
}

/// Heading of the vector `(dx, dy)`, exact on axis directions.
pub fn heading(dx: f64, dy: f64) -> f64 {
    dy.atan2(dx)
}

pub fn dist(a: Point, b: Point) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        for i in 1..points.len() {
            if dist(points[i - 1], points[i]) <= 1e-9 {
                return Err(GeometryError::CoincidentPoints(i - 1, i));
            }
        }
        Ok(Self { points })
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Point and heading at arclength `s`, clamped to the ends.
    pub fn at(&self, s: f64) -> (Point, f64) {
        let mut acc = 0.0;
        let n = self.points.len();
        for i in 0..n - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let len = dist(a, b);
            if s <= acc + len || i == n - 2 {
                let t = ((s - acc) / len).clamp(0.0, 1.0);
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                return (p, heading(b[0] - a[0], b[1] - a[1]));
            }
            acc += len;
        }
        unreachable!("polyline has at least one segment")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub cx: f64,
    pub cy: f64,
    /// Extent along the local x axis.
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl OrientedRect {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, yaw: f64) -> Self {
        Self { cx, cy, w, h, yaw }
    }

    /// Unit axes (local x, local y) in world coordinates.
    fn axes(&self) -> [Point; 2] {
        let (s, c) = sin_cos(self.yaw);
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [Point; 4] {
        let [u, v] = self.axes();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)].into_iter().enumerate() {
            out[k] = [self.cx + a * u[0] + b * v[0], self.cy + a * u[1] + b * v[1]];
        }
        out
    }

    /// Point-in-rectangle test, boundary inclusive.
    pub fn contains(&self, p: Point) -> bool {
        let [u, v] = self.axes();
        let d = [p[0] - self.cx, p[1] - self.cy];
        (d[0] * u[0] + d[1] * u[1]).abs() <= self.w / 2.0 && (d[0] * v[0] + d[1] * v[1]).abs() <= self.h / 2.0
    }

    /// Radius of the circumscribed circle.
    pub fn radius(&self) -> f64 {
        0.5 * self.w.hypot(self.h)
    }
}

fn project(points: &[Point], axis: Point) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let d = p[0] * axis[0] + p[1] * axis[1];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

fn separated(a: &[Point], b: &[Point], axis: Point) -> bool {
    let (a0, a1) = project(a, axis);
    let (b0, b1) = project(b, axis);
    a1 < b0 || b1 < a0
}

/// Separating-axis overlap test; touching boxes overlap.
pub fn obb_overlap(a: &OrientedRect, b: &OrientedRect) -> bool {
    let reach = a.radius() + b.radius();
    if (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2) > reach * reach {
        return false;
    }
    let ca = a.corners();
    let cb = b.corners();
    for axis in a.axes().into_iter().chain(b.axes()) {
        if separated(&ca, &cb, axis) {
            return false;
        }
    }
    true
}

/// Whether the rectangle intersects the closed segment `p`–`q`.
pub fn obb_segment_overlap(r: &OrientedRect, p: Point, q: Point) -> bool {
    let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
    let reach = r.radius() + dist(p, q) / 2.0;
    if (r.cx - mid[0]).powi(2) + (r.cy - mid[1]).powi(2) > reach * reach {
        return false;
    }
    let corners = r.corners();
    let seg = [p, q];
    let d = [q[0] - p[0], q[1] - p[1]];
    let normal = [-d[1], d[0]];
    for axis in r.axes().into_iter().chain([normal]) {
        if separated(&corners, &seg, axis) {
            return false;
        }
    }
    true
}

/// Whether the rectangle touches any segment of the polyline.
pub fn obb_polyline_overlap(r: &OrientedRect, points: &[Point]) -> bool {
    points.windows(2).any(|w| obb_segment_overlap(r, w[0], w[1]))
}

pub fn world_to_ego_point(p: Point, ego: &Pose) -> Point {
    let (s, c) = sin_cos(ego.yaw);
    let dx = p[0] - ego.x;
    let dy = p[1] - ego.y;
    [c * dx + s * dy, -s * dx + c * dy]
}

pub fn ego_to_world_point(p: Point, ego: &Pose) -> Point {
    let (s, c) = sin_cos(ego.yaw);
    [ego.x + c * p[0] - s * p[1], ego.y + s * p[0] + c * p[1]]
}

pub fn world_to_ego(p: &Pose, ego: &Pose) -> Pose {
    let [x, y] = world_to_ego_point([p.x, p.y], ego);
    Pose::new(x, y, wrap_angle(p.yaw - ego.yaw))
}

pub fn ego_to_world(p: &Pose, ego: &Pose) -> Pose {
    let [x, y] = ego_to_world_point([p.x, p.y], ego);
    Pose::new(x, y, wrap_angle(p.yaw + ego.yaw))
}

fn perp_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return dist(p, a);
    }
    ((p[0] - a[0]) * d[1] - (p[1] - a[1]) * d[0]).abs() / len
}

/// Ramer–Douglas–Peucker simplification. Keeps both endpoints; every dropped
/// point lies within `epsilon` of the chord that replaced it.
pub fn rdp_simplify(points: &[Point], epsilon: f64) -> Vec<Point> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        let mut best = (0.0, 0);
        for i in lo + 1..hi {
            let d = perp_distance(points[i], points[lo], points[hi]);
            if d > best.0 {
                best = (d, i);
            }
        }
        if best.0 > epsilon {
            keep[best.1] = true;
            stack.push((lo, best.1));
            stack.push((best.1, hi));
        }
    }
    points.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdRect {
    pub rect: OrientedRect,
    pub id: usize,
}

/// One rectangle per segment: centred on the midpoint, `w` = segment
/// length, `h` = `width`, yaw = segment heading.
pub fn polyline_to_rects(points: &[Point], width: f64, id_base: usize) -> Vec<IdRect> {
    points
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (a, b) = (w[0], w[1]);
            IdRect {
                rect: OrientedRect::new(
                    (a[0] + b[0]) / 2.0,
                    (a[1] + b[1]) / 2.0,
                    dist(a, b),
                    width,
                    heading(b[0] - a[0], b[1] - a[1]),
                ),
                id: id_base + i,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub arclength: f64,
    pub distance: f64,
    pub heading: f64,
}

/// Closest point on a polyline. Ties go to the smaller arclength.
pub fn polyline_nearest(q: Point, points: &[Point]) -> Nearest {
    let mut best = Nearest {
        arclength: 0.0,
        distance: f64::INFINITY,
        heading: 0.0,
    };
    let mut acc = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let len = len2.sqrt();
        let t = if len2 > 0.0 {
            (((q[0] - a[0]) * d[0] + (q[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let foot = [a[0] + t * d[0], a[1] + t * d[1]];
        let dd = dist(q, foot);
        if dd < best.distance {
            best = Nearest {
                arclength: acc + t * len,
                distance: dd,
                heading: heading(d[0], d[1]),
            };
        }
        acc += len;
    }
    best
}

/// Cumulative arclength at each vertex.
pub fn cumulative_lengths(points: &[Point]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in points.windows(2) {
        acc += dist(w[0], w[1]);
        out.push(acc);
    }
    out
}
