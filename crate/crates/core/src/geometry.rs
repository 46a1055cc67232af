//! Planar points and convex polygons.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Tolerance used for boundary membership.
pub const BOUNDARY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
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

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Unit vector, or zero for a zero vector.
    pub fn unit(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::default()
        }
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }

    /// Clamps both coordinates into `[0, 1]`.
    pub fn clamp_unit(self) -> Vec2 {
        Vec2::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }

    /// Scales the vector down so its norm does not exceed `max`.
    pub fn clamp_norm(self, max: f64) -> Vec2 {
        let n = self.norm();
        if n > max {
            self * (max / n)
        } else {
            self
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
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

/// Convex polygon with counterclockwise vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConvexPolygon {
    pub vertices: Vec<Vec2>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        Self { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Edge `i` runs from vertex `i` to vertex `i + 1`.
    pub fn edge(&self, i: usize) -> (Vec2, Vec2) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n])
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        (0..self.vertices.len()).map(|i| self.edge(i))
    }

    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
    }

    /// Area centroid.
    pub fn centroid(&self) -> Vec2 {
        let area = self.signed_area();
        let (mut cx, mut cy) = (0.0, 0.0);
        for (a, b) in self.edges() {
            let c = a.cross(b);
            cx += (a.x + b.x) * c;
            cy += (a.y + b.y) * c;
        }
        Vec2::new(cx / (6.0 * area), cy / (6.0 * area))
    }

    pub fn is_convex_ccw(&self) -> bool {
        let n = self.vertices.len();
        n >= 3
            && (0..n).all(|i| {
                let (a, b) = self.edge(i);
                let c = self.vertices[(i + 2) % n];
                (b - a).cross(c - b) > 0.0
            })
    }

    /// Closed membership with a small tolerance on the boundary.
    pub fn contains(&self, p: Vec2) -> bool {
        self.edges().all(|(a, b)| {
            let e = b - a;
            e.cross(p - a) >= -BOUNDARY_EPS * e.norm()
        })
    }

    pub fn contains_strict(&self, p: Vec2) -> bool {
        self.edges().all(|(a, b)| {
            let e = b - a;
            e.cross(p - a) > BOUNDARY_EPS * e.norm()
        })
    }

    /// Signed distance from `p` to the supporting line of edge `i`; positive
    /// on the interior side.
    pub fn edge_distance(&self, i: usize, p: Vec2) -> f64 {
        let (a, b) = self.edge(i);
        let e = b - a;
        e.cross(p - a) / e.norm()
    }

    /// Distance from the centroid to the nearest edge line, a lower bound on
    /// the inscribed radius.
    pub fn inradius_bound(&self) -> f64 {
        let c = self.centroid();
        (0..self.len())
            .map(|i| self.edge_distance(i, c))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = Vec2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Vec2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        (lo, hi)
    }

    /// Euclidean distance between two convex polygons; zero when they touch
    /// or overlap.
    pub fn distance_to(&self, other: &ConvexPolygon) -> f64 {
        if self.vertices.iter().any(|&v| other.contains(v))
            || other.vertices.iter().any(|&v| self.contains(v))
        {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for (a, b) in self.edges() {
            for (c, d) in other.edges() {
                best = best.min(segment_distance(a, b, c, d));
            }
        }
        best
    }

    /// Closest point of the closed polygon to `p`.
    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        if self.contains(p) {
            return p;
        }
        let mut best = (f64::INFINITY, p);
        for (a, b) in self.edges() {
            let q = closest_on_segment(p, a, b);
            let d = q.dist(p);
            if d < best.0 {
                best = (d, q);
            }
        }
        best.1
    }
}

pub fn closest_on_segment(p: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let e = b - a;
    let len2 = e.dot(e);
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(e) / len2).clamp(0.0, 1.0);
    a + e * t
}

fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    if d1 == 0.0 && d2 == 0.0 {
        // collinear: overlap of projections onto the common line
        let dir = b - a;
        let (ta, tb) = (0.0, dir.dot(dir));
        let (tc, td) = (dir.dot(c - a), dir.dot(d - a));
        return tc.min(td) <= tb.max(ta) && tc.max(td) >= ta.min(tb);
    }
    d1 * d2 <= 0.0 && d3 * d4 <= 0.0
}

pub fn segment_distance(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    [
        closest_on_segment(a, c, d).dist(a),
        closest_on_segment(b, c, d).dist(b),
        closest_on_segment(c, a, b).dist(c),
        closest_on_segment(d, a, b).dist(d),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// Convex hull (Andrew's monotone chain), counterclockwise, without
/// collinear points.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if (b - a).cross(p - b) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Points at arc-length spacing `step` along a polyline, always including
/// both endpoints. Consecutive output points are at most `step` apart.
pub fn resample_polyline(points: &[Vec2], step: f64) -> Vec<Vec2> {
    assert!(step > 0.0);
    let mut out = Vec::new();
    let Some(&first) = points.first() else {
        return out;
    };
    out.push(first);
    // distance travelled along the current segment since the last emitted point
    let mut carry = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = a.dist(b);
        if len == 0.0 {
            continue;
        }
        let mut s = step - carry;
        while s <= len + 1e-12 {
            out.push(a.lerp(b, (s / len).min(1.0)));
            s += step;
        }
        carry = len - (s - step);
    }
    let last = *points.last().unwrap();
    if out.last().unwrap().dist(last) > 1e-12 {
        out.push(last);
    } else {
        *out.last_mut().unwrap() = last;
    }
    out
}
