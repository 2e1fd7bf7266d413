//! Distance queries between segments, capsules and axis-aligned boxes.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Closest points between segments `[p0, p1]` and `[q0, q1]`.
///
/// Returns `(s, t, distance)` with the closest points at `p0 + s(p1 − p0)`
/// and `q0 + t(q1 − q0)`.
pub fn segment_segment(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> (f64, f64, f64) {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-24;

    let (s, t) = if a <= eps && e <= eps {
        (0.0, 0.0)
    } else if a <= eps {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > eps * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    let cp = p0 + d1 * s;
    let cq = q0 + d2 * t;
    (s, t, (cp - cq).norm())
}

/// Parameter and distance of the point on `[a, b]` closest to `p`.
pub fn point_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> (f64, f64) {
    let d = b - a;
    let len2 = d.norm_squared();
    let t = if len2 <= 1e-24 { 0.0 } else { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) };
    (t, (p - (a + d * t)).norm())
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: Vec3,
    pub half_extents: Vec3,
}

impl Aabb {
    pub fn new(center: Vec3, half_extents: Vec3) -> Self {
        Self { center, half_extents }
    }

    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let q = (p - self.center).abs() - self.half_extents;
        let outside = q.map(|v| v.max(0.0)).norm();
        let inside = q.max().min(0.0);
        outside + inside
    }

    /// Outward unit direction of steepest increase of the signed distance.
    /// Inside the box this is the normal of the nearest face; ties go to the
    /// lowest axis index.
    pub fn outward_normal(&self, p: &Vec3) -> Vec3 {
        let rel = p - self.center;
        let closest = self.closest_point(p);
        let diff = p - closest;
        let dist = diff.norm();
        if dist > 1e-12 {
            return diff / dist;
        }
        let q = rel.abs() - self.half_extents;
        let mut k = 0;
        for i in 1..3 {
            if q[i] > q[k] {
                k = i;
            }
        }
        let mut n = Vec3::zeros();
        n[k] = if rel[k] >= 0.0 { 1.0 } else { -1.0 };
        n
    }

    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        let lo = self.center - self.half_extents;
        let hi = self.center + self.half_extents;
        Vec3::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y), p.z.clamp(lo.z, hi.z))
    }
}

/// Result of a segment-versus-box query.
#[derive(Debug, Clone, Copy)]
pub struct SegmentBoxQuery {
    /// Segment parameter of the point with the smallest signed distance.
    pub t: f64,
    /// Smallest signed distance of the segment to the box.
    pub distance: f64,
    /// Outward box normal at the closest approach.
    pub normal: Vec3,
}

/// Minimizes the box signed distance along `[a, b]`.
///
/// The signed distance of a convex set is convex, so a golden-section search
/// over the segment parameter finds the global minimum. When the minimum is
/// attained on a flat stretch (segment parallel to a face) the midpoint of
/// that stretch is returned.
pub fn segment_box(a: &Vec3, b: &Vec3, aabb: &Aabb) -> SegmentBoxQuery {
    let d = b - a;
    let f = |t: f64| aabb.signed_distance(&(a + d * t));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..90 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut t = 0.5 * (lo + hi);
    let mut best = f(t);
    for end in [0.0, 1.0] {
        let v = f(end);
        if v < best {
            best = v;
            t = end;
        }
    }

    // Flat stretch: locate its ends by bisection and take the midpoint.
    let level = best + 1e-12 * (1.0 + best.abs());
    let edge = |inside: f64, outside: f64| {
        if f(outside) <= level {
            return outside;
        }
        let (mut i, mut o) = (inside, outside);
        for _ in 0..60 {
            let m = 0.5 * (i + o);
            if f(m) <= level {
                i = m;
            } else {
                o = m;
            }
        }
        i
    };
    let left = edge(t, 0.0);
    let right = edge(t, 1.0);
    let t = 0.5 * (left + right);
    let p = a + d * t;
    SegmentBoxQuery { t, distance: aabb.signed_distance(&p), normal: aabb.outward_normal(&p) }
}

/// Distance from segment `[p0, p1]` to the parallelogram
/// `{o + s u + t v : s, t ∈ [0, 1]}`.
pub fn segment_parallelogram(p0: &Vec3, p1: &Vec3, o: &Vec3, u: &Vec3, v: &Vec3) -> f64 {
    let corners = [*o, o + u, o + u + v, o + v];
    let mut best = (0..4)
        .map(|i| segment_segment(p0, p1, &corners[i], &corners[(i + 1) % 4]).2)
        .fold(f64::INFINITY, f64::min);
    let n = u.cross(v);
    let Some(n) = n.try_normalize(1e-24) else {
        return best;
    };
    let (uu, uv, vv) = (u.dot(u), u.dot(v), v.dot(v));
    let det = uu * vv - uv * uv;
    let inside = |x: &Vec3| {
        let r = x - o;
        let (ru, rv) = (r.dot(u), r.dot(v));
        let s = (vv * ru - uv * rv) / det;
        let t = (uu * rv - uv * ru) / det;
        (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t)
    };
    let (d0, d1) = ((p0 - o).dot(&n), (p1 - o).dot(&n));
    for (p, d) in [(p0, d0), (p1, d1)] {
        if inside(&(p - n * d)) {
            best = best.min(d.abs());
        }
    }
    if d0 * d1 < 0.0 && inside(&(p0 + (p1 - p0) * (d0 / (d0 - d1)))) {
        return 0.0;
    }
    best
}

/// Orthonormal pair perpendicular to the unit vector `axis`, chosen
/// deterministically from the world axis least aligned with it.
pub fn perpendicular_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let abs = axis.abs();
    let reference = if abs.x <= abs.y && abs.x <= abs.z {
        Vec3::x()
    } else if abs.y <= abs.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let e1 = (reference - axis * reference.dot(axis)).normalize();
    let e2 = axis.cross(&e1);
    (e1, e2)
}
