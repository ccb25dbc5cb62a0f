//! Exact 2-D convex polytope arithmetic: hulls, Minkowski sums, halfspace
//! clipping, axis projection and distances.
//!
//! Sets are carried as counter-clockwise vertex rings; degenerate sets
//! (points, segments) are first-class since a reachable set propagated from a
//! measured point state is a segment after one step. The halfspace form is
//! derived lazily and cached; its rows are always unit-norm so that offsets
//! measure true distance.

use nalgebra::{Matrix2, Vector2};
use std::sync::OnceLock;
use thiserror::Error;

/// Tolerance for collinearity and duplicate-vertex merging during hull
/// construction, and the default membership slack.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PolytopeError {
    #[error("half-widths must be nonnegative, got ({0}, {1})")]
    NegativeHalfWidth(f64, f64),
    #[error("halfspace normal is zero or too short to normalize")]
    ZeroNormal,
    #[error("a polytope needs at least one vertex")]
    NoVertices,
    #[error("halfspace system has no feasible point")]
    EmptySet,
    #[error("halfspace system describes an unbounded set")]
    Unbounded,
    #[error("non-finite coordinate in input")]
    NonFinite,
}

/// `normals[k] · x <= offsets[k]` with unit-norm rows, sorted by normal angle.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfspaceRep {
    pub normals: Vec<Vector2<f64>>,
    pub offsets: Vec<f64>,
}

impl HalfspaceRep {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    /// Membership with absolute slack `tol`.
    pub fn contains(&self, p: &Vector2<f64>, tol: f64) -> bool {
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(n, c)| n.dot(p) <= c + tol)
    }
}

/// Counter-clockwise vertex ring. Rings of length 1 (point) and 2 (segment)
/// are valid.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexRep {
    pub vertices: Vec<Vector2<f64>>,
}

/// Bounded nonempty convex set in the plane. The vertex ring is canonical;
/// the halfspace form is derived on first use and cached.
#[derive(Debug)]
pub struct Polytope2 {
    vrep: VertexRep,
    hrep: OnceLock<HalfspaceRep>,
}

impl Clone for Polytope2 {
    fn clone(&self) -> Self {
        let hrep = OnceLock::new();
        if let Some(h) = self.hrep.get() {
            let _ = hrep.set(h.clone());
        }
        Self {
            vrep: self.vrep.clone(),
            hrep,
        }
    }
}

impl Polytope2 {
    /// Convex hull of the given points; collinear and duplicate points are
    /// merged within [`GEOM_EPS`].
    pub fn from_vertices(points: &[Vector2<f64>]) -> Result<Self, PolytopeError> {
        if points.is_empty() {
            return Err(PolytopeError::NoVertices);
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(PolytopeError::NonFinite);
        }
        let hull = convex_hull(points);
        Ok(Self {
            vrep: VertexRep { vertices: hull },
            hrep: OnceLock::new(),
        })
    }

    /// Axis-aligned rectangle, degenerate if a half-width is zero. The cached
    /// halfspace form always carries the four axis facets.
    pub fn from_box(
        center: &Vector2<f64>,
        half_widths: &Vector2<f64>,
    ) -> Result<Self, PolytopeError> {
        if half_widths.x < 0.0 || half_widths.y < 0.0 {
            return Err(PolytopeError::NegativeHalfWidth(
                half_widths.x,
                half_widths.y,
            ));
        }
        let (cx, cy, hx, hy) = (center.x, center.y, half_widths.x, half_widths.y);
        let poly = Self::from_vertices(&[
            Vector2::new(cx - hx, cy - hy),
            Vector2::new(cx + hx, cy - hy),
            Vector2::new(cx + hx, cy + hy),
            Vector2::new(cx - hx, cy + hy),
        ])?;
        let _ = poly.hrep.set(HalfspaceRep {
            normals: vec![
                Vector2::new(0.0, -1.0),
                Vector2::new(1.0, 0.0),
                Vector2::new(0.0, 1.0),
                Vector2::new(-1.0, 0.0),
            ],
            offsets: vec![-(cy - hy), cx + hx, cy + hy, -(cx - hx)],
        });
        Ok(poly)
    }

    /// Vertex enumeration of `normals · x <= offsets`. Fails on empty or
    /// unbounded systems; redundant facets are dropped.
    pub fn from_halfspaces(
        normals: &[Vector2<f64>],
        offsets: &[f64],
    ) -> Result<Self, PolytopeError> {
        assert_eq!(normals.len(), offsets.len());
        if normals.is_empty() {
            return Err(PolytopeError::Unbounded);
        }
        let mut rows: Vec<(Vector2<f64>, f64)> = Vec::with_capacity(normals.len());
        for (n, &c) in normals.iter().zip(offsets) {
            let norm = n.norm();
            if !norm.is_finite() || !c.is_finite() {
                return Err(PolytopeError::NonFinite);
            }
            if norm < 1e-12 {
                return Err(PolytopeError::ZeroNormal);
            }
            rows.push((n / norm, c / norm));
        }
        // Bounded iff the normals leave no angular gap of half a turn or more.
        let mut angles: Vec<f64> = rows.iter().map(|(n, _)| n.y.atan2(n.x)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut max_gap: f64 = 0.0;
        for k in 0..angles.len() {
            let next = if k + 1 < angles.len() {
                angles[k + 1]
            } else {
                angles[0] + std::f64::consts::TAU
            };
            max_gap = max_gap.max(next - angles[k]);
        }
        if angles.len() < 3 || max_gap >= std::f64::consts::PI - 1e-9 {
            return Err(PolytopeError::Unbounded);
        }
        let mut candidates = Vec::new();
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                if let Some(p) = line_intersection(rows[i].0, rows[i].1, rows[j].0, rows[j].1) {
                    let feasible = rows
                        .iter()
                        .all(|(n, c)| n.dot(&p) <= c + GEOM_EPS * (1.0 + c.abs()));
                    if feasible {
                        candidates.push(p);
                    }
                }
            }
        }
        if candidates.is_empty() {
            return Err(PolytopeError::EmptySet);
        }
        Self::from_vertices(&candidates)
    }

    pub fn vertices(&self) -> &[Vector2<f64>] {
        &self.vrep.vertices
    }

    pub fn vrep(&self) -> &VertexRep {
        &self.vrep
    }

    /// Halfspace form, derived on first use.
    pub fn hrep(&self) -> &HalfspaceRep {
        self.hrep.get_or_init(|| derive_hrep(&self.vrep.vertices))
    }

    pub fn is_point(&self) -> bool {
        self.vrep.vertices.len() == 1
    }

    /// Minkowski sum: hull of pairwise vertex sums.
    pub fn minkowski_sum(&self, other: &Polytope2) -> Polytope2 {
        let mut sums = Vec::with_capacity(self.vertices().len() * other.vertices().len());
        for a in self.vertices() {
            for b in other.vertices() {
                sums.push(a + b);
            }
        }
        Polytope2::from_vertices(&sums).expect("sum of bounded sets is bounded")
    }

    /// Image under a linear map (hull of mapped vertices; the map may be
    /// singular, collapsing the set to a segment or point).
    pub fn affine_image(&self, m: &Matrix2<f64>) -> Polytope2 {
        let mapped: Vec<Vector2<f64>> = self.vertices().iter().map(|v| m * v).collect();
        Polytope2::from_vertices(&mapped).expect("image of bounded set is bounded")
    }

    pub fn translate(&self, t: &Vector2<f64>) -> Polytope2 {
        let moved: Vec<Vector2<f64>> = self.vertices().iter().map(|v| v + t).collect();
        let out = Polytope2 {
            vrep: VertexRep { vertices: moved },
            hrep: OnceLock::new(),
        };
        if let Some(h) = self.hrep.get() {
            let shifted = HalfspaceRep {
                normals: h.normals.clone(),
                offsets: h
                    .normals
                    .iter()
                    .zip(&h.offsets)
                    .map(|(n, c)| c + n.dot(t))
                    .collect(),
            };
            let _ = out.hrep.set(shifted);
        }
        out
    }

    /// Clip with `normal · x <= offset` (normal need not be unit). Returns
    /// `None` when nothing survives.
    pub fn intersect_halfspace(
        &self,
        normal: &Vector2<f64>,
        offset: f64,
    ) -> Result<Option<Polytope2>, PolytopeError> {
        let norm = normal.norm();
        if norm < 1e-12 {
            return Err(PolytopeError::ZeroNormal);
        }
        let n = normal / norm;
        let c = offset / norm;
        let verts = self.vertices();
        let dist: Vec<f64> = verts.iter().map(|v| n.dot(v) - c).collect();
        if dist.iter().all(|&d| d <= GEOM_EPS) {
            return Ok(Some(self.clone()));
        }
        if dist.iter().all(|&d| d > GEOM_EPS) {
            return Ok(None);
        }
        let mut kept: Vec<Vector2<f64>> = Vec::with_capacity(verts.len() + 2);
        if verts.len() == 2 {
            // Segment: keep the inside endpoint plus the crossing point.
            let (a, b) = (verts[0], verts[1]);
            let (da, db) = (dist[0], dist[1]);
            if da <= GEOM_EPS {
                kept.push(a);
            }
            if db <= GEOM_EPS {
                kept.push(b);
            }
            let t = da / (da - db);
            kept.push(a + (b - a) * t);
        } else {
            for i in 0..verts.len() {
                let j = (i + 1) % verts.len();
                let (inside_i, inside_j) = (dist[i] <= GEOM_EPS, dist[j] <= GEOM_EPS);
                if inside_i {
                    kept.push(verts[i]);
                }
                if inside_i != inside_j {
                    let t = dist[i] / (dist[i] - dist[j]);
                    kept.push(verts[i] + (verts[j] - verts[i]) * t);
                }
            }
        }
        if kept.is_empty() {
            return Ok(None);
        }
        Ok(Some(Polytope2::from_vertices(&kept)?))
    }

    /// `[min, max]` of coordinate `axis` (0 or 1) over the set.
    pub fn project_axis(&self, axis: usize) -> (f64, f64) {
        assert!(axis < 2, "only planar axes 0 and 1 exist");
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in self.vertices() {
            lo = lo.min(v[axis]);
            hi = hi.max(v[axis]);
        }
        (lo, hi)
    }

    /// Membership with absolute slack `tol`.
    pub fn contains(&self, p: &Vector2<f64>, tol: f64) -> bool {
        let verts = self.vertices();
        match verts.len() {
            1 => (p - verts[0]).norm() <= tol,
            2 => point_segment_distance(p, &verts[0], &verts[1]) <= tol,
            _ => {
                for i in 0..verts.len() {
                    let j = (i + 1) % verts.len();
                    let e = verts[j] - verts[i];
                    let cross = e.x * (p.y - verts[i].y) - e.y * (p.x - verts[i].x);
                    if cross < -tol * e.norm() {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Euclidean distance from a point to the set (zero inside).
    pub fn distance_to_point(&self, p: &Vector2<f64>) -> f64 {
        let verts = self.vertices();
        match verts.len() {
            1 => (p - verts[0]).norm(),
            2 => point_segment_distance(p, &verts[0], &verts[1]),
            _ => {
                if self.contains(p, 0.0) {
                    return 0.0;
                }
                let mut best = f64::INFINITY;
                for i in 0..verts.len() {
                    let j = (i + 1) % verts.len();
                    best = best.min(point_segment_distance(p, &verts[i], &verts[j]));
                }
                best
            }
        }
    }

    /// Support point: vertex maximizing `dir · v`.
    pub fn support(&self, dir: &Vector2<f64>) -> Vector2<f64> {
        let mut best = self.vrep.vertices[0];
        let mut best_dot = dir.dot(&best);
        for v in &self.vrep.vertices[1..] {
            let d = dir.dot(v);
            if d > best_dot {
                best_dot = d;
                best = *v;
            }
        }
        best
    }

    /// Minimum Euclidean distance between two sets (zero if they intersect),
    /// by GJK on the difference set.
    pub fn distance_to(&self, other: &Polytope2) -> f64 {
        let support = |d: &Vector2<f64>| self.support(d) - other.support(&-d);
        let mut simplex = vec![support(&Vector2::new(1.0, 0.0))];
        for _ in 0..64 {
            let (closest, keep) = closest_to_origin(&simplex);
            simplex = keep;
            let dist = closest.norm();
            if dist < 1e-12 {
                return 0.0;
            }
            let dir = -closest / dist;
            let fresh = support(&dir);
            // support gain along dir; no gain means the current distance is it
            if dir.dot(&fresh) + dist <= 1e-12 * (1.0 + dist) {
                return dist;
            }
            if simplex.iter().any(|s| (s - fresh).norm() < 1e-14) {
                return dist;
            }
            simplex.push(fresh);
        }
        closest_to_origin(&simplex).0.norm()
    }

    /// True iff every point of `self` lies in `other` (within `tol`).
    pub fn contained_in(&self, other: &Polytope2, tol: f64) -> bool {
        self.vertices().iter().all(|v| other.contains(v, tol))
    }

    /// Shoelace area (zero for degenerate sets).
    pub fn area(&self) -> f64 {
        let verts = self.vertices();
        if verts.len() < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..verts.len() {
            let j = (i + 1) % verts.len();
            acc += verts[i].x * verts[j].y - verts[j].x * verts[i].y;
        }
        0.5 * acc
    }
}

/// Spec-shaped free functions mirroring the method API.
pub fn distance_point(p: &Vector2<f64>, q: &Polytope2) -> f64 {
    q.distance_to_point(p)
}

pub fn distance_polytopes(p: &Polytope2, q: &Polytope2) -> f64 {
    p.distance_to(q)
}

fn cross3(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    let ab = b - a;
    let ac = c - a;
    ab.x * ac.y - ab.y * ac.x
}

/// Andrew's monotone chain; duplicates and collinear points merged within
/// [`GEOM_EPS`]. Returns a CCW ring (length 1 or 2 for degenerate inputs).
fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
    });
    pts.dedup_by(|a, b| (*a - *b).norm() < GEOM_EPS);
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<Vector2<f64>> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross3(lower[lower.len() - 2], lower[lower.len() - 1], p) <= GEOM_EPS
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross3(upper[upper.len() - 2], upper[upper.len() - 1], p) <= GEOM_EPS
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 2 {
        // All points merged: fully degenerate.
        return vec![pts[0]];
    }
    lower
}

/// Outward unit-normal facets of a CCW ring, sorted by normal angle.
/// Points get the four axis facets; segments two side and two cap facets.
fn derive_hrep(verts: &[Vector2<f64>]) -> HalfspaceRep {
    let mut facets: Vec<(Vector2<f64>, f64)> = Vec::new();
    match verts.len() {
        1 => {
            let p = verts[0];
            facets.push((Vector2::new(1.0, 0.0), p.x));
            facets.push((Vector2::new(-1.0, 0.0), -p.x));
            facets.push((Vector2::new(0.0, 1.0), p.y));
            facets.push((Vector2::new(0.0, -1.0), -p.y));
        }
        2 => {
            let (p, q) = (verts[0], verts[1]);
            let d = (q - p).normalize();
            let n = Vector2::new(-d.y, d.x);
            facets.push((d, d.dot(&q)));
            facets.push((-d, -d.dot(&p)));
            facets.push((n, n.dot(&p)));
            facets.push((-n, -n.dot(&p)));
        }
        _ => {
            for i in 0..verts.len() {
                let j = (i + 1) % verts.len();
                let e = verts[j] - verts[i];
                let n = Vector2::new(e.y, -e.x).normalize();
                facets.push((n, n.dot(&verts[i])));
            }
        }
    }
    facets.sort_by(|a, b| {
        let aa = a.0.y.atan2(a.0.x);
        let bb = b.0.y.atan2(b.0.x);
        aa.partial_cmp(&bb).unwrap()
    });
    HalfspaceRep {
        normals: facets.iter().map(|f| f.0).collect(),
        offsets: facets.iter().map(|f| f.1).collect(),
    }
}

fn line_intersection(
    n1: Vector2<f64>,
    c1: f64,
    n2: Vector2<f64>,
    c2: f64,
) -> Option<Vector2<f64>> {
    let det = n1.x * n2.y - n1.y * n2.x;
    if det.abs() < 1e-12 {
        return None;
    }
    Some(Vector2::new(
        (c1 * n2.y - c2 * n1.y) / det,
        (n1.x * c2 - n2.x * c1) / det,
    ))
}

fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Closest point to the origin on a simplex of up to three points, plus the
/// minimal sub-simplex supporting it.
fn closest_to_origin(simplex: &[Vector2<f64>]) -> (Vector2<f64>, Vec<Vector2<f64>>) {
    match simplex.len() {
        1 => (simplex[0], vec![simplex[0]]),
        2 => closest_on_segment(simplex[0], simplex[1]),
        _ => {
            let (a, b, c) = (simplex[0], simplex[1], simplex[2]);
            let d1 = cross3(a, b, Vector2::zeros());
            let d2 = cross3(b, c, Vector2::zeros());
            let d3 = cross3(c, a, Vector2::zeros());
            let all_pos = d1 >= -1e-15 && d2 >= -1e-15 && d3 >= -1e-15;
            let all_neg = d1 <= 1e-15 && d2 <= 1e-15 && d3 <= 1e-15;
            if all_pos || all_neg {
                return (Vector2::zeros(), simplex.to_vec());
            }
            let candidates = [
                closest_on_segment(a, b),
                closest_on_segment(b, c),
                closest_on_segment(c, a),
            ];
            candidates
                .into_iter()
                .min_by(|x, y| x.0.norm().partial_cmp(&y.0.norm()).unwrap())
                .unwrap()
        }
    }
}

fn closest_on_segment(a: Vector2<f64>, b: Vector2<f64>) -> (Vector2<f64>, Vec<Vector2<f64>>) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        return (a, vec![a]);
    }
    let t = (-a.dot(&ab) / len2).clamp(0.0, 1.0);
    let p = a + ab * t;
    if t <= 0.0 {
        (a, vec![a])
    } else if t >= 1.0 {
        (b, vec![b])
    } else {
        (p, vec![a, b])
    }
}
