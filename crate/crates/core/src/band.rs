//! Simplified elastic band: shortest non-penetrating wrap path between two
//! anchors over a sampled graph of the allowed link surfaces.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{perpendicular_basis, segment_parallelogram, segment_segment, Vec3};
use crate::kinematics::{forward_kinematics, sample_capsule, world_capsules, Capsule, JointVector, KinematicsError, RobotModel};

pub const DEFAULT_DENSITY: f64 = 400.0;
pub const DEFAULT_K_NEIGHBORS: usize = 8;
const EDGE_CLEARANCE_TOL: f64 = 1e-6;
const JACOBIAN_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandError {
    #[error("band anchors are not connected in the surface graph")]
    DisconnectedGraph,
    #[error("invalid band mode {0}")]
    InvalidMode(u8),
    #[error("invalid band parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandParams {
    pub b0: Vec3,
    pub b1: Vec3,
    pub l_max: f64,
    #[serde(default)]
    pub k_band: f64,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_k_neighbors")]
    pub k_neighbors: usize,
}

fn default_density() -> f64 {
    DEFAULT_DENSITY
}

fn default_k_neighbors() -> usize {
    DEFAULT_K_NEIGHBORS
}

impl BandParams {
    pub fn new(b0: Vec3, b1: Vec3, l_max: f64) -> Self {
        Self { b0, b1, l_max, k_band: 0.0, density: DEFAULT_DENSITY, k_neighbors: DEFAULT_K_NEIGHBORS }
    }

    pub fn rest_length(&self) -> f64 {
        (self.b1 - self.b0).norm()
    }

    pub fn validate(&self) -> Result<(), BandError> {
        let bad = |m: &str| Err(BandError::InvalidParams(m.to_string()));
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad("density must be positive");
        }
        if self.k_neighbors < 3 {
            return bad("k_neighbors must be at least 3");
        }
        if !(self.l_max >= self.rest_length()) {
            return bad("l_max must be at least the anchor distance");
        }
        if self.k_band < 0.0 {
            return bad("k_band must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandState {
    pub b0: Vec3,
    pub b1: Vec3,
    pub sigma: u8,
    pub d_b: Vec3,
    #[serde(rename = "L")]
    pub length: f64,
    pub path: Vec<Vec3>,
    /// Link whose axis defines the deformation direction, if wrapped.
    pub wrap_link: Option<usize>,
    pub tension_exceeded: bool,
    /// Largest distance of a wrapped path vertex outside its capsule
    /// surface (the graph samples an inflated surface).
    #[serde(default)]
    pub surface_offset: f64,
}

impl BandState {
    pub fn straight(b0: Vec3, b1: Vec3, l_max: f64) -> Self {
        let length = (b1 - b0).norm();
        Self {
            b0,
            b1,
            sigma: 0,
            d_b: Vec3::zeros(),
            length,
            path: vec![b0, b1],
            wrap_link: None,
            surface_offset: 0.0,
            tension_exceeded: length > l_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphVertex {
    pub point: Vec3,
    pub normal: Vec3,
    /// `None` for the two anchors.
    pub link: Option<usize>,
    pub penalty: f64,
}

/// Vertex 0 is `b0`, vertex 1 is `b1`.
#[derive(Debug, Clone)]
pub struct SurfaceGraph {
    pub vertices: Vec<GraphVertex>,
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub built_at: JointVector,
}

impl SurfaceGraph {
    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].iter().any(|&(j, _)| j == b)
    }
}

/// `0` when the vertex normal, projected onto the plane orthogonal to the
/// anchor line, is within 90° of `d_b`; `2` otherwise.
pub fn compute_vertex_penalty(v_normal: &Vec3, b0: &Vec3, b1: &Vec3, d_b: &Vec3) -> f64 {
    let u = match (b1 - b0).try_normalize(1e-12) {
        Some(u) => u,
        None => return 0.0,
    };
    let n_band = v_normal - u * v_normal.dot(&u);
    if n_band.norm() < 1e-9 || d_b.norm() < 1e-12 {
        return 0.0;
    }
    if n_band.dot(d_b) >= -1e-9 * n_band.norm() * d_b.norm() {
        0.0
    } else {
        2.0
    }
}

fn segment_blocked(a: &Vec3, b: &Vec3, capsules: &[(usize, Capsule)], tol: f64) -> bool {
    capsules.iter().any(|(_, c)| segment_segment(a, b, &c.p0, &c.p1).2 < c.radius - tol)
}

fn allowed_capsules(model: &RobotModel, q: &JointVector) -> Result<Vec<(usize, Capsule)>, KinematicsError> {
    let poses = forward_kinematics(model, q)?;
    Ok(model
        .allowed_links
        .iter()
        .map(|&i| (i, model.links[i].transformed(&poses[i])))
        .collect())
}

/// Lowest-index allowed link that blocks the band on the `sigma` side, and
/// the deformation direction for `sigma`.
///
/// A link blocks when its capsule reaches the strip swept from the straight
/// band towards the deformation side (downwards for mode 1, robot above the
/// band; upwards for mode 2). The link axis is oriented so that mode 1
/// deforms the band downwards.
pub fn deformation_direction(
    model: &RobotModel,
    q: &JointVector,
    params: &BandParams,
    sigma: u8,
) -> Result<Option<(usize, Vec3)>, BandError> {
    if sigma > 2 {
        return Err(BandError::InvalidMode(sigma));
    }
    if sigma == 0 {
        return Ok(None);
    }
    let caps = allowed_capsules(model, q)?;
    let u = params.b1 - params.b0;
    let axis = u / u.norm();
    let down = (-Vec3::z() + axis * axis.z)
        .try_normalize(1e-12)
        .unwrap_or_else(|| perpendicular_basis(&axis).0);
    let side = if sigma == 2 { -down } else { down } * params.l_max;
    let blocking = caps
        .iter()
        .find(|(_, c)| segment_parallelogram(&c.p0, &c.p1, &params.b0, &u, &side) < c.radius);
    Ok(blocking.map(|(link, c)| {
        let mut l_r = (c.p1 - c.p0).try_normalize(1e-12).unwrap_or_else(Vec3::x);
        let mut d = (params.b0 - params.b1).cross(&l_r);
        if d.z > 1e-12 {
            l_r = -l_r;
            d = (params.b0 - params.b1).cross(&l_r);
        }
        let sign = if sigma == 2 { -1.0 } else { 1.0 };
        (*link, d * sign)
    }))
}

/// Samples the allowed link surfaces and connects them into a graph whose
/// edges never cut through an allowed capsule.
///
/// Samples sit slightly outside the true surface so that chords between
/// neighbouring samples clear it. Only samples that can lie on a path no
/// longer than `l_max` are kept. The direct anchor edge is only present
/// when `d_b` is zero, so a wrapped band cannot fall back to straight.
pub fn build_surface_graph(
    model: &RobotModel,
    q: &JointVector,
    params: &BandParams,
    d_b: &Vec3,
) -> Result<SurfaceGraph, BandError> {
    params.validate()?;
    let caps = allowed_capsules(model, q)?;
    let (b0, b1) = (params.b0, params.b1);
    let anchor = |point| GraphVertex { point, normal: Vec3::zeros(), link: None, penalty: 0.0 };
    let mut vertices = vec![anchor(b0), anchor(b1)];

    let poses = forward_kinematics(model, q)?;
    for (link, _) in &caps {
        let local = &model.links[*link];
        let coarse = sample_capsule(local, params.density, 1.0);
        let inflated = sample_capsule(local, params.density, coarse.chord_inflation());
        let pose = &poses[*link];
        for sp in inflated.points {
            let p = pose.transform_point(&sp.point.into()).coords;
            if (p - b0).norm() + (p - b1).norm() > params.l_max {
                continue;
            }
            let inside_other = caps.iter().any(|(j, c)| {
                *j != *link && segment_segment(&p, &p, &c.p0, &c.p1).2 < c.radius - EDGE_CLEARANCE_TOL
            });
            if inside_other {
                continue;
            }
            let normal = pose.rotation * sp.normal;
            vertices.push(GraphVertex {
                point: p,
                normal,
                link: Some(*link),
                penalty: compute_vertex_penalty(&normal, &b0, &b1, d_b),
            });
        }
    }

    let n = vertices.len();
    let mut candidate: Vec<Vec<usize>> = vec![Vec::new(); n];
    // k nearest surface neighbours, including every vertex tied with the k-th
    let mut d: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 2..n {
        d.clear();
        d.extend(
            (2..n)
                .filter(|&j| j != i)
                .map(|j| ((vertices[i].point - vertices[j].point).norm_squared(), j)),
        );
        if d.len() > params.k_neighbors {
            let cut = d.select_nth_unstable_by(params.k_neighbors - 1, |a, b| a.0.total_cmp(&b.0)).1 .0;
            d.retain(|&(dist, _)| dist <= cut);
        }
        for &(_, j) in &d {
            candidate[i].push(j);
            candidate[j].push(i);
        }
    }
    for a in 0..2 {
        for j in 2..n {
            candidate[a].push(j);
            candidate[j].push(a);
        }
    }
    if d_b.norm() == 0.0 {
        candidate[0].push(1);
        candidate[1].push(0);
    }

    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        candidate[i].sort_unstable();
        candidate[i].dedup();
        for &j in &candidate[i] {
            if j <= i {
                continue;
            }
            let (pi, pj) = (vertices[i].point, vertices[j].point);
            if segment_blocked(&pi, &pj, &caps, EDGE_CLEARANCE_TOL) {
                continue;
            }
            let w = (pi - pj).norm() + 0.5 * (vertices[i].penalty + vertices[j].penalty);
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
    }
    for adj in &mut adjacency {
        adj.sort_by_key(|e| e.0);
    }
    Ok(SurfaceGraph { vertices, adjacency, built_at: q.clone() })
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    f: f64,
    g: f64,
    v: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then(other.v.cmp(&self.v))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* from vertex 0 to vertex 1 with heuristic `‖v − b1‖`.
/// Returns the vertex sequence and its weighted cost.
pub fn shortest_path(graph: &SurfaceGraph) -> Option<(Vec<usize>, f64)> {
    let n = graph.vertices.len();
    let goal = graph.vertices[1].point;
    let h = |v: usize| (graph.vertices[v].point - goal).norm();
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[0] = 0.0;
    heap.push(Entry { f: h(0), g: 0.0, v: 0 });
    while let Some(Entry { g, v, .. }) = heap.pop() {
        if closed[v] || g > best[v] {
            continue;
        }
        if v == 1 {
            let mut path = vec![1];
            let mut cur = 1;
            while cur != 0 {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            return Some((path, g));
        }
        closed[v] = true;
        for &(u, w) in &graph.adjacency[v] {
            let cand = g + w;
            if cand < best[u] {
                best[u] = cand;
                parent[u] = v;
                heap.push(Entry { f: cand + h(u), g: cand, v: u });
            }
        }
    }
    None
}

/// Band state for mode `sigma` at configuration `q`.
///
/// Falls back to the straight band (mode 0) when no allowed link crosses the
/// anchor segment.
pub fn simplified_eb_model(
    model: &RobotModel,
    q: &JointVector,
    sigma: u8,
    params: &BandParams,
) -> Result<BandState, BandError> {
    params.validate()?;
    let Some((link, d_b)) = deformation_direction(model, q, params, sigma)? else {
        return Ok(BandState::straight(params.b0, params.b1, params.l_max));
    };
    let graph = build_surface_graph(model, q, params, &d_b)?;
    let (ids, _) = shortest_path(&graph).ok_or(BandError::DisconnectedGraph)?;
    let path: Vec<Vec3> = ids.iter().map(|&i| graph.vertices[i].point).collect();
    let length = path.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>();
    let caps = world_capsules(model, q)?;
    let surface_offset = ids
        .iter()
        .filter_map(|&i| graph.vertices[i].link.map(|l| (graph.vertices[i].point, &caps[l])))
        .map(|(p, c)| segment_segment(&p, &p, &c.p0, &c.p1).2 - c.radius)
        .fold(0.0, f64::max);
    Ok(BandState {
        b0: params.b0,
        b1: params.b1,
        sigma,
        d_b,
        length,
        path,
        wrap_link: Some(link),
        tension_exceeded: length > params.l_max,
        surface_offset,
    })
}

/// `∂L/∂q` by central differences, rebuilding the graph per perturbation.
pub fn band_length_jacobian(
    model: &RobotModel,
    q: &JointVector,
    sigma: u8,
    params: &BandParams,
) -> Result<DMatrix<f64>, BandError> {
    let base = simplified_eb_model(model, q, sigma, params)?;
    let mut row = DMatrix::zeros(1, model.n_q());
    if base.sigma == 0 {
        return Ok(row);
    }
    for j in 0..model.n_q() {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += JACOBIAN_STEP;
        qm[j] -= JACOBIAN_STEP;
        let lp = simplified_eb_model(model, &qp, sigma, params)?.length;
        let lm = simplified_eb_model(model, &qm, sigma, params)?.length;
        row[(0, j)] = (lp - lm) / (2.0 * JACOBIAN_STEP);
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DVector, Isometry3, Translation3, Unit, UnitQuaternion};
    use proptest::prelude::*;

    use crate::kinematics::Joint;

    /// One horizontal link along world y, centred at x = 1, axis height `z`.
    /// The single joint rotates it about world x through (1, 0, z).
    fn crossing_bar(z: f64) -> RobotModel {
        let origin = Isometry3::from_parts(Translation3::new(1.0, 0.0, z), UnitQuaternion::identity());
        RobotModel::new(
            vec![Joint { axis: Unit::new_normalize(Vec3::x()), origin }],
            vec![Capsule { p0: Vec3::new(0.0, -0.5, 0.0), p1: Vec3::new(0.0, 0.5, 0.0), radius: 0.1 }],
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -3.0),
            DVector::from_element(1, 3.0),
            vec![0],
            Vec3::new(0.0, 0.5, 0.0),
        )
        .unwrap()
    }

    fn params() -> BandParams {
        let mut p = BandParams::new(Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), 3.0);
        p.density = 900.0;
        p
    }

    fn dijkstra(graph: &SurfaceGraph) -> Option<f64> {
        let n = graph.vertices.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        dist[0] = 0.0;
        loop {
            let mut u = None;
            for v in 0..n {
                if !done[v] && dist[v].is_finite() && u.is_none_or(|b: usize| dist[v] < dist[b]) {
                    u = Some(v);
                }
            }
            let u = u?;
            if u == 1 {
                return Some(dist[1]);
            }
            done[u] = true;
            for &(v, w) in &graph.adjacency[u] {
                dist[v] = dist[v].min(dist[u] + w);
            }
        }
    }

    #[test]
    fn penalty_cases() {
        let b0 = Vec3::zeros();
        let b1 = Vec3::new(2.0, 0.0, 0.0);
        let d = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(compute_vertex_penalty(&d, &b0, &b1, &d), 0.0);
        assert_eq!(compute_vertex_penalty(&-d, &b0, &b1, &d), 2.0);
        assert_eq!(compute_vertex_penalty(&Vec3::x(), &b0, &b1, &d), 0.0);
        assert_eq!(compute_vertex_penalty(&Vec3::y(), &b0, &b1, &d), 0.0);
    }

    #[test]
    fn far_robot_gives_straight_band() {
        let model = crossing_bar(5.0);
        let p = params();
        let s = simplified_eb_model(&model, &DVector::zeros(1), 1, &p).unwrap();
        assert_eq!(s.sigma, 0);
        assert_eq!(s.path, vec![p.b0, p.b1]);
        assert!((s.length - 2.0).abs() < 1e-12);
        let g = build_surface_graph(&model, &DVector::zeros(1), &p, &Vec3::zeros()).unwrap();
        assert_eq!(g.vertices.len(), 2);
        assert_eq!(g.n_edges(), 1);
        assert!(band_length_jacobian(&model, &DVector::zeros(1), 1, &p).unwrap().amax() == 0.0);
    }

    #[test]
    fn crossing_capsule_wraps_on_deformation_side() {
        let model = crossing_bar(-0.05);
        let p = params();
        let q = DVector::zeros(1);
        let s = simplified_eb_model(&model, &q, 1, &p).unwrap();
        assert_eq!(s.sigma, 1);
        assert!(s.length > 2.0);
        assert!(s.d_b.z < 0.0);
        assert_eq!(s.path[0], p.b0);
        assert_eq!(*s.path.last().unwrap(), p.b1);
        // the wrap passes below the bar
        let lowest = s.path.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
        assert!(lowest < -0.15 + 1e-9, "lowest {lowest}");

        let (link, d_b) = deformation_direction(&model, &q, &p, 1).unwrap().unwrap();
        assert_eq!(link, 0);
        let g = build_surface_graph(&model, &q, &p, &d_b).unwrap();
        assert!(!g.has_edge(0, 1));
        let (_, cost) = shortest_path(&g).unwrap();
        let oracle = dijkstra(&g).unwrap();
        assert!((cost - oracle).abs() <= 1e-12 * (1.0 + oracle));
    }

    #[test]
    fn bar_below_band_wraps_only_in_mode_one() {
        let model = crossing_bar(-0.4);
        let p = params();
        let q = DVector::zeros(1);
        let down = simplified_eb_model(&model, &q, 1, &p).unwrap();
        assert_eq!(down.sigma, 1);
        // the band is pulled under the bar: at least 0.5 deep at x = 1
        let oracle = 2.0 * (1.0f64 + 0.5 * 0.5).sqrt();
        assert!(down.length >= oracle - 1e-9, "{} < {oracle}", down.length);
        assert!(down.length < oracle + 0.05);
        let up = simplified_eb_model(&model, &q, 2, &p).unwrap();
        assert_eq!(up.sigma, 0);
        assert_eq!(up.length, 2.0);
    }

    #[test]
    fn modes_are_mirror_images() {
        let model = crossing_bar(0.0);
        let p = params();
        let q = DVector::zeros(1);
        let up = simplified_eb_model(&model, &q, 2, &p).unwrap();
        let down = simplified_eb_model(&model, &q, 1, &p).unwrap();
        assert!((up.length - down.length).abs() < 1e-9, "{} vs {}", up.length, down.length);
        assert!(up.path.iter().all(|v| v.z >= -1e-9));
        assert!(down.path.iter().all(|v| v.z <= 1e-9));
    }

    #[test]
    fn path_clears_capsule() {
        let model = crossing_bar(-0.03);
        let p = params();
        let s = simplified_eb_model(&model, &DVector::zeros(1), 2, &p).unwrap();
        let c = &world_caps(&model)[0];
        for w in s.path.windows(2) {
            assert!(segment_segment(&w[0], &w[1], &c.p0, &c.p1).2 >= c.radius - 1e-6);
        }
    }

    fn world_caps(model: &RobotModel) -> Vec<Capsule> {
        crate::kinematics::world_capsules(model, &DVector::zeros(model.n_q())).unwrap()
    }

    #[test]
    fn deeper_wrap_has_positive_derivative() {
        // a link along x rotating about y; positive q lowers it onto a band
        // running along y under the link
        let model = RobotModel::serial(&[Vec3::y()], &[1.0], 0.08);
        let mut p = BandParams::new(Vec3::new(0.8, -1.0, -0.02), Vec3::new(0.8, 1.0, -0.02), 2.5);
        p.density = 900.0;
        let q = DVector::from_element(1, 0.05);
        let s = simplified_eb_model(&model, &q, 1, &p).unwrap();
        assert_eq!(s.sigma, 1);
        assert!(s.length > 2.0);
        let jac = band_length_jacobian(&model, &q, 1, &p).unwrap();
        let h = 1e-3;
        let lp = simplified_eb_model(&model, &DVector::from_element(1, 0.05 + h), 1, &p).unwrap().length;
        let lm = simplified_eb_model(&model, &DVector::from_element(1, 0.05 - h), 1, &p).unwrap().length;
        let secant = (lp - lm) / (2.0 * h);
        assert!(lp > s.length && s.length > lm);
        assert!(jac[(0, 0)] > 0.0);
        assert!((jac[(0, 0)] - secant).abs() <= 0.05 * secant.abs(), "{} vs {}", jac[(0, 0)], secant);
    }

    #[test]
    fn more_neighbours_keep_connectivity() {
        let model = crossing_bar(0.02);
        let mut p = params();
        let q = DVector::zeros(1);
        let (_, d_b) = deformation_direction(&model, &q, &p, 1).unwrap().unwrap();
        p.k_neighbors = 4;
        let g4 = build_surface_graph(&model, &q, &p, &d_b).unwrap();
        p.k_neighbors = 8;
        let g8 = build_surface_graph(&model, &q, &p, &d_b).unwrap();
        assert!(shortest_path(&g4).is_some());
        assert!(shortest_path(&g8).is_some());
        for (a, adj) in g4.adjacency.iter().enumerate() {
            for &(b, _) in adj {
                assert!(g8.has_edge(a, b));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn astar_matches_dijkstra(z in -0.09f64..0.09, angle in -0.6f64..0.6, sigma in 1u8..=2) {
            let model = crossing_bar(z);
            let mut p = params();
            p.density = 400.0;
            let q = DVector::from_element(1, angle);
            if let Some((_, d_b)) = deformation_direction(&model, &q, &p, sigma).unwrap() {
                let g = build_surface_graph(&model, &q, &p, &d_b).unwrap();
                let (ids, cost) = shortest_path(&g).unwrap();
                let oracle = dijkstra(&g).unwrap();
                prop_assert!((cost - oracle).abs() <= 1e-9 * (1.0 + oracle));
                prop_assert_eq!(ids[0], 0);
                prop_assert_eq!(*ids.last().unwrap(), 1);
                let s = simplified_eb_model(&model, &q, sigma, &p).unwrap();
                prop_assert!(s.length >= 2.0 - 1e-9);
            }
        }
    }
}
