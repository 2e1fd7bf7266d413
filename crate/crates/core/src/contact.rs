//! Contact detection against boxes and the band path, reduced contact
//! Jacobians and the unilateral linear-spring force update.
//!
//! Contact directions `n_C` point from the environment into the robot, so
//! `J_u q̇ < 0` means the contact point is pressing further into the
//! obstacle and the spring force grows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::band::BandState;
use crate::geometry::{perpendicular_basis, segment_box, segment_segment, Aabb, Vec3};
use crate::kinematics::{forward_kinematics, point_jacobian_with_poses, JointVector, KinematicsError, RobotModel};

pub const DEFAULT_ACTIVATION_DIST: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContactSource {
    Box(usize),
    Band,
    /// Contact given only by a prescribed Jacobian row (no geometry).
    Fixed(usize),
}

/// Identity of a contact across time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContactKey {
    pub link: usize,
    pub source: ContactSource,
}

impl std::fmt::Display for ContactKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.source {
            ContactSource::Box(id) => write!(f, "link{}-box{}", self.link, id),
            ContactSource::Band => write!(f, "link{}-band", self.link),
            ContactSource::Fixed(id) => write!(f, "fixed{id}"),
        }
    }
}

impl std::str::FromStr for ContactKey {
    type Err = String;

    /// Inverse of the `Display` form.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed contact key `{s}`");
        if let Some(id) = s.strip_prefix("fixed") {
            let id = id.parse().map_err(|_| bad())?;
            return Ok(ContactKey { link: 0, source: ContactSource::Fixed(id) });
        }
        let (link, source) = s.strip_prefix("link").and_then(|r| r.split_once('-')).ok_or_else(bad)?;
        let link = link.parse().map_err(|_| bad())?;
        let source = match source {
            "band" => ContactSource::Band,
            other => ContactSource::Box(other.strip_prefix("box").and_then(|id| id.parse().ok()).ok_or_else(bad)?),
        };
        Ok(ContactKey { link, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPoint {
    pub link: usize,
    pub p_world: Vec3,
    pub p_local: Vec3,
    /// Unit contact direction, from the environment into the robot.
    pub normal: Vec3,
    /// Overlap depth, `max(0, −distance)`.
    pub penetration: f64,
    /// Signed separation between link surface and obstacle.
    pub distance: f64,
    pub source: ContactSource,
}

impl ContactPoint {
    pub fn key(&self) -> ContactKey {
        ContactKey { link: self.link, source: self.source }
    }
}

/// Detects link contacts with `boxes` (every link) and with the band path
/// (allowed links only). Output is sorted by link, then source.
pub fn detect_contacts(
    model: &RobotModel,
    q: &JointVector,
    boxes: &[Aabb],
    band: Option<&BandState>,
    activation_dist: f64,
) -> Result<Vec<ContactPoint>, KinematicsError> {
    let poses = forward_kinematics(model, q)?;
    let mut out = Vec::new();
    for (link, (capsule, pose)) in model.links.iter().zip(poses.iter()).enumerate() {
        let world = capsule.transformed(pose);
        let inv = pose.inverse();
        for (id, aabb) in boxes.iter().enumerate() {
            let query = segment_box(&world.p0, &world.p1, aabb);
            let distance = query.distance - world.radius;
            if distance > activation_dist {
                continue;
            }
            let axis_pt = world.p0 + (world.p1 - world.p0) * query.t;
            let p_world = axis_pt - query.normal * world.radius;
            out.push(ContactPoint {
                link,
                p_world,
                p_local: inv.transform_point(&p_world.into()).coords,
                normal: query.normal,
                penetration: (-distance).max(0.0),
                distance,
                source: ContactSource::Box(id),
            });
        }
        if let Some(band) = band {
            if !model.is_allowed(link) {
                continue;
            }
            if let Some(c) = band_contact(&world.p0, &world.p1, world.radius, band, activation_dist) {
                let (p_world, normal, distance) = c;
                out.push(ContactPoint {
                    link,
                    p_world,
                    p_local: inv.transform_point(&p_world.into()).coords,
                    normal,
                    penetration: (-distance).max(0.0),
                    distance,
                    source: ContactSource::Band,
                });
            }
        }
    }
    out.sort_by_key(|a| a.key());
    Ok(out)
}

/// Closest approach of a capsule to the band polyline:
/// `(surface point, normal, signed distance)`.
fn band_contact(
    a0: &Vec3,
    a1: &Vec3,
    radius: f64,
    band: &BandState,
    activation_dist: f64,
) -> Option<(Vec3, Vec3, f64)> {
    let mut best: Option<(f64, Vec3, Vec3)> = None;
    for w in band.path.windows(2) {
        let (s, t, d) = segment_segment(a0, a1, &w[0], &w[1]);
        if best.as_ref().is_none_or(|b| d < b.0) {
            let axis_pt = a0 + (a1 - a0) * s;
            let band_pt = w[0] + (w[1] - w[0]) * t;
            best = Some((d, axis_pt, band_pt));
        }
    }
    let (d, axis_pt, band_pt) = best?;
    let distance = d - radius;
    if distance > activation_dist + band.surface_offset {
        return None;
    }
    let normal = if d > 1e-12 {
        (axis_pt - band_pt) / d
    } else {
        let axis = (a1 - a0).try_normalize(1e-12).unwrap_or_else(Vec3::x);
        let fallback = -band.d_b.try_normalize(1e-12).unwrap_or_else(|| perpendicular_basis(&axis).0);
        (fallback - axis * fallback.dot(&axis)).try_normalize(1e-12).unwrap_or_else(|| perpendicular_basis(&axis).0)
    };
    Some((axis_pt - normal * radius, normal, distance))
}

/// `J_u` with row `i = n_iᵀ J_C(q, p_i)`.
pub fn reduced_jacobian(
    model: &RobotModel,
    q: &JointVector,
    contacts: &[ContactPoint],
) -> Result<DMatrix<f64>, KinematicsError> {
    let poses = forward_kinematics(model, q)?;
    let mut ju = DMatrix::zeros(contacts.len(), model.n_q());
    for (i, c) in contacts.iter().enumerate() {
        if c.link >= model.n_links() {
            return Err(KinematicsError::InvalidLink(c.link));
        }
        let jc = point_jacobian_with_poses(model, &poses, c.link, &c.p_local);
        ju.row_mut(i).copy_from(&(c.normal.transpose() * jc));
    }
    Ok(ju)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpringUpdate {
    pub forces: DVector<f64>,
    /// Contacts whose raw update went negative and were clamped to zero.
    pub released: Vec<bool>,
}

/// `f_next = max(0, f_prev − K_c J_u Δq)`.
pub fn spring_force_update(
    k_c: &DVector<f64>,
    j_u: &DMatrix<f64>,
    dq: &DVector<f64>,
    f_prev: &DVector<f64>,
) -> SpringUpdate {
    let disp = j_u * dq;
    let raw = f_prev - k_c.component_mul(&disp);
    let released = raw.iter().map(|&v| v < 0.0).collect();
    SpringUpdate { forces: raw.map(|v| v.max(0.0)), released }
}

/// Active contacts with their spring state.
///
/// `gap` is the linearized separation of a contact that is not loaded
/// (zero when touching, negative when a rigid contact starts out
/// overlapping). `rigid` marks contacts that the hard-contact step treats
/// as non-penetration constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSet {
    pub contacts: Vec<ContactPoint>,
    pub f_c: DVector<f64>,
    pub k_c: DVector<f64>,
    pub rigid: Vec<bool>,
    pub gap: DVector<f64>,
    pub j_u: DMatrix<f64>,
}

impl ContactSet {
    pub fn empty(n_q: usize) -> Self {
        Self {
            contacts: Vec::new(),
            f_c: DVector::zeros(0),
            k_c: DVector::zeros(0),
            rigid: Vec::new(),
            gap: DVector::zeros(0),
            j_u: DMatrix::zeros(0, n_q),
        }
    }

    /// Contacts described only by a constant reduced Jacobian.
    pub fn fixed(j_u: DMatrix<f64>, k_c: DVector<f64>, f_c: DVector<f64>) -> Self {
        let n = j_u.nrows();
        assert_eq!(k_c.len(), n);
        assert_eq!(f_c.len(), n);
        Self { contacts: Vec::new(), f_c, k_c, rigid: vec![false; n], gap: DVector::zeros(n), j_u }
    }

    pub fn from_contacts(
        model: &RobotModel,
        q: &JointVector,
        contacts: Vec<ContactPoint>,
        k_c: DVector<f64>,
        f_c: DVector<f64>,
    ) -> Result<Self, KinematicsError> {
        let j_u = reduced_jacobian(model, q, &contacts)?;
        let n = contacts.len();
        Ok(Self { contacts, f_c, k_c, rigid: vec![false; n], gap: DVector::zeros(n), j_u })
    }

    pub fn len(&self) -> usize {
        self.f_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_geometric(&self) -> bool {
        !self.contacts.is_empty() && self.contacts.len() == self.len()
    }

    pub fn keys(&self) -> Vec<ContactKey> {
        if self.is_geometric() {
            self.contacts.iter().map(|c| c.key()).collect()
        } else {
            (0..self.len()).map(|i| ContactKey { link: 0, source: ContactSource::Fixed(i) }).collect()
        }
    }

    /// Reduced Jacobian at `q` with contact points and normals frozen.
    pub fn jacobian_at(&self, model: &RobotModel, q: &JointVector) -> Result<DMatrix<f64>, KinematicsError> {
        if self.is_geometric() {
            reduced_jacobian(model, q, &self.contacts)
        } else {
            Ok(self.j_u.clone())
        }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        if self.is_geometric() {
            self.contacts = idx.iter().map(|&i| self.contacts[i]).collect();
        }
        self.f_c = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.f_c[i]));
        self.k_c = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.k_c[i]));
        self.gap = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.gap[i]));
        self.rigid = idx.iter().map(|&i| self.rigid[i]).collect();
        self.j_u = self.j_u.select_rows(idx.iter());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    #[test]
    fn contact_key_text_round_trip() {
        let keys = [
            ContactKey { link: 2, source: ContactSource::Box(11) },
            ContactKey { link: 0, source: ContactSource::Band },
            ContactKey { link: 0, source: ContactSource::Fixed(3) },
        ];
        for k in keys {
            assert_eq!(k.to_string().parse::<ContactKey>(), Ok(k));
        }
        assert!("link-box1".parse::<ContactKey>().is_err());
        assert!("link1-wall".parse::<ContactKey>().is_err());
    }

    #[test]
    fn sphere_plane_penetration() {
        // one-link arm along x, capsule radius 0.1, box top face at z = 0
        let model = RobotModel::planar(&[1.0], 0.1);
        let floor = Aabb::new(Vec3::new(0.5, 0.0, -0.5 - 0.05), Vec3::new(2.0, 2.0, 0.5));
        let c = detect_contacts(&model, &DVector::zeros(1), &[floor], None, 1e-3).unwrap();
        assert_eq!(c.len(), 1);
        assert_abs_diff_eq!(c[0].penetration, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(c[0].normal, Vec3::z(), epsilon = 1e-12);
        assert_eq!(c[0].source, ContactSource::Box(0));
    }

    #[test]
    fn free_space_is_empty() {
        let model = RobotModel::planar(&[1.0, 1.0], 0.1);
        let far = Aabb::new(Vec3::new(10.0, 10.0, 10.0), Vec3::new(1.0, 1.0, 1.0));
        assert!(detect_contacts(&model, &DVector::zeros(2), &[far], None, 1e-3).unwrap().is_empty());
    }

    #[test]
    fn tangent_to_edge_touches() {
        // box edge along y through (1.5, *, 0.3); capsule axis at z = 0 ends at x = 1.
        // Closest point of the edge to the segment end: distance = sqrt(0.5² + 0.3²).
        let model = RobotModel::planar(&[1.0], 1.0);
        let r = (0.5f64 * 0.5 + 0.3 * 0.3).sqrt();
        let mut m = model.clone();
        m.links[0].radius = r;
        let b = Aabb::new(Vec3::new(2.0, 0.0, 0.8), Vec3::new(0.5, 1.0, 0.5));
        let c = detect_contacts(&m, &DVector::zeros(1), &[b], None, 1e-3).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].penetration.abs() <= 1e-9);
        // random-point sampling oracle for the capsule-box distance
        let mut best = f64::INFINITY;
        for k in 0..=100_000 {
            let p = Vec3::new(k as f64 / 100_000.0, 0.0, 0.0);
            best = best.min(b.signed_distance(&p));
        }
        assert!((best - r).abs() < 1e-9);
    }

    #[test]
    fn ordering_is_canonical() {
        let model = RobotModel::planar(&[1.0, 1.0], 0.1);
        let a = Aabb::new(Vec3::new(0.5, -0.15, 0.0), Vec3::new(0.2, 0.1, 0.1));
        let b = Aabb::new(Vec3::new(1.5, 0.15, 0.0), Vec3::new(0.2, 0.1, 0.1));
        let q = DVector::zeros(2);
        let c1 = detect_contacts(&model, &q, &[a, b], None, 1e-3).unwrap();
        let c2 = detect_contacts(&model, &q, &[b, a], None, 1e-3).unwrap();
        assert_eq!(c1.len(), 2);
        assert_eq!(c1.iter().map(|c| c.link).collect::<Vec<_>>(), c2.iter().map(|c| c.link).collect::<Vec<_>>());
        assert_abs_diff_eq!(c1[0].p_world, c2[0].p_world, epsilon = 1e-12);
    }

    #[test]
    fn reduced_jacobian_tip_row() {
        let model = RobotModel::planar(&[1.0, 1.0], 0.1);
        let tip = ContactPoint {
            link: 1,
            p_world: Vec3::new(2.0, 0.0, 0.0),
            p_local: Vec3::new(1.0, 0.0, 0.0),
            normal: Vec3::y(),
            penetration: 0.0,
            distance: 0.0,
            source: ContactSource::Box(0),
        };
        let ju = reduced_jacobian(&model, &DVector::zeros(2), &[tip]).unwrap();
        assert_eq!(ju.nrows(), 1);
        assert_abs_diff_eq!(ju, DMatrix::from_row_slice(1, 2, &[2.0, 1.0]), epsilon = 1e-15);

        let mut sideways = tip;
        sideways.normal = Vec3::z();
        let ju = reduced_jacobian(&model, &DVector::zeros(2), &[sideways]).unwrap();
        assert_eq!(ju.amax(), 0.0);
    }

    #[test]
    fn spring_update_cases() {
        let one = |v: f64| DVector::from_element(1, v);
        let ju = DMatrix::from_element(1, 1, 1.0);
        let u = spring_force_update(&one(200.0), &ju, &one(-0.005), &one(0.0));
        assert_abs_diff_eq!(u.forces[0], 1.0, epsilon = 1e-12);
        assert_eq!(u.released, vec![false]);

        let u = spring_force_update(&one(200.0), &ju, &one(0.0), &one(0.7));
        assert_eq!(u.forces[0], 0.7);

        let u = spring_force_update(&one(100.0), &ju, &one(0.02), &one(1.0));
        assert_eq!(u.forces[0], 0.0);
        assert_eq!(u.released, vec![true]);
    }

    use proptest::prelude::*;

    fn arm() -> RobotModel {
        RobotModel::serial(&[Vec3::z(), Vec3::y(), Vec3::new(1.0, 0.0, 1.0)], &[0.7, 0.5, 0.4], 0.05)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn jacobian_rows_match_finite_differences(
            q in prop::collection::vec(-2.5f64..2.5, 3),
            link in 0usize..3,
            s in 0.0f64..1.0,
            n in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let model = arm();
            let normal = Vec3::from(n);
            prop_assume!(normal.norm() > 0.1);
            let normal = normal.normalize();
            let q = DVector::from_vec(q);
            let p_local = Vec3::new(s * model.links[link].length(), 0.02, -0.01);
            let c = ContactPoint {
                link, p_world: Vec3::zeros(), p_local, normal,
                penetration: 0.0, distance: 0.0, source: ContactSource::Box(0),
            };
            let ju = reduced_jacobian(&model, &q, &[c]).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[j] += h;
                qm[j] -= h;
                let xp = crate::kinematics::point_world(&model, &qp, link, &p_local).unwrap();
                let xm = crate::kinematics::point_world(&model, &qm, link, &p_local).unwrap();
                let fd = normal.dot(&(xp - xm)) / (2.0 * h);
                prop_assert!((ju[(0, j)] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {}", ju[(0, j)], fd);
            }
        }

        #[test]
        fn spring_update_is_nonnegative(
            k in prop::collection::vec(0.0f64..1e4, 3),
            f in prop::collection::vec(0.0f64..50.0, 3),
            dq in prop::collection::vec(-0.1f64..0.1, 2),
            j in prop::collection::vec(-2.0f64..2.0, 6),
        ) {
            let u = spring_force_update(
                &DVector::from_vec(k), &DMatrix::from_vec(3, 2, j), &DVector::from_vec(dq), &DVector::from_vec(f),
            );
            prop_assert!(u.forces.iter().all(|&v| v >= 0.0));
        }
    }
}
