//! Serial-chain arm model: forward kinematics, point Jacobians and capsule
//! link geometry.
//!
//! Link `i` is rigidly attached to the output of revolute joint `i`. The
//! frame of link `i` is `T_{i-1} · origin_i · Rot(axis_i, q_i)`.

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, Unit, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{perpendicular_basis, Vec3};

pub type JointVector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("joint vector has {got} entries, model has {expected} joints")]
    Dimension { expected: usize, got: usize },
    #[error("link index {0} out of range")]
    InvalidLink(usize),
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: Unit<Vec3>,
    /// Transform from the parent link frame to the joint frame at `q = 0`.
    pub origin: Isometry3<f64>,
}

/// Segment `[p0, p1]` swept by a sphere of `radius`, in link coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub p0: Vec3,
    pub p1: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn transformed(&self, pose: &Isometry3<f64>) -> Capsule {
        Capsule {
            p0: pose.transform_point(&self.p0.into()).coords,
            p1: pose.transform_point(&self.p1.into()).coords,
            radius: self.radius,
        }
    }

    pub fn length(&self) -> f64 {
        (self.p1 - self.p0).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub joints: Vec<Joint>,
    pub links: Vec<Capsule>,
    pub k_q: DVector<f64>,
    pub d_q: DVector<f64>,
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
    /// Links permitted to touch the elastic band (0-based).
    pub allowed_links: Vec<usize>,
    /// Tool point in the frame of the last link.
    pub ee_point: Vec3,
}

impl RobotModel {
    pub fn new(
        joints: Vec<Joint>,
        links: Vec<Capsule>,
        k_q: DVector<f64>,
        d_q: DVector<f64>,
        q_min: DVector<f64>,
        q_max: DVector<f64>,
        allowed_links: Vec<usize>,
        ee_point: Vec3,
    ) -> Result<Self, KinematicsError> {
        let n = joints.len();
        let bad = |m: &str| Err(KinematicsError::InvalidModel(m.to_string()));
        if n == 0 {
            return bad("robot has no joints");
        }
        if links.len() != n {
            return bad("one capsule per joint is required");
        }
        if k_q.len() != n || d_q.len() != n || q_min.len() != n || q_max.len() != n {
            return bad("gain and limit vectors must have one entry per joint");
        }
        if k_q.iter().chain(d_q.iter()).any(|&v| !(v > 0.0)) {
            return bad("joint stiffness and damping must be positive");
        }
        if q_min.iter().zip(q_max.iter()).any(|(lo, hi)| !(lo <= hi)) {
            return bad("joint lower limit exceeds upper limit");
        }
        if links.iter().any(|c| !(c.radius > 0.0)) {
            return bad("capsule radius must be positive");
        }
        if allowed_links.iter().any(|&l| l >= n) {
            return bad("allowed link index out of range");
        }
        Ok(Self { joints, links, k_q, d_q, q_min, q_max, allowed_links, ee_point })
    }

    /// Arm whose links lie along their local x axes, each joint placed at
    /// the tip of the previous link. Unit gains, ±π limits.
    pub fn serial(axes: &[Vec3], lengths: &[f64], radius: f64) -> Self {
        assert_eq!(axes.len(), lengths.len());
        let n = axes.len();
        let joints = (0..n)
            .map(|i| Joint {
                axis: Unit::new_normalize(axes[i]),
                origin: if i == 0 {
                    Isometry3::identity()
                } else {
                    Isometry3::from_parts(Translation3::new(lengths[i - 1], 0.0, 0.0), UnitQuaternion::identity())
                },
            })
            .collect();
        let links = lengths
            .iter()
            .map(|&l| Capsule { p0: Vec3::zeros(), p1: Vec3::new(l, 0.0, 0.0), radius })
            .collect();
        let pi = std::f64::consts::PI;
        Self::new(
            joints,
            links,
            DVector::from_element(n, 1.0),
            DVector::from_element(n, 1.0),
            DVector::from_element(n, -pi),
            DVector::from_element(n, pi),
            (0..n).collect(),
            Vec3::new(lengths[n - 1], 0.0, 0.0),
        )
        .expect("serial arm parameters are valid")
    }

    /// Planar arm in the xy plane (all joints about world z).
    pub fn planar(lengths: &[f64], radius: f64) -> Self {
        Self::serial(&vec![Vec3::z(); lengths.len()], lengths, radius)
    }

    pub fn with_gains(mut self, k_q: f64, d_q: f64) -> Self {
        self.k_q.fill(k_q);
        self.d_q.fill(d_q);
        self
    }

    pub fn n_q(&self) -> usize {
        self.joints.len()
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn is_allowed(&self, link: usize) -> bool {
        self.allowed_links.contains(&link)
    }

    pub fn check_q(&self, q: &JointVector) -> Result<(), KinematicsError> {
        if q.len() != self.n_q() {
            return Err(KinematicsError::Dimension { expected: self.n_q(), got: q.len() });
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.iter().enumerate().all(|(i, &v)| v >= self.q_min[i] && v <= self.q_max[i])
    }

    pub fn clamp_to_limits(&self, q: &JointVector) -> JointVector {
        DVector::from_fn(q.len(), |i, _| q[i].clamp(self.q_min[i], self.q_max[i]))
    }
}

/// World pose of every link frame.
pub fn forward_kinematics(model: &RobotModel, q: &JointVector) -> Result<Vec<Isometry3<f64>>, KinematicsError> {
    model.check_q(q)?;
    let mut poses = Vec::with_capacity(model.n_q());
    let mut current = Isometry3::identity();
    for (i, joint) in model.joints.iter().enumerate() {
        let rot = UnitQuaternion::from_axis_angle(&joint.axis, q[i]);
        current = current * joint.origin * Isometry3::from_parts(Translation3::identity(), rot);
        poses.push(current);
    }
    Ok(poses)
}

pub fn point_world(model: &RobotModel, q: &JointVector, link: usize, p_local: &Vec3) -> Result<Vec3, KinematicsError> {
    if link >= model.n_links() {
        return Err(KinematicsError::InvalidLink(link));
    }
    let poses = forward_kinematics(model, q)?;
    Ok(poses[link].transform_point(&(*p_local).into()).coords)
}

/// Linear-velocity Jacobian (3 × n_q) of a material point of `link`.
pub fn point_jacobian(
    model: &RobotModel,
    q: &JointVector,
    link: usize,
    p_local: &Vec3,
) -> Result<DMatrix<f64>, KinematicsError> {
    if link >= model.n_links() {
        return Err(KinematicsError::InvalidLink(link));
    }
    let poses = forward_kinematics(model, q)?;
    Ok(point_jacobian_with_poses(model, &poses, link, p_local))
}

pub(crate) fn point_jacobian_with_poses(
    model: &RobotModel,
    poses: &[Isometry3<f64>],
    link: usize,
    p_local: &Vec3,
) -> DMatrix<f64> {
    let p = poses[link].transform_point(&(*p_local).into()).coords;
    let mut jac = DMatrix::zeros(3, model.n_q());
    for j in 0..=link {
        let axis = poses[j].rotation * model.joints[j].axis.into_inner();
        let origin = poses[j].translation.vector;
        let col = axis.cross(&(p - origin));
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&col);
    }
    jac
}

pub fn end_effector(model: &RobotModel, q: &JointVector) -> Result<Vec3, KinematicsError> {
    point_world(model, q, model.n_links() - 1, &model.ee_point)
}

pub fn end_effector_jacobian(model: &RobotModel, q: &JointVector) -> Result<DMatrix<f64>, KinematicsError> {
    point_jacobian(model, q, model.n_links() - 1, &model.ee_point)
}

/// World-frame capsules of all links.
pub fn world_capsules(model: &RobotModel, q: &JointVector) -> Result<Vec<Capsule>, KinematicsError> {
    let poses = forward_kinematics(model, q)?;
    Ok(model.links.iter().zip(poses.iter()).map(|(c, p)| c.transformed(p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub normal: Vec3,
}

/// Structured sample of a capsule surface: rings along the cylinder plus
/// latitude rings on both hemispherical caps.
#[derive(Debug, Clone)]
pub struct CapsuleSampling {
    /// Points in the capsule's own frame (the one `p0`/`p1` are given in).
    pub points: Vec<SurfacePoint>,
    /// Largest angle (rad) between neighbouring samples seen from the axis.
    pub max_angular_step: f64,
}

impl CapsuleSampling {
    /// Radius scale at which chords between neighbouring samples clear the
    /// true capsule surface.
    pub fn chord_inflation(&self) -> f64 {
        1.0 / (0.5 * self.max_angular_step).cos()
    }
}

pub fn sample_capsule(capsule: &Capsule, density: f64, radius_scale: f64) -> CapsuleSampling {
    use std::f64::consts::PI;
    let spacing = 1.0 / density.sqrt();
    let r = capsule.radius;
    let rs = r * radius_scale;
    let axis_vec = capsule.p1 - capsule.p0;
    let len = axis_vec.norm();
    let axis = if len > 1e-12 { axis_vec / len } else { Vec3::x() };
    let (e1, e2) = perpendicular_basis(&axis);

    let n_ring = (2 * ((PI * r / spacing).ceil() as usize)).max(8);
    let n_axial = if len > 1e-12 { ((len / spacing).ceil() as usize + 1).max(2) } else { 1 };
    let n_lat = ((0.5 * PI * r / spacing).ceil() as usize).max(1);

    let mut points = Vec::new();
    let mut max_step = 2.0 * PI / n_ring as f64;
    for k in 0..n_axial {
        let t = if n_axial == 1 { 0.0 } else { k as f64 / (n_axial - 1) as f64 };
        let center = capsule.p0 + axis_vec * t;
        for j in 0..n_ring {
            let th = 2.0 * PI * j as f64 / n_ring as f64;
            let n = e1 * th.cos() + e2 * th.sin();
            points.push(SurfacePoint { point: center + n * rs, normal: n });
        }
    }
    let lat_step = 0.5 * PI / n_lat as f64;
    max_step = max_step.max(lat_step);
    for (center, dir) in [(capsule.p0, -axis), (capsule.p1, axis)] {
        for l in 1..=n_lat {
            let phi = l as f64 * lat_step;
            if l == n_lat {
                points.push(SurfacePoint { point: center + dir * rs, normal: dir });
                continue;
            }
            let count = (2 * ((n_ring as f64 * phi.cos() / 2.0).ceil() as usize)).max(4);
            let dth = 2.0 * PI / count as f64;
            let cos_gamma = phi.sin().powi(2) + phi.cos().powi(2) * dth.cos();
            max_step = max_step.max(cos_gamma.clamp(-1.0, 1.0).acos());
            for j in 0..count {
                let th = dth * j as f64;
                let n = (e1 * th.cos() + e2 * th.sin()) * phi.cos() + dir * phi.sin();
                points.push(SurfacePoint { point: center + n * rs, normal: n });
            }
        }
    }
    CapsuleSampling { points, max_angular_step: max_step }
}

/// World-frame surface samples of `link` at `density` points per m².
pub fn sample_link_surface(
    model: &RobotModel,
    q: &JointVector,
    link: usize,
    density: f64,
) -> Result<Vec<SurfacePoint>, KinematicsError> {
    if link >= model.n_links() {
        return Err(KinematicsError::InvalidLink(link));
    }
    let poses = forward_kinematics(model, q)?;
    let pose = &poses[link];
    Ok(sample_capsule(&model.links[link], density, 1.0)
        .points
        .into_iter()
        .map(|sp| SurfacePoint {
            point: pose.transform_point(&sp.point.into()).coords,
            normal: pose.rotation * sp.normal,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_segment;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::FRAC_PI_4;

    fn two_link() -> RobotModel {
        RobotModel::planar(&[1.0, 1.0], 0.05)
    }

    fn tip(model: &RobotModel, q: &[f64]) -> Vec3 {
        end_effector(model, &DVector::from_row_slice(q)).unwrap()
    }

    #[test]
    fn planar_fk_closed_form() {
        let m = two_link();
        assert_abs_diff_eq!(tip(&m, &[0.0, 0.0]), Vec3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(tip(&m, &[FRAC_PI_2, 0.0]), Vec3::new(0.0, 2.0, 0.0), epsilon = 1e-15);
        let expect = Vec3::new(FRAC_PI_4.cos() + FRAC_PI_2.cos(), FRAC_PI_4.sin() + FRAC_PI_2.sin(), 0.0);
        assert_abs_diff_eq!(tip(&m, &[FRAC_PI_4, FRAC_PI_4]), expect, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = two_link();
        assert_eq!(
            forward_kinematics(&m, &DVector::zeros(3)).unwrap_err(),
            KinematicsError::Dimension { expected: 2, got: 3 }
        );
        assert_eq!(
            point_jacobian(&m, &DVector::zeros(2), 5, &Vec3::zeros()).unwrap_err(),
            KinematicsError::InvalidLink(5)
        );
    }

    #[test]
    fn tip_jacobian_matches_finite_differences() {
        let m = two_link();
        let q = DVector::zeros(2);
        let j = point_jacobian(&m, &q, 1, &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let h = 1e-6;
        let mut fd = DMatrix::zeros(3, 2);
        for c in 0..2 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[c] += h;
            qm[c] -= h;
            let d = (tip(&m, qp.as_slice()) - tip(&m, qm.as_slice())) / (2.0 * h);
            fd.set_column(c, &d);
        }
        let expect = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 2.0, 1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(fd, expect, epsilon = 1e-8);
        assert_abs_diff_eq!(j, expect, epsilon = 1e-15);
    }

    #[test]
    fn single_link_tip_column() {
        let m = RobotModel::planar(&[1.0], 0.05);
        let j = point_jacobian(&m, &DVector::zeros(1), 0, &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(j.column(0).into_owned(), DVector::from_row_slice(&[0.0, 1.0, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn distal_columns_are_zero() {
        let m = RobotModel::serial(&[Vec3::z(), Vec3::y(), Vec3::x()], &[0.5, 0.4, 0.3], 0.05);
        let q = DVector::from_row_slice(&[0.3, -0.7, 1.1]);
        let j = point_jacobian(&m, &q, 0, &Vec3::new(0.2, 0.01, 0.0)).unwrap();
        assert_eq!(j.column(1).amax(), 0.0);
        assert_eq!(j.column(2).amax(), 0.0);
    }

    #[test]
    fn surface_points_on_capsule() {
        let m = RobotModel::planar(&[0.6, 0.4], 0.1);
        let q = DVector::from_row_slice(&[0.4, -0.9]);
        let caps = world_capsules(&m, &q).unwrap();
        for link in 0..2 {
            let pts = sample_link_surface(&m, &q, link, 400.0).unwrap();
            assert!(!pts.is_empty());
            for sp in pts {
                let (t, d) = point_segment(&sp.point, &caps[link].p0, &caps[link].p1);
                assert!((d - 0.1).abs() <= 1e-9, "distance {d}");
                assert!((sp.normal.norm() - 1.0).abs() <= 1e-12);
                let axis_pt = caps[link].p0 + (caps[link].p1 - caps[link].p0) * t;
                assert!(sp.normal.dot(&(sp.point - axis_pt)) > 0.0);
            }
        }
    }

    #[test]
    fn sampling_scales_with_area_density() {
        let c = Capsule { p0: Vec3::zeros(), p1: Vec3::new(0.5, 0.0, 0.0), radius: 0.1 };
        let base = sample_capsule(&c, 400.0, 1.0).points.len() as f64;
        let double = sample_capsule(&c, 800.0, 1.0).points.len() as f64;
        let quad = sample_capsule(&c, 1600.0, 1.0).points.len() as f64;
        let r2 = double / base;
        let r4 = quad / base;
        assert!((1.6..=2.4).contains(&r2), "areal doubling ratio {r2}");
        assert!((3.5..=4.5).contains(&r4), "linear doubling ratio {r4}");
        // structured grid: identical on repeat
        assert_eq!(
            sample_capsule(&c, 400.0, 1.0).points,
            sample_capsule(&c, 400.0, 1.0).points
        );
    }
}
