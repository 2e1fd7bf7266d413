//! Contact-aware QP controller with infeasibility relaxation, and the
//! null-space force-regulation baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::ContactKey;
use crate::estimation::{harvest_regressor, StiffnessEstimator};
use crate::kinematics::{JointVector, RobotModel};
use crate::qp::{QpError, QpStatus, QuadraticProgram};
use crate::worldsim::LogRow;

/// Stiffness used in the controller model for rigid contacts.
pub const RIGID_STIFFNESS_CAP: f64 = 1e7;
const PINV_DAMPING: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("desired force {0} outside the configured bounds")]
    ForceTargetOutOfBounds(f64),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub f_max: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_eps_f")]
    pub eps_f: f64,
    #[serde(default = "default_dq_max")]
    pub dq_max: f64,
    #[serde(default = "default_gamma_f")]
    pub gamma_f: f64,
    /// Allowed desired-force range for the null-space baseline.
    #[serde(default)]
    pub f_d_bounds: Option<[f64; 2]>,
}

fn default_eps() -> f64 {
    0.1
}
fn default_eps_f() -> f64 {
    1e-3
}
fn default_dq_max() -> f64 {
    0.02
}
fn default_gamma_f() -> f64 {
    1e-3
}

impl ControllerConfig {
    pub fn new(f_max: f64) -> Self {
        Self {
            f_max,
            eps: default_eps(),
            eps_f: default_eps_f(),
            dq_max: default_dq_max(),
            gamma_f: default_gamma_f(),
            f_d_bounds: None,
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::InvalidConfig(m.to_string()));
        if !(self.f_max > 0.0 && self.f_max.is_finite()) {
            return bad("f_max must be positive");
        }
        if !(self.eps >= 0.0 && self.eps_f >= 0.0) {
            return bad("eps and eps_f must be non-negative");
        }
        if !(self.dq_max > 0.0) {
            return bad("dq_max must be positive");
        }
        if !(self.gamma_f >= 0.0) {
            return bad("gamma_f must be non-negative");
        }
        if let Some([lo, hi]) = self.f_d_bounds {
            if !(lo <= hi) {
                return bad("f_d_bounds must be ordered");
            }
        }
        Ok(())
    }

    pub fn f_d_bounds(&self) -> [f64; 2] {
        self.f_d_bounds.unwrap_or([0.0, self.f_max])
    }

    /// Default desired force of the null-space baseline.
    pub fn default_f_d(&self) -> f64 {
        0.5 * self.f_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep {
    pub q_cmd_next: JointVector,
    pub q_pred: JointVector,
    pub f_pred: DVector<f64>,
    pub relaxed: bool,
    pub stalled: bool,
    pub qp_status: QpStatus,
}

/// Inputs shared by the contact-aware steps.
#[derive(Debug, Clone, Copy)]
pub struct ControlInput<'a> {
    pub k_hat: &'a DVector<f64>,
    pub q: &'a JointVector,
    pub q_cmd: &'a JointVector,
    pub f: &'a DVector<f64>,
    pub j_u: &'a DMatrix<f64>,
    pub q_ref: &'a JointVector,
}

impl ControlInput<'_> {
    fn check(&self, model: &RobotModel) -> Result<(), ControlError> {
        let n = model.n_q();
        let m = self.f.len();
        let ok = self.q.len() == n
            && self.q_cmd.len() == n
            && self.q_ref.len() == n
            && self.k_hat.len() == m
            && self.j_u.nrows() == m
            && self.j_u.ncols() == n;
        if !ok {
            return Err(ControlError::Dimension(format!("{n} joints, {m} contacts")));
        }
        Ok(())
    }
}

/// Solves the contact-aware QP over `[q, q_cmd, f]`, falling back to the
/// relaxed problem when a measured force already exceeds `f_max` or the
/// nominal problem is infeasible. If both fail the command is held and the
/// step is flagged as stalled.
pub fn contact_aware_step(
    cfg: &ControllerConfig,
    model: &RobotModel,
    input: &ControlInput,
) -> Result<ControlStep, ControlError> {
    cfg.validate()?;
    input.check(model)?;
    if input.f.iter().any(|&f| f > cfg.f_max) {
        return relaxed_step(cfg, model, input);
    }
    let step = solve(cfg, model, input, false)?;
    if step.qp_status == QpStatus::Optimal {
        return Ok(step);
    }
    relaxed_step(cfg, model, input)
}

/// The relaxed problem: adds `ε_f‖f‖²` and bounds each force by
/// `max(f_i^l, f_max)`.
pub fn relaxed_step(cfg: &ControllerConfig, model: &RobotModel, input: &ControlInput) -> Result<ControlStep, ControlError> {
    cfg.validate()?;
    input.check(model)?;
    let step = solve(cfg, model, input, true)?;
    if step.qp_status == QpStatus::Optimal {
        return Ok(step);
    }
    Ok(ControlStep {
        q_cmd_next: input.q_cmd.clone(),
        q_pred: input.q.clone(),
        f_pred: input.f.clone(),
        relaxed: true,
        stalled: true,
        qp_status: step.qp_status,
    })
}

fn solve(cfg: &ControllerConfig, model: &RobotModel, input: &ControlInput, relaxed: bool) -> Result<ControlStep, ControlError> {
    let n = model.n_q();
    let m = input.f.len();
    let nx = 2 * n + m;
    let (iq, ic, i_f) = (0, n, 2 * n);
    let kq = DMatrix::from_diagonal(&model.k_q);
    let kj = DMatrix::from_diagonal(input.k_hat) * input.j_u;

    let mut h = DMatrix::zeros(nx, nx);
    let mut g = DVector::zeros(nx);
    for i in 0..n {
        h[(ic + i, ic + i)] = 2.0 * (1.0 + cfg.eps);
        g[ic + i] = -2.0 * (input.q_ref[i] + cfg.eps * input.q_cmd[i]);
    }
    if relaxed {
        for i in 0..m {
            h[(i_f + i, i_f + i)] = 2.0 * cfg.eps_f;
        }
    }

    let mut a_eq = DMatrix::zeros(n + m, nx);
    let mut b_eq = DVector::zeros(n + m);
    a_eq.view_mut((0, iq), (n, n)).copy_from(&kq);
    a_eq.view_mut((0, ic), (n, n)).copy_from(&(-&kq));
    a_eq.view_mut((0, i_f), (n, m)).copy_from(&(-input.j_u.transpose()));
    a_eq.view_mut((n, iq), (m, n)).copy_from(&kj);
    a_eq.view_mut((n, i_f), (m, m)).fill_with_identity();
    b_eq.rows_mut(n, m).copy_from(&(input.f + &kj * input.q));

    let mut a_in = DMatrix::zeros(m + 2 * n, nx);
    let mut b_in = DVector::zeros(m + 2 * n);
    for i in 0..m {
        a_in[(i, i_f + i)] = 1.0;
        b_in[i] = if relaxed { input.f[i].max(cfg.f_max) } else { cfg.f_max };
    }
    for i in 0..n {
        a_in[(m + i, ic + i)] = 1.0;
        b_in[m + i] = input.q_cmd[i] + cfg.dq_max;
        a_in[(m + n + i, ic + i)] = -1.0;
        b_in[m + n + i] = -(input.q_cmd[i] - cfg.dq_max);
    }

    let sol = QuadraticProgram::new(h, g)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, b_in)
        .solve()?;
    let x = &sol.x;
    Ok(ControlStep {
        q_cmd_next: x.rows(ic, n).into_owned(),
        q_pred: x.rows(iq, n).into_owned(),
        f_pred: x.rows(i_f, m).into_owned(),
        relaxed,
        stalled: false,
        qp_status: sol.status,
    })
}

/// `γ_f J_1ᵀ(f − f_d) + (I − J_1^# J_1) q̇_0` with `J_1 = K̂_c J_u` and a
/// damped pseudoinverse.
pub fn nullspace_force_step(
    cfg: &ControllerConfig,
    j1: &DMatrix<f64>,
    f: &DVector<f64>,
    f_d: &DVector<f64>,
    qdot0: &DVector<f64>,
) -> Result<DVector<f64>, ControlError> {
    let [lo, hi] = cfg.f_d_bounds();
    if let Some(&bad) = f_d.iter().find(|&&v| v < lo || v > hi) {
        return Err(ControlError::ForceTargetOutOfBounds(bad));
    }
    if f.len() != j1.nrows() || f_d.len() != j1.nrows() || qdot0.len() != j1.ncols() {
        return Err(ControlError::Dimension("null-space step".into()));
    }
    let n = j1.ncols();
    let m = j1.nrows();
    let gram = j1 * j1.transpose() + DMatrix::identity(m, m) * PINV_DAMPING * PINV_DAMPING;
    let pinv = match gram.cholesky() {
        Some(c) => j1.transpose() * c.inverse(),
        None => DMatrix::zeros(n, m),
    };
    let null = DMatrix::identity(n, n) - pinv * j1;
    Ok(j1.transpose() * (f - f_d) * cfg.gamma_f + null * qdot0)
}

/// Moves toward `q_goal` by at most `step` per joint, along the difference.
pub fn goal_task_reference(q: &JointVector, q_goal: &JointVector, step: f64) -> JointVector {
    let diff = q_goal - q;
    let largest = diff.amax();
    if largest <= step {
        q_goal.clone()
    } else {
        q + diff * (step / largest)
    }
}

/// What a controller sees at step `l`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub step: usize,
    pub q: JointVector,
    pub q_cmd: JointVector,
    pub keys: Vec<ContactKey>,
    pub f: DVector<f64>,
    pub j_u: DMatrix<f64>,
    /// Nominal stiffness of each contact, for model-matched controllers.
    pub k_c: DVector<f64>,
    pub q_ref_next: JointVector,
}

pub trait Controller {
    fn command(&mut self, model: &RobotModel, obs: &Observation) -> Result<ControlStep, ControlError>;

    /// Called with the log rows before and after each step.
    fn observe(&mut self, _prev: &LogRow, _next: &LogRow) {}

    fn estimator(&self) -> Option<&StiffnessEstimator> {
        None
    }
}

#[derive(Debug, Clone)]
pub enum StiffnessModel {
    /// Uses the nominal contact stiffness, capped for rigid contacts.
    Known,
    Estimated(StiffnessEstimator),
}

#[derive(Debug, Clone)]
pub struct ContactAwareController {
    pub config: ControllerConfig,
    pub stiffness: StiffnessModel,
}

impl ContactAwareController {
    pub fn new(config: ControllerConfig, stiffness: StiffnessModel) -> Self {
        Self { config, stiffness }
    }

    fn k_hat(&self, obs: &Observation) -> DVector<f64> {
        DVector::from_iterator(
            obs.keys.len(),
            obs.keys.iter().enumerate().map(|(i, key)| {
                let k = match &self.stiffness {
                    StiffnessModel::Known => obs.k_c[i],
                    StiffnessModel::Estimated(est) => est.k_hat(key),
                };
                k.min(RIGID_STIFFNESS_CAP)
            }),
        )
    }
}

impl Controller for ContactAwareController {
    fn command(&mut self, model: &RobotModel, obs: &Observation) -> Result<ControlStep, ControlError> {
        let k_hat = self.k_hat(obs);
        let input = ControlInput { k_hat: &k_hat, q: &obs.q, q_cmd: &obs.q_cmd, f: &obs.f, j_u: &obs.j_u, q_ref: &obs.q_ref_next };
        contact_aware_step(&self.config, model, &input)
    }

    fn observe(&mut self, prev: &LogRow, next: &LogRow) {
        if let StiffnessModel::Estimated(est) = &mut self.stiffness {
            if let Ok(sample) = harvest_regressor(prev, next) {
                // a failed update leaves the previous estimate in place
                let _ = est.update(next.step, &sample);
            }
        }
    }

    fn estimator(&self) -> Option<&StiffnessEstimator> {
        match &self.stiffness {
            StiffnessModel::Estimated(est) => Some(est),
            StiffnessModel::Known => None,
        }
    }
}

/// Null-space baseline: regulates every contact force toward a fixed
/// desired value while tracking the reference in the null space.
#[derive(Debug, Clone)]
pub struct NullspaceController {
    pub config: ControllerConfig,
    pub f_d: f64,
}

impl NullspaceController {
    pub fn new(config: ControllerConfig) -> Self {
        let f_d = config.default_f_d();
        Self { config, f_d }
    }
}

impl Controller for NullspaceController {
    fn command(&mut self, _model: &RobotModel, obs: &Observation) -> Result<ControlStep, ControlError> {
        let k = obs.k_c.map(|v| v.min(RIGID_STIFFNESS_CAP));
        let j1 = DMatrix::from_diagonal(&k) * &obs.j_u;
        let f_d = DVector::from_element(obs.f.len(), self.f_d);
        let qdot0 = &obs.q_ref_next - &obs.q;
        let qdot = nullspace_force_step(&self.config, &j1, &obs.f, &f_d, &qdot0)?;
        let cap = self.config.dq_max;
        let q_cmd_next = &obs.q_cmd + qdot.map(|v| v.clamp(-cap, cap));
        Ok(ControlStep {
            q_pred: obs.q.clone(),
            f_pred: obs.f.clone(),
            q_cmd_next,
            relaxed: false,
            stalled: false,
            qp_status: QpStatus::Optimal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use crate::geometry::Vec3;

    fn one_dof() -> RobotModel {
        RobotModel::planar(&[1.0], 0.05).with_gains(100.0, 1.0)
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn cfg(f_max: f64, eps: f64, dq_max: f64) -> ControllerConfig {
        ControllerConfig { eps, dq_max, ..ControllerConfig::new(f_max) }
    }

    #[test]
    fn worked_example_matches_grid_oracle() {
        let model = one_dof();
        let (k, j, f0, q_ref) = (v(100.0), DMatrix::from_element(1, 1, -1.0), v(0.0), v(0.1));
        let input = ControlInput { k_hat: &k, q: &v(0.0), q_cmd: &v(0.0), f: &f0, j_u: &j, q_ref: &q_ref };
        let s = contact_aware_step(&cfg(2.0, 0.0, 1.0), &model, &input).unwrap();
        assert!(!s.relaxed);
        assert_abs_diff_eq!(s.q_cmd_next[0], 0.04, epsilon = 1e-9);
        assert_abs_diff_eq!(s.q_pred[0], 0.02, epsilon = 1e-9);
        assert_abs_diff_eq!(s.f_pred[0], 2.0, epsilon = 1e-9);

        // grid search over q_cmd with q, f eliminated by hand
        let mut best = (f64::INFINITY, 0.0);
        for i in -100_000..=100_000 {
            let qc = i as f64 * 1e-5;
            let f = 50.0 * qc;
            if f > 2.0 {
                continue;
            }
            let cost = (qc - 0.1) * (qc - 0.1);
            if cost < best.0 {
                best = (cost, qc);
            }
        }
        assert!((s.q_cmd_next[0] - best.1).abs() <= 1e-5);
    }

    #[test]
    fn free_space_clamps_reference() {
        let model = RobotModel::planar(&[1.0, 1.0], 0.05);
        let empty = DVector::zeros(0);
        let j = DMatrix::zeros(0, 2);
        let q_ref = DVector::from_vec(vec![0.5, -0.01]);
        let q0 = DVector::zeros(2);
        let input = ControlInput { k_hat: &empty, q: &q0, q_cmd: &q0, f: &empty, j_u: &j, q_ref: &q_ref };
        let s = contact_aware_step(&cfg(1.0, 0.0, 0.02), &model, &input).unwrap();
        assert_abs_diff_eq!(s.q_cmd_next, DVector::from_vec(vec![0.02, -0.01]), epsilon = 1e-9);
    }

    #[test]
    fn huge_threshold_tracks_reference() {
        let model = one_dof();
        let (k, j) = (v(100.0), DMatrix::from_element(1, 1, -1.0));
        let input = ControlInput { k_hat: &k, q: &v(0.0), q_cmd: &v(0.0), f: &v(0.0), j_u: &j, q_ref: &v(0.1) };
        let s = contact_aware_step(&cfg(1e9, 0.0, 1.0), &model, &input).unwrap();
        assert_abs_diff_eq!(s.q_cmd_next[0], 0.1, epsilon = 1e-9);
    }

    #[test]
    fn relaxation_reduces_force() {
        let model = one_dof();
        let (k, j) = (v(100.0), DMatrix::from_element(1, 1, -1.0));
        // equilibrium with f = 3: K_q(q_cmd − q) = 3
        let (q0, qc0, f0) = (v(0.03), v(0.06), v(3.0));
        let input = ControlInput { k_hat: &k, q: &q0, q_cmd: &qc0, f: &f0, j_u: &j, q_ref: &q0 };
        let s = contact_aware_step(&cfg(2.0, 0.1, 1.0), &model, &input).unwrap();
        assert!(s.relaxed);
        assert!(s.f_pred[0] < 3.0);
        assert!(s.f_pred[0] <= 3.0 + 1e-8);

        // scalar oracle: f = 3 + 50(q_cmd − 0.06), objective over q_cmd
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=120_000 {
            let qc = i as f64 * 1e-6;
            let f: f64 = 3.0 + 50.0 * (qc - 0.06);
            if f > 3.0 {
                continue;
            }
            let cost = (qc - 0.03).powi(2) + 0.1 * (qc - 0.06).powi(2) + 1e-3 * f * f;
            if cost < best.0 {
                best = (cost, qc);
            }
        }
        assert!((s.q_cmd_next[0] - best.1).abs() <= 2e-6);
    }

    #[test]
    fn relaxation_is_identity_at_threshold() {
        let model = one_dof();
        let (k, j) = (v(100.0), DMatrix::from_element(1, 1, -1.0));
        let (q0, qc0, f0) = (v(0.02), v(0.04), v(2.0));
        let input = ControlInput { k_hat: &k, q: &q0, q_cmd: &qc0, f: &f0, j_u: &j, q_ref: &v(0.1) };
        let c = cfg(2.0, 0.1, 1.0);
        let nominal = contact_aware_step(&c, &model, &input).unwrap();
        assert!(!nominal.relaxed);
        let mut no_force_weight = c.clone();
        no_force_weight.eps_f = 0.0;
        let relaxed = relaxed_step(&no_force_weight, &model, &input).unwrap();
        assert_abs_diff_eq!(nominal.q_cmd_next, relaxed.q_cmd_next, epsilon = 1e-9);
    }

    #[test]
    fn uncontrollable_contact_keeps_force() {
        let model = one_dof();
        let (k, j) = (v(100.0), DMatrix::zeros(1, 1));
        let input = ControlInput { k_hat: &k, q: &v(0.0), q_cmd: &v(0.0), f: &v(3.0), j_u: &j, q_ref: &v(0.1) };
        let s = contact_aware_step(&cfg(2.0, 0.1, 1.0), &model, &input).unwrap();
        assert_abs_diff_eq!(s.f_pred[0], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn nullspace_law_cases() {
        let c = ControllerConfig { gamma_f: 0.01, f_d_bounds: Some([0.0, 10.0]), ..ControllerConfig::new(10.0) };
        let j1 = DMatrix::from_element(1, 1, -100.0);
        let qd = nullspace_force_step(&c, &j1, &v(5.0), &v(2.0), &v(0.0)).unwrap();
        assert_abs_diff_eq!(qd[0], -3.0, epsilon = 1e-12);

        let j1 = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]) * 50.0;
        let qdot0 = DVector::from_vec(vec![0.3, -0.2, 0.7]);
        let qd = nullspace_force_step(&c, &j1, &v(2.0), &v(2.0), &qdot0).unwrap();
        assert_abs_diff_eq!((&j1 * &qd)[0], 0.0, epsilon = 1e-6);

        let in_row_space = j1.transpose().column(0).into_owned() * 0.01;
        let qd = nullspace_force_step(&c, &j1, &v(2.0), &v(2.0), &in_row_space).unwrap();
        assert!(qd.norm() <= 1e-6);

        assert!(nullspace_force_step(&c, &j1, &v(2.0), &v(11.0), &qdot0).is_err());
    }

    #[test]
    fn goal_reference_cases() {
        let q = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(goal_task_reference(&q, &q, 0.1), q);
        let near = DVector::from_vec(vec![0.05, -0.02]);
        assert_eq!(goal_task_reference(&q, &near, 0.1), near);
        let far = DVector::from_vec(vec![1.0, 0.5]);
        let r = goal_task_reference(&q, &far, 0.1);
        assert_abs_diff_eq!(r, DVector::from_vec(vec![0.1, 0.05]), epsilon = 1e-15);
    }

    fn reduced_form_force(kq: f64, k: &DVector<f64>, j: &DMatrix<f64>, q: &DVector<f64>, f: &DVector<f64>, qc: &DVector<f64>) -> DVector<f64> {
        // f = f^l − K J (q − q^l) with q = q_c + K_q⁻¹ Jᵀ f
        let m = f.len();
        let kj = DMatrix::from_diagonal(k) * j;
        let a = DMatrix::identity(m, m) + &kj * j.transpose() / kq;
        let rhs = f - &kj * (qc - q);
        a.lu().solve(&rhs).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn qp_matches_reduced_form(
            m in 1usize..=2,
            jv in prop::collection::vec(-1.5f64..1.5, 6),
            kv in prop::collection::vec(50.0f64..5e3, 2),
            fv in prop::collection::vec(0.0f64..1.0, 2),
            rv in prop::collection::vec(-0.05f64..0.05, 3),
        ) {
            let model = RobotModel::serial(&[Vec3::z(), Vec3::y(), Vec3::z()], &[0.5, 0.4, 0.3], 0.05).with_gains(80.0, 1.0);
            let j = DMatrix::from_row_slice(m, 3, &jv[..3 * m]);
            let k = DVector::from_row_slice(&kv[..m]);
            let f = DVector::from_row_slice(&fv[..m]);
            let q0 = DVector::zeros(3);
            let q_cmd = DVector::from_vec(vec![0.01, -0.02, 0.0]);
            let q_ref = DVector::from_row_slice(&rv);
            let input = ControlInput { k_hat: &k, q: &q0, q_cmd: &q_cmd, f: &f, j_u: &j, q_ref: &q_ref };
            let c = cfg(1e6, 0.1, 1.0);
            let s = contact_aware_step(&c, &model, &input).unwrap();
            prop_assert_eq!(s.qp_status, QpStatus::Optimal);
            let reduced = reduced_form_force(80.0, &k, &j, &q0, &f, &s.q_cmd_next);
            prop_assert!((reduced - &s.f_pred).amax() <= 1e-8 * (1.0 + s.f_pred.amax()));
        }

        #[test]
        fn smoothing_weight_is_monotone(
            jv in prop::collection::vec(-1.0f64..1.0, 2),
            r in prop::collection::vec(-0.05f64..0.05, 2),
        ) {
            let model = RobotModel::planar(&[1.0, 1.0], 0.05).with_gains(100.0, 1.0);
            let j = DMatrix::from_row_slice(1, 2, &jv);
            let (k, f) = (v(300.0), v(0.2));
            let q0 = DVector::zeros(2);
            let q_ref = DVector::from_row_slice(&r);
            let input = ControlInput { k_hat: &k, q: &q0, q_cmd: &q0, f: &f, j_u: &j, q_ref: &q_ref };
            let mut last = f64::INFINITY;
            for eps in [0.0, 0.1, 0.5, 2.0, 10.0] {
                let s = contact_aware_step(&cfg(5.0, eps, 1.0), &model, &input).unwrap();
                let moved = (&s.q_cmd_next - &q0).norm();
                prop_assert!(moved <= last + 1e-9);
                last = moved;
            }
        }
    }
}
