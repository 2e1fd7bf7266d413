//! Contact-aware planning: whole-system distances and costs, goal-state
//! optimization under an end-effector constraint, and a bidirectional
//! transition-based RRT run once per band interaction mode.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::band::{band_length_jacobian, simplified_eb_model, BandError, BandParams, BandState};
use crate::geometry::{segment_box, segment_segment, Aabb, Vec3};
use crate::kinematics::{end_effector, end_effector_jacobian, world_capsules, JointVector, KinematicsError, RobotModel};
use crate::qp::QuadraticProgram;

const GOAL_REGULARIZATION: f64 = 1e-6;
const EE_TOL: f64 = 1e-4;
const IK_TOL: f64 = 1e-7;
const IK_START_SEED: u64 = 0x5eed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("start configuration is invalid")]
    InvalidStart,
    #[error("goal seed is invalid")]
    InvalidSeed,
    #[error("no mode produced a plan")]
    NoModeFeasible,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Band(#[from] BandError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams {
    pub eta: f64,
    pub eps_link: f64,
    pub lambda_b: f64,
    pub rho: f64,
    pub t0: f64,
    pub alpha: f64,
    pub cost_range: f64,
    pub max_iterations: usize,
    /// Weight of the band stretch in the state cost.
    pub w_l: f64,
    pub smoothing: bool,
    pub shortcut_attempts: usize,
    pub goal_gamma: f64,
    pub goal_dq_max: f64,
    pub goal_max_iter: usize,
    pub ik_starts: usize,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            eta: 0.15,
            eps_link: 0.2,
            lambda_b: 5.0,
            rho: 0.1,
            t0: 1e-4,
            alpha: 2.0,
            cost_range: 0.01,
            max_iterations: 5000,
            w_l: 10.0,
            smoothing: true,
            shortcut_attempts: 50,
            goal_gamma: 0.5,
            goal_dq_max: 0.05,
            goal_max_iter: 40,
            ik_starts: 16,
        }
    }
}

/// Whole-system state: joints plus the band they determine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfiguration {
    pub q_r: JointVector,
    pub band: Option<BandState>,
}

impl SystemConfiguration {
    pub fn sigma(&self) -> u8 {
        self.band.as_ref().map_or(0, |b| b.sigma)
    }

    pub fn length(&self) -> Option<f64> {
        self.band.as_ref().map(|b| b.length)
    }

    /// Band stretch `L − ‖b1 − b0‖`.
    pub fn stretch(&self) -> f64 {
        self.band.as_ref().map_or(0.0, |b| b.length - (b.b1 - b.b0).norm())
    }
}

/// `1 + w_L ΔL`.
pub fn state_cost(q_s: &SystemConfiguration, w_l: f64) -> f64 {
    1.0 + w_l * q_s.stretch()
}

/// `d_s² = d_r² + λ_b d_b²` with `d_b = ∞` across incompatible modes.
pub fn distance(a: &SystemConfiguration, b: &SystemConfiguration, lambda_b: f64) -> f64 {
    let d_r = (&a.q_r - &b.q_r).norm();
    let (sa, sb) = (a.sigma(), b.sigma());
    if sa != sb && sa != 0 && sb != 0 {
        return f64::INFINITY;
    }
    let d_b = match (a.length(), b.length()) {
        (Some(la), Some(lb)) => (la - lb).abs(),
        _ => 0.0,
    };
    (d_r * d_r + lambda_b * d_b * d_b).sqrt()
}

/// Valid when inside joint limits, free of box collisions, not under
/// excessive band tension, and the band touches no disallowed link and cuts
/// through no link.
pub fn validity_check(model: &RobotModel, q_s: &SystemConfiguration, boxes: &[Aabb], l_max: Option<f64>) -> bool {
    if !model.within_limits(&q_s.q_r) {
        return false;
    }
    let Ok(caps) = world_capsules(model, &q_s.q_r) else {
        return false;
    };
    for c in &caps {
        if boxes.iter().any(|b| segment_box(&c.p0, &c.p1, b).distance < c.radius) {
            return false;
        }
    }
    if let Some(band) = &q_s.band {
        if band.tension_exceeded || l_max.is_some_and(|l| band.length > l) {
            return false;
        }
        for (i, c) in caps.iter().enumerate() {
            let limit = if model.is_allowed(i) { c.radius - 1e-6 } else { c.radius };
            let hit = band.path.windows(2).any(|w| segment_segment(&w[0], &w[1], &c.p0, &c.p1).2 < limit);
            if hit {
                return false;
            }
        }
    }
    true
}

/// Robot, obstacles and optional band used by the planner.
#[derive(Debug, Clone)]
pub struct PlanningScene<'a> {
    pub model: &'a RobotModel,
    pub boxes: Vec<Aabb>,
    pub band: Option<BandParams>,
}

impl PlanningScene<'_> {
    pub fn configuration(&self, q: &JointVector, sigma: u8) -> Result<SystemConfiguration, PlanError> {
        let band = match &self.band {
            Some(p) => Some(simplified_eb_model(self.model, q, sigma, p)?),
            None => None,
        };
        Ok(SystemConfiguration { q_r: q.clone(), band })
    }

    pub fn is_valid(&self, q_s: &SystemConfiguration) -> bool {
        validity_check(self.model, q_s, &self.boxes, self.band.as_ref().map(|b| b.l_max))
    }

    /// Valid configuration in mode `sigma`, or `None`.
    fn valid_configuration(&self, q: &JointVector, sigma: u8) -> Option<SystemConfiguration> {
        let s = self.configuration(q, sigma).ok()?;
        (self.is_valid(&s) && (s.sigma() == 0 || s.sigma() == sigma)).then_some(s)
    }

    /// States along the straight joint-space segment at spacing ≤ `res`,
    /// endpoints included; `None` if any of them is invalid.
    pub fn edge_states(
        &self,
        a: &SystemConfiguration,
        b: &SystemConfiguration,
        sigma: u8,
        res: f64,
    ) -> Option<Vec<SystemConfiguration>> {
        let d = (&b.q_r - &a.q_r).norm();
        let n = ((d / res).ceil() as usize).max(1);
        let mut out = Vec::with_capacity(n + 1);
        out.push(a.clone());
        for k in 1..n {
            let t = k as f64 / n as f64;
            let q = &a.q_r + (&b.q_r - &a.q_r) * t;
            out.push(self.valid_configuration(&q, sigma)?);
        }
        out.push(b.clone());
        Some(out)
    }

    fn end_effector_goal(&self, q: &JointVector) -> Result<Vec3, PlanError> {
        Ok(end_effector(self.model, q)?)
    }
}

/// Trapezoidal integral of the state cost over joint-space arc length.
pub fn integrate_cost(states: &[SystemConfiguration], w_l: f64) -> f64 {
    states
        .windows(2)
        .map(|w| 0.5 * (state_cost(&w[0], w_l) + state_cost(&w[1], w_l)) * (&w[1].q_r - &w[0].q_r).norm())
        .sum()
}

/// `Σ max(0, margin − clearance)²` over link/box pairs.
pub fn clearance_penalty(model: &RobotModel, q: &JointVector, boxes: &[Aabb], margin: f64) -> f64 {
    let Ok(caps) = world_capsules(model, q) else {
        return f64::INFINITY;
    };
    caps.iter()
        .flat_map(|c| boxes.iter().map(move |b| segment_box(&c.p0, &c.p1, b).distance - c.radius))
        .map(|d| (margin - d).max(0.0).powi(2))
        .sum()
}

fn dls_step(model: &RobotModel, q: &JointVector, target: &Vec3, lambda: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let e = target - end_effector(model, q).ok()?;
    let j = end_effector_jacobian(model, q).ok()?;
    let gram = &j * j.transpose() + DMatrix::identity(3, 3) * lambda * lambda;
    let pinv = j.transpose() * gram.cholesky()?.inverse();
    let dq = &pinv * DVector::from_column_slice(e.as_slice());
    let null = DMatrix::identity(q.len(), q.len()) - &pinv * j;
    Some((dq, null))
}

/// Damped least-squares inverse kinematics for the end-effector position.
///
/// A secondary task in the Jacobian null space pushes links away from
/// `boxes`; it never moves the end effector to first order.
pub fn solve_ik(model: &RobotModel, target: &Vec3, start: &JointVector, boxes: &[Aabb], max_iter: usize) -> Option<JointVector> {
    const MARGIN: f64 = 0.01;
    const NULL_STEP: f64 = 0.02;
    let mut q = model.clamp_to_limits(start);
    for _ in 0..max_iter {
        let (mut dq, null) = dls_step(model, &q, target, 1e-3)?;
        let norm = dq.norm();
        if norm > 0.3 {
            dq *= 0.3 / norm;
        }
        let p = clearance_penalty(model, &q, boxes, MARGIN);
        if p > 0.0 {
            let grad = DVector::from_fn(q.len(), |i, _| {
                let mut qp = q.clone();
                qp[i] += 1e-6;
                (clearance_penalty(model, &qp, boxes, MARGIN) - p) / 1e-6
            });
            let dir = -(&null * grad);
            if let Some(dir) = dir.try_normalize(1e-12) {
                dq += dir * NULL_STEP;
            }
        } else if norm <= IK_TOL * 1e-2 {
            break;
        }
        q = model.clamp_to_limits(&(q + dq));
    }
    for _ in 0..50 {
        let (dq, _) = dls_step(model, &q, target, 1e-6)?;
        if dq.norm() <= 1e-14 {
            break;
        }
        q = model.clamp_to_limits(&(q + dq));
    }
    let err = (target - end_effector(model, &q).ok()?).norm();
    (err <= IK_TOL).then_some(q)
}

/// Deterministic IK starts: `q_init` followed by seeded uniform samples.
pub fn ik_starts(model: &RobotModel, q_init: &JointVector, count: usize) -> Vec<JointVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(IK_START_SEED);
    let mut out = vec![q_init.clone()];
    while out.len() < count {
        out.push(DVector::from_fn(model.n_q(), |i, _| rng.gen_range(model.q_min[i]..=model.q_max[i])));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalOptimization {
    pub q: JointVector,
    /// Band stretch at the seed and after every accepted iteration.
    pub stretch_history: Vec<f64>,
    pub ee_drift: f64,
    pub iterations: usize,
}

fn reproject(model: &RobotModel, q: &JointVector, target: &Vec3) -> Option<JointVector> {
    let mut q = q.clone();
    for _ in 0..50 {
        let e = target - end_effector(model, &q).ok()?;
        if e.norm() <= 1e-12 {
            break;
        }
        let j = end_effector_jacobian(model, &q).ok()?;
        let gram = &j * j.transpose() + DMatrix::identity(3, 3) * 1e-10;
        let ev = DVector::from_column_slice(e.as_slice());
        q += j.transpose() * gram.cholesky()?.solve(&ev);
    }
    let err = (target - end_effector(model, &q).ok()?).norm();
    (err <= 1e-9).then_some(q)
}

/// Reduces the band stretch at a goal configuration while keeping the end
/// effector in place.
///
/// Each iteration solves `min ‖J_u Δq − γ ΔL‖²` with `J_u = −∂L/∂q`,
/// subject to `J_e Δq = 0` and `|Δq| ≤ dq_max`, then re-projects the end
/// effector. Iterates that are invalid or increase the stretch are halved
/// and retried.
pub fn optimize_goal_state(
    scene: &PlanningScene,
    q_seed: &JointVector,
    sigma: u8,
    gamma: f64,
    dq_max: f64,
    max_iter: usize,
) -> Result<GoalOptimization, PlanError> {
    let model = scene.model;
    let seed = scene.configuration(q_seed, sigma).map_err(|_| PlanError::InvalidSeed)?;
    if !scene.is_valid(&seed) {
        return Err(PlanError::InvalidSeed);
    }
    let target = scene.end_effector_goal(q_seed)?;
    let mut q = q_seed.clone();
    let mut cur = seed.stretch();
    let mut history = vec![cur];
    let mut iterations = 0;
    let Some(params) = scene.band.as_ref() else {
        return Ok(GoalOptimization { q, stretch_history: history, ee_drift: 0.0, iterations });
    };
    let n = model.n_q();
    while iterations < max_iter && dq_max > 0.0 && cur > 0.0 {
        iterations += 1;
        let grad = band_length_jacobian(model, &q, sigma, params)?;
        if grad.amax() == 0.0 {
            break;
        }
        let a = -grad;
        let h = (a.transpose() * &a + DMatrix::identity(n, n) * GOAL_REGULARIZATION) * 2.0;
        let g = a.transpose().column(0) * (-2.0 * gamma * cur);
        let je = end_effector_jacobian(model, &q)?;
        let a_in = DMatrix::from_fn(2 * n, n, |r, c| match (r == c, r == c + n) {
            (true, _) => 1.0,
            (_, true) => -1.0,
            _ => 0.0,
        });
        let b_in = DVector::from_element(2 * n, dq_max);
        let sol = QuadraticProgram::new(h, g.into_owned())
            .with_equalities(je, DVector::zeros(3))
            .with_inequalities(a_in, b_in)
            .solve()
            .map_err(|_| PlanError::InvalidSeed)?;
        if !sol.is_optimal() || sol.x.norm() < 1e-6 {
            break;
        }
        let mut step = sol.x;
        let mut accepted = None;
        for _ in 0..8 {
            if step.norm() < 1e-6 {
                break;
            }
            if let Some(cand) = reproject(model, &(&q + &step), &target) {
                if let Some(s) = scene.valid_configuration(&cand, sigma) {
                    let drift = (scene.end_effector_goal(&cand)? - target).norm();
                    if s.sigma() == seed.sigma() && s.stretch() <= cur && drift <= EE_TOL {
                        accepted = Some((cand, s.stretch()));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((q_next, stretch)) = accepted else {
            break;
        };
        let moved = (&q_next - &q).norm();
        q = q_next;
        cur = stretch;
        history.push(cur);
        if moved < 1e-6 {
            break;
        }
    }
    let ee_drift = (scene.end_effector_goal(&q)? - target).norm();
    Ok(GoalOptimization { q, stretch_history: history, ee_drift, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub state: SystemConfiguration,
    pub cost: f64,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTree {
    pub nodes: Vec<TreeNode>,
    pub temperature: f64,
    pub n_refinement: usize,
    pub n_expansion: usize,
    pub rng_seed: u64,
}

impl PlanTree {
    pub fn new(root: SystemConfiguration, cost: f64, t0: f64, rng_seed: u64) -> Self {
        Self {
            nodes: vec![TreeNode { state: root, cost, parent: None }],
            temperature: t0,
            n_refinement: 0,
            n_expansion: 0,
            rng_seed,
        }
    }

    /// Nearest node under `distance`; ties go to the lowest index.
    pub fn nearest(&self, s: &SystemConfiguration, lambda_b: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, node) in self.nodes.iter().enumerate() {
            let d = distance(&node.state, s, lambda_b);
            if d.is_finite() && best.is_none_or(|b| d < b.1) {
                best = Some((i, d));
            }
        }
        best
    }

    /// Root-to-node chain.
    pub fn chain(&self, mut i: usize) -> Vec<usize> {
        let mut out = vec![i];
        while let Some(p) = self.nodes[i].parent {
            out.push(p);
            i = p;
        }
        out.reverse();
        out
    }
}

/// Temperature-controlled acceptance of a cost change from `c_near` to
/// `c_new`.
pub fn transition_test<R: Rng>(tree: &mut PlanTree, c_near: f64, c_new: f64, params: &PlannerParams, rng: &mut R) -> bool {
    if c_new <= c_near {
        return true;
    }
    let dc = c_new - c_near;
    if !dc.is_finite() {
        return false;
    }
    if rng.gen::<f64>() < (-dc / tree.temperature).exp() {
        tree.temperature /= 2f64.powf(params.alpha);
        true
    } else {
        tree.temperature *= 2f64.powf(dc / params.cost_range);
        false
    }
}

/// Limits refinement moves (shorter than `eta`) to a `rho` fraction of
/// expansion moves.
pub fn refinement_control(tree: &mut PlanTree, d_near_rand: f64, eta: f64, rho: f64) -> bool {
    if d_near_rand >= eta {
        tree.n_expansion += 1;
        return true;
    }
    if tree.n_refinement as f64 > rho * tree.n_expansion as f64 {
        return false;
    }
    tree.n_refinement += 1;
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Found,
    Timeout,
    NoValidGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub q: Vec<f64>,
    #[serde(rename = "L")]
    pub band_length: Option<f64>,
    pub sigma: u8,
}

/// Per-tree counts of rejected extension attempts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionStats {
    pub refinement: usize,
    pub invalid: usize,
    pub transition: usize,
    pub edge: usize,
    pub added: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub sigma: u8,
    pub status: PlanStatus,
    pub path: Vec<Waypoint>,
    pub total_cost: f64,
    pub iterations: usize,
    pub tree_sizes: [usize; 2],
    pub stats: [ExtensionStats; 2],
    /// Link attempts between mode-incompatible states (always zero).
    pub incompatible_links: usize,
    pub seed: u64,
    pub stream: u64,
    pub params: PlannerParams,
}

impl PlanResult {
    fn failed(sigma: u8, status: PlanStatus, iterations: usize, seed: u64, stream: u64, params: &PlannerParams) -> Self {
        Self {
            sigma,
            status,
            path: Vec::new(),
            total_cost: f64::INFINITY,
            iterations,
            tree_sizes: [0, 0],
            stats: Default::default(),
            incompatible_links: 0,
            seed,
            stream,
            params: params.clone(),
        }
    }

    pub fn is_found(&self) -> bool {
        self.status == PlanStatus::Found
    }

    pub fn joint_path(&self) -> Vec<JointVector> {
        self.path.iter().map(|w| DVector::from_vec(w.q.clone())).collect()
    }
}

fn steer(from: &JointVector, to: &JointVector, eta: f64) -> JointVector {
    let d = (to - from).norm();
    if d <= eta {
        to.clone()
    } else {
        from + (to - from) * (eta / d)
    }
}

/// Splits every edge into pieces no longer than `eta`, then checks all
/// pieces at `eta / 4`. Returns the waypoints and the integrated cost of
/// each piece.
fn densify(
    scene: &PlanningScene,
    states: &[SystemConfiguration],
    sigma: u8,
    params: &PlannerParams,
) -> Option<(Vec<SystemConfiguration>, Vec<f64>)> {
    let mut out = vec![states[0].clone()];
    let mut costs = Vec::new();
    for w in states.windows(2) {
        let d = (&w[1].q_r - &w[0].q_r).norm();
        let n = ((d / params.eta).ceil() as usize).max(1);
        let mut prev = w[0].clone();
        for k in 1..=n {
            let next = if k == n {
                w[1].clone()
            } else {
                let q = &w[0].q_r + (&w[1].q_r - &w[0].q_r) * (k as f64 / n as f64);
                scene.valid_configuration(&q, sigma)?
            };
            let fine = scene.edge_states(&prev, &next, sigma, params.eta / 4.0)?;
            costs.push(integrate_cost(&fine, params.w_l));
            out.push(next.clone());
            prev = next;
        }
    }
    Some((out, costs))
}

fn shortcut(
    scene: &PlanningScene,
    mut path: Vec<SystemConfiguration>,
    mut costs: Vec<f64>,
    sigma: u8,
    params: &PlannerParams,
    rng: &mut ChaCha8Rng,
) -> (Vec<SystemConfiguration>, Vec<f64>) {
    for _ in 0..params.shortcut_attempts {
        if path.len() < 3 {
            break;
        }
        let i = rng.gen_range(0..path.len() - 2);
        let j = rng.gen_range(i + 2..path.len());
        let old: f64 = costs[i..j].iter().sum();
        let Some((seg, seg_costs)) = densify(scene, &[path[i].clone(), path[j].clone()], sigma, params) else {
            continue;
        };
        if seg_costs.iter().sum::<f64>() < old - 1e-12 {
            path.splice(i..=j, seg);
            costs.splice(i..j, seg_costs);
        }
    }
    (path, costs)
}

fn finish(
    scene: &PlanningScene,
    raw: Vec<SystemConfiguration>,
    sigma: u8,
    params: &PlannerParams,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<SystemConfiguration>, f64)> {
    let (mut path, mut costs) = densify(scene, &raw, sigma, params)?;
    if params.smoothing {
        (path, costs) = shortcut(scene, path, costs, sigma, params, rng);
    }
    Some((path, costs.iter().sum()))
}

fn waypoints(path: &[SystemConfiguration]) -> Vec<Waypoint> {
    path.iter()
        .map(|s| Waypoint { q: s.q_r.iter().copied().collect(), band_length: s.length(), sigma: s.sigma() })
        .collect()
}

/// Bidirectional transition-based RRT between two valid states of mode
/// `sigma`.
pub fn bitrrt_plan(
    scene: &PlanningScene,
    init: &SystemConfiguration,
    goal: &SystemConfiguration,
    sigma: u8,
    params: &PlannerParams,
    seed: u64,
) -> Result<PlanResult, PlanError> {
    bitrrt_plan_stream(scene, init, goal, sigma, params, seed, 0)
}

/// As [`bitrrt_plan`], drawing from random stream `stream` of `seed`.
pub fn bitrrt_plan_stream(
    scene: &PlanningScene,
    init: &SystemConfiguration,
    goal: &SystemConfiguration,
    sigma: u8,
    params: &PlannerParams,
    seed: u64,
    stream: u64,
) -> Result<PlanResult, PlanError> {
    if !scene.is_valid(init) {
        return Err(PlanError::InvalidStart);
    }
    if !scene.is_valid(goal) {
        return Err(PlanError::InvalidSeed);
    }
    let model = scene.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let found = |path: Vec<SystemConfiguration>, cost: f64, iterations: usize, sizes: [usize; 2]| PlanResult {
        sigma,
        status: PlanStatus::Found,
        path: waypoints(&path),
        total_cost: cost,
        iterations,
        tree_sizes: sizes,
        stats: Default::default(),
        incompatible_links: 0,
        seed,
        stream,
        params: params.clone(),
    };
    if distance(init, goal, params.lambda_b) == 0.0 {
        return Ok(found(vec![init.clone()], 0.0, 0, [1, 1]));
    }
    if distance(init, goal, params.lambda_b) < params.eps_link {
        if let Some((path, cost)) = finish(scene, vec![init.clone(), goal.clone()], sigma, params, &mut rng) {
            return Ok(found(path, cost, 0, [1, 1]));
        }
    }

    let mut trees = [
        PlanTree::new(init.clone(), state_cost(init, params.w_l), params.t0, seed),
        PlanTree::new(goal.clone(), state_cost(goal, params.w_l), params.t0, seed),
    ];
    let mut incompatible_links = 0;
    let mut stats: [ExtensionStats; 2] = Default::default();
    let mut a = 0;
    for it in 1..=params.max_iterations {
        let b = 1 - a;
        let q_rand = DVector::from_fn(model.n_q(), |i, _| rng.gen_range(model.q_min[i]..=model.q_max[i]));
        let Ok(s_rand) = scene.configuration(&q_rand, sigma) else {
            a = b;
            continue;
        };
        let Some((near, d_near)) = trees[a].nearest(&s_rand, params.lambda_b) else {
            a = b;
            continue;
        };
        if !refinement_control(&mut trees[a], d_near, params.eta, params.rho) {
            stats[a].refinement += 1;
            a = b;
            continue;
        }
        let near_state = trees[a].nodes[near].state.clone();
        let q_new = steer(&near_state.q_r, &q_rand, params.eta);
        let Some(s_new) = scene.valid_configuration(&q_new, sigma) else {
            stats[a].invalid += 1;
            a = b;
            continue;
        };
        let c_near = trees[a].nodes[near].cost;
        let c_new = state_cost(&s_new, params.w_l);
        if !transition_test(&mut trees[a], c_near, c_new, params, &mut rng) {
            stats[a].transition += 1;
            a = b;
            continue;
        }
        if scene.edge_states(&near_state, &s_new, sigma, params.eta / 4.0).is_none() {
            stats[a].edge += 1;
            a = b;
            continue;
        }
        trees[a].nodes.push(TreeNode { state: s_new.clone(), cost: c_new, parent: Some(near) });
        let new_idx = trees[a].nodes.len() - 1;
        stats[a].added += 1;

        // attempt to link with the other tree
        let mut other = None;
        for (i, node) in trees[b].nodes.iter().enumerate() {
            let d = distance(&node.state, &s_new, params.lambda_b);
            if d.is_infinite() {
                incompatible_links += 1;
                continue;
            }
            if other.is_none_or(|(_, best)| d < best) {
                other = Some((i, d));
            }
        }
        if let Some((j, d)) = other {
            let other_state = &trees[b].nodes[j].state;
            if d < params.eps_link && scene.edge_states(&s_new, other_state, sigma, params.eta / 4.0).is_some() {
                let mut raw: Vec<SystemConfiguration> =
                    trees[a].chain(new_idx).iter().map(|&k| trees[a].nodes[k].state.clone()).collect();
                let mut tail: Vec<SystemConfiguration> =
                    trees[b].chain(j).iter().map(|&k| trees[b].nodes[k].state.clone()).collect();
                tail.reverse();
                raw.extend(tail);
                if a == 1 {
                    raw.reverse();
                }
                let sizes = [trees[0].nodes.len(), trees[1].nodes.len()];
                if let Some((path, cost)) = finish(scene, raw, sigma, params, &mut rng) {
                    let mut res = found(path, cost, it, sizes);
                    res.incompatible_links = incompatible_links;
                    res.stats = stats;
                    return Ok(res);
                }
            }
        }
        a = b;
    }
    let mut res = PlanResult::failed(sigma, PlanStatus::Timeout, params.max_iterations, seed, stream, params);
    res.tree_sizes = [trees[0].nodes.len(), trees[1].nodes.len()];
    res.incompatible_links = incompatible_links;
    res.stats = stats;
    Ok(res)
}

/// Valid IK solutions for an end-effector position from the deterministic
/// start set.
pub fn ik_candidates(
    model: &RobotModel,
    q_init: &JointVector,
    target: &Vec3,
    boxes: &[Aabb],
    count: usize,
) -> Vec<JointVector> {
    ik_starts(model, q_init, count)
        .iter()
        .filter_map(|s| solve_ik(model, target, s, boxes, 300))
        .collect()
}

/// Valid goal configuration for mode `sigma` closest to `q_init` among the
/// IK candidates, ties broken by state cost.
pub fn select_goal(
    scene: &PlanningScene,
    candidates: &[JointVector],
    q_init: &JointVector,
    sigma: u8,
    w_l: f64,
) -> Option<SystemConfiguration> {
    let mut best: Option<(f64, f64, SystemConfiguration)> = None;
    for q in candidates {
        let Some(s) = scene.valid_configuration(q, sigma) else {
            continue;
        };
        if sigma != 0 && s.sigma() != sigma {
            continue;
        }
        let c = state_cost(&s, w_l);
        let d = (q - q_init).norm();
        let better = best.as_ref().is_none_or(|(bd, bc, _)| d < *bd - 1e-12 || ((d - bd).abs() <= 1e-12 && c < *bc));
        if better {
            best = Some((d, c, s));
        }
    }
    best.map(|b| b.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePlans {
    pub results: Vec<PlanResult>,
    pub best: Option<u8>,
}

impl ModePlans {
    pub fn best(&self) -> Result<&PlanResult, PlanError> {
        self.best
            .and_then(|s| self.results.iter().find(|r| r.sigma == s))
            .ok_or(PlanError::NoModeFeasible)
    }
}

fn plan_mode(
    scene: &PlanningScene,
    q_init: &JointVector,
    candidates: &[JointVector],
    sigma: u8,
    params: &PlannerParams,
    seed: u64,
) -> Result<PlanResult, PlanError> {
    let stream = sigma as u64;
    let Some(init) = scene.valid_configuration(q_init, sigma) else {
        return Ok(PlanResult::failed(sigma, PlanStatus::NoValidGoal, 0, seed, stream, params));
    };
    if sigma != 0 && scene.band.is_none() {
        return Ok(PlanResult::failed(sigma, PlanStatus::NoValidGoal, 0, seed, stream, params));
    }
    let Some(goal) = select_goal(scene, candidates, q_init, sigma, params.w_l) else {
        return Ok(PlanResult::failed(sigma, PlanStatus::NoValidGoal, 0, seed, stream, params));
    };
    let goal = if sigma != 0 {
        let opt = optimize_goal_state(scene, &goal.q_r, sigma, params.goal_gamma, params.goal_dq_max, params.goal_max_iter)?;
        scene.valid_configuration(&opt.q, sigma).unwrap_or(goal)
    } else {
        goal
    };
    bitrrt_plan_stream(scene, &init, &goal, sigma, params, seed, stream)
}

/// Plans in every mode (in parallel) and picks the cheapest found path.
pub fn plan_all_modes(
    scene: &PlanningScene,
    q_init: &JointVector,
    ee_goal: &Vec3,
    params: &PlannerParams,
    seed: u64,
) -> Result<ModePlans, PlanError> {
    scene.model.check_q(q_init)?;
    let candidates = ik_candidates(scene.model, q_init, ee_goal, &scene.boxes, params.ik_starts);
    let results: Vec<Result<PlanResult, PlanError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u8)
            .map(|sigma| {
                let candidates = &candidates;
                s.spawn(move || plan_mode(scene, q_init, candidates, sigma, params, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("planner thread panicked")).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let best = results
        .iter()
        .filter(|r| r.is_found())
        .min_by(|a, b| a.total_cost.total_cmp(&b.total_cost).then(a.sigma.cmp(&b.sigma)))
        .map(|r| r.sigma);
    Ok(ModePlans { results, best })
}
