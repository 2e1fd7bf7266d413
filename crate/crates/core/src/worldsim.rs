//! Quasi-static ground-truth simulator.
//!
//! Each step finds the equilibrium reached by the impedance-controlled arm
//! for a commanded setpoint: soft contacts minimize the total spring
//! energy, rigid contacts minimize the controller potential subject to
//! non-penetration.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::band::{simplified_eb_model, BandError, BandParams, BandState};
use crate::contact::{detect_contacts, reduced_jacobian, ContactKey, ContactPoint, ContactSet, ContactSource};
use crate::controller::{ControlError, Controller, Observation};
use crate::geometry::Aabb;
use crate::kinematics::{JointVector, KinematicsError, RobotModel};
use crate::qp::{QpError, QpStatus, QuadraticProgram};

/// Stiffness standing in for rigid obstacles when they are simulated as
/// springs.
pub const RIGID_PENALTY_STIFFNESS: f64 = 1e7;
const GN_MAX_ITERS: usize = 50;
const GN_TOL: f64 = 1e-13;
const MAX_CONTACT_PASSES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulator QP ended with status {0:?}")]
    Solver(QpStatus),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Band(#[from] BandError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("invalid contact set: {0}")]
    InvalidContacts(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub q: JointVector,
    pub contact_set: ContactSet,
    pub band: Option<BandState>,
    pub step_index: usize,
}

impl WorldState {
    pub fn new(q: JointVector, contact_set: ContactSet) -> Self {
        Self { q, contact_set, band: None, step_index: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub q_next: JointVector,
    pub f_next: DVector<f64>,
    /// Total energy at `q_next`.
    pub energy: f64,
    pub solver_status: QpStatus,
    /// Contact set carried to the next step (forces, gaps, Jacobian at `q_next`).
    pub contact_set: ContactSet,
    /// `‖K_q(q_cmd − q_next) + J_uᵀ f_next‖∞` with the final linearization.
    pub stationarity: f64,
    pub iterations: usize,
}

/// `½‖q_cmd − q‖²_{K_q} + Σ f_i² / (2 K_i)` over spring contacts.
pub fn total_energy(model: &RobotModel, q_cmd: &JointVector, q: &JointVector, f: &DVector<f64>, k: &DVector<f64>, springs: &[bool]) -> f64 {
    let d = q_cmd - q;
    let elastic: f64 = (0..f.len()).filter(|&i| springs[i] && k[i] > 0.0).map(|i| f[i] * f[i] / (2.0 * k[i])).sum();
    0.5 * d.dot(&model.k_q.component_mul(&d)) + elastic
}

/// Soft-contact step: minimizes the total energy with every contact a
/// linear unilateral spring. Geometric contact sets are relinearized until
/// the step converges; sets with a fixed Jacobian need a single solve.
pub fn step_soft(state: &WorldState, q_cmd: &JointVector, model: &RobotModel) -> Result<StepResult, SimError> {
    let m = state.contact_set.len();
    if state.contact_set.k_c.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
        return Err(SimError::InvalidContacts("spring stiffness must be positive and finite".into()));
    }
    solve_step(model, state, q_cmd, &vec![false; m], GN_MAX_ITERS)
}

/// Hard-contact step: minimizes the controller potential subject to
/// `J_u(q^l)(q − q^l) ≥ −gap`. Forces are the constraint multipliers;
/// contacts that would pull are released.
pub fn step_hard(state: &WorldState, q_cmd: &JointVector, model: &RobotModel) -> Result<StepResult, SimError> {
    let m = state.contact_set.len();
    solve_step(model, state, q_cmd, &vec![true; m], 1)
}

fn solve_step(
    model: &RobotModel,
    state: &WorldState,
    q_cmd: &JointVector,
    constraint: &[bool],
    max_iters: usize,
) -> Result<StepResult, SimError> {
    model.check_q(&state.q)?;
    model.check_q(q_cmd)?;
    let set = &state.contact_set;
    let n = model.n_q();
    let m = set.len();
    if set.j_u.nrows() != m || set.j_u.ncols() != n || set.k_c.len() != m || set.gap.len() != m {
        return Err(SimError::InvalidContacts("inconsistent contact set dimensions".into()));
    }
    let springs: Vec<usize> = (0..m).filter(|&i| !constraint[i]).collect();
    let ns = springs.len();
    let fixed = !set.is_geometric();

    // spring force implied by the current linearization, before clamping
    let mut f_eff: Vec<f64> = springs.iter().map(|&i| set.f_c[i] - set.k_c[i] * set.gap[i]).collect();
    let mut sep = set.gap.clone();
    let mut mult = DVector::zeros(m);
    let mut q_k = state.q.clone();
    let mut j = set.j_u.clone();
    let mut status = QpStatus::Optimal;
    let mut iterations = 0;

    let mut h = DMatrix::zeros(n + ns, n + ns);
    for i in 0..n {
        h[(i, i)] = model.k_q[i];
    }
    for (a, &i) in springs.iter().enumerate() {
        h[(n + a, n + a)] = set.k_c[i];
    }
    let mut g = DVector::zeros(n + ns);
    g.rows_mut(0, n).copy_from(&(-model.k_q.component_mul(q_cmd)));

    for it in 0..max_iters.max(1) {
        if it > 0 {
            j = set.jacobian_at(model, &q_k)?;
        }
        let rows = 2 * ns + (m - ns);
        let mut a_in = DMatrix::zeros(rows, n + ns);
        let mut b_in = DVector::zeros(rows);
        let mut row = 0;
        let mut constraint_row = vec![usize::MAX; m];
        let jq = &j * &q_k;
        for (a, &i) in springs.iter().enumerate() {
            a_in[(row, n + a)] = -1.0;
            row += 1;
            for c in 0..n {
                a_in[(row, c)] = -j[(i, c)];
            }
            a_in[(row, n + a)] = -1.0;
            b_in[row] = -f_eff[a] / set.k_c[i] - jq[i];
            row += 1;
        }
        for i in (0..m).filter(|&i| constraint[i]) {
            for c in 0..n {
                a_in[(row, c)] = -j[(i, c)];
            }
            b_in[row] = sep[i] - jq[i];
            constraint_row[i] = row;
            row += 1;
        }
        let sol = QuadraticProgram::new(h.clone(), g.clone()).with_inequalities(a_in, b_in).solve()?;
        iterations += 1;
        status = sol.status;
        if status != QpStatus::Optimal {
            return Err(SimError::Solver(status));
        }
        let q_new = sol.x.rows(0, n).into_owned();
        let disp = &j * (&q_new - &q_k);
        for (a, &i) in springs.iter().enumerate() {
            f_eff[a] -= set.k_c[i] * disp[i];
        }
        for i in 0..m {
            if constraint[i] {
                sep[i] += disp[i];
                mult[i] = sol.mu_in[constraint_row[i]];
            }
        }
        let moved = (&q_new - &q_k).amax();
        q_k = q_new;
        if fixed || moved <= GN_TOL * (1.0 + q_k.amax()) {
            break;
        }
    }

    let mut f_next = DVector::zeros(m);
    let mut gap_next = sep.clone();
    for (a, &i) in springs.iter().enumerate() {
        f_next[i] = f_eff[a].max(0.0);
        gap_next[i] = if f_eff[a] > 0.0 { 0.0 } else { -f_eff[a] / set.k_c[i] };
    }
    for i in 0..m {
        if constraint[i] {
            f_next[i] = mult[i];
        }
    }
    let stationarity = (model.k_q.component_mul(&(q_cmd - &q_k)) + j.transpose() * &f_next).amax();
    let spring_mask: Vec<bool> = constraint.iter().map(|c| !c).collect();
    let energy = total_energy(model, q_cmd, &q_k, &f_next, &set.k_c, &spring_mask);
    let mut contact_set = set.clone();
    contact_set.f_c = f_next.clone();
    contact_set.gap = gap_next;
    contact_set.j_u = set.jacobian_at(model, &q_k)?;
    Ok(StepResult { q_next: q_k, f_next, energy, solver_status: status, contact_set, stationarity, iterations })
}

/// Obstacle stiffness: `"rigid"` or a positive number (N/m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum Stiffness {
    Rigid,
    Soft(f64),
}

impl TryFrom<serde_json::Value> for Stiffness {
    type Error = String;

    fn try_from(v: serde_json::Value) -> Result<Self, Self::Error> {
        match v {
            serde_json::Value::String(s) if s == "rigid" => Ok(Stiffness::Rigid),
            serde_json::Value::Number(n) => match n.as_f64() {
                Some(k) if k > 0.0 && k.is_finite() => Ok(Stiffness::Soft(k)),
                _ => Err(format!("stiffness must be positive, got {n}")),
            },
            other => Err(format!("expected \"rigid\" or a positive number, got {other}")),
        }
    }
}

impl From<Stiffness> for serde_json::Value {
    fn from(s: Stiffness) -> Self {
        match s {
            Stiffness::Rigid => serde_json::Value::String("rigid".into()),
            Stiffness::Soft(k) => serde_json::json!(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub aabb: Aabb,
    pub stiffness: Stiffness,
}

/// How rigid obstacles are simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RigidMode {
    /// Non-penetration constraints.
    #[default]
    Hard,
    /// Springs of stiffness [`RIGID_PENALTY_STIFFNESS`], giving a finite
    /// stiffness to identify.
    Penalty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSetup {
    pub params: BandParams,
    pub sigma: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub obstacles: Vec<Obstacle>,
    pub band: Option<BandSetup>,
    pub activation_dist: f64,
    pub rigid_mode: RigidMode,
}

impl Environment {
    pub fn boxes(&self) -> Vec<Aabb> {
        self.obstacles.iter().map(|o| o.aabb).collect()
    }
}

struct Entry {
    contact: ContactPoint,
    f: f64,
    k: f64,
    rigid: bool,
    gap: f64,
}

/// Simulated world: owns the state and keeps the contact set in sync with
/// the geometry between steps.
#[derive(Debug, Clone)]
pub struct World<'m> {
    pub model: &'m RobotModel,
    pub env: Environment,
    pub state: WorldState,
}

/// Outcome of one world step.
#[derive(Debug, Clone)]
pub struct WorldStep {
    pub result: StepResult,
    /// `J_u(q^l)(q^{l+1} − q^l)` for every contact in the solved set.
    pub displacement: Vec<(ContactKey, f64)>,
}

impl<'m> World<'m> {
    pub fn new(model: &'m RobotModel, env: Environment, q0: JointVector) -> Result<Self, SimError> {
        model.check_q(&q0)?;
        let state = WorldState::new(q0, ContactSet::empty(model.n_q()));
        let mut world = Self { model, env, state };
        world.sync()?;
        Ok(world)
    }

    fn stiffness_of(&self, source: ContactSource) -> (f64, bool) {
        match source {
            ContactSource::Box(id) => match self.env.obstacles[id].stiffness {
                Stiffness::Soft(k) => (k, false),
                Stiffness::Rigid => (RIGID_PENALTY_STIFFNESS, self.env.rigid_mode == RigidMode::Hard),
            },
            ContactSource::Band => (self.env.band.as_ref().map_or(0.0, |b| b.params.k_band), false),
            ContactSource::Fixed(_) => (0.0, false),
        }
    }

    fn fresh_entry(&self, c: ContactPoint) -> Entry {
        let (k, rigid) = self.stiffness_of(c.source);
        if rigid {
            return Entry { contact: c, f: 0.0, k, rigid, gap: c.distance };
        }
        if c.source == ContactSource::Band {
            let stretch = self.state.band.as_ref().map_or(0.0, |b| b.length - (b.b1 - b.b0).norm());
            let f = k * stretch.max(0.0);
            return Entry { contact: c, f, k, rigid, gap: if f > 0.0 { 0.0 } else { c.distance.max(0.0) } };
        }
        if c.distance < 0.0 {
            Entry { contact: c, f: -k * c.distance, k, rigid, gap: 0.0 }
        } else {
            Entry { contact: c, f: 0.0, k, rigid, gap: c.distance }
        }
    }

    fn entries_of(set: &ContactSet) -> Vec<Entry> {
        (0..set.len())
            .map(|i| Entry { contact: set.contacts[i], f: set.f_c[i], k: set.k_c[i], rigid: set.rigid[i], gap: set.gap[i] })
            .collect()
    }

    fn build_set(&self, q: &JointVector, mut entries: Vec<Entry>) -> Result<ContactSet, SimError> {
        entries.sort_by_key(|e| e.contact.key());
        let contacts: Vec<ContactPoint> = entries.iter().map(|e| e.contact).collect();
        let j_u = reduced_jacobian(self.model, q, &contacts)?;
        let m = entries.len();
        Ok(ContactSet {
            contacts,
            f_c: DVector::from_iterator(m, entries.iter().map(|e| e.f)),
            k_c: DVector::from_iterator(m, entries.iter().map(|e| e.k)),
            rigid: entries.iter().map(|e| e.rigid).collect(),
            gap: DVector::from_iterator(m, entries.iter().map(|e| e.gap)),
            j_u,
        })
    }

    /// Re-detects contacts at the current configuration. Loaded contacts
    /// keep their frozen geometry and spring state; unloaded ones are
    /// refreshed or dropped when out of range.
    pub fn sync(&mut self) -> Result<(), SimError> {
        let q = self.state.q.clone();
        self.state.band = match &self.env.band {
            Some(b) => Some(simplified_eb_model(self.model, &q, b.sigma, &b.params)?),
            None => None,
        };
        let band_for_contacts = self
            .state
            .band
            .as_ref()
            .filter(|_| self.env.band.as_ref().is_some_and(|b| b.params.k_band > 0.0));
        let detected = detect_contacts(self.model, &q, &self.env.boxes(), band_for_contacts, self.env.activation_dist)?;
        let old = Self::entries_of(&self.state.contact_set);
        let mut entries = Vec::new();
        for e in old {
            let found = detected.iter().find(|c| c.key() == e.contact.key());
            if e.f > 0.0 {
                entries.push(e);
            } else if let Some(c) = found {
                entries.push(self.fresh_entry(*c));
            }
        }
        for c in &detected {
            if !entries.iter().any(|e| e.contact.key() == c.key()) {
                entries.push(self.fresh_entry(*c));
            }
        }
        self.state.contact_set = self.build_set(&q, entries)?;
        Ok(())
    }

    fn solve(&self, state: &WorldState, q_cmd: &JointVector) -> Result<StepResult, SimError> {
        let set = &state.contact_set;
        solve_step(self.model, state, q_cmd, &set.rigid, GN_MAX_ITERS)
    }

    /// Advances one step toward the commanded setpoint. Contacts that the
    /// step would run into are added (linearized at the start of the step)
    /// and the step is solved again.
    pub fn advance(&mut self, q_cmd: &JointVector) -> Result<WorldStep, SimError> {
        let base = self.state.clone();
        let mut set = base.contact_set.clone();
        let mut pass = 0;
        let result = loop {
            let trial = WorldState { contact_set: set.clone(), ..base.clone() };
            let result = self.solve(&trial, q_cmd)?;
            if pass == MAX_CONTACT_PASSES {
                break result;
            }
            let keys = set.keys();
            let fresh: Vec<ContactPoint> = detect_contacts(self.model, &result.q_next, &self.env.boxes(), None, 0.0)?
                .into_iter()
                .filter(|c| c.penetration > 0.0 && !keys.contains(&c.key()))
                .collect();
            if fresh.is_empty() {
                break result;
            }
            let mut entries = Self::entries_of(&set);
            for c in fresh {
                let row = reduced_jacobian(self.model, &result.q_next, &[c])?;
                let back = (row * (&base.q - &result.q_next))[0];
                let (k, rigid) = self.stiffness_of(c.source);
                let gap = (c.distance + back).max(0.0);
                entries.push(Entry { contact: c, f: 0.0, k, rigid, gap });
            }
            set = self.build_set(&base.q, entries)?;
            pass += 1;
        };
        let disp = &set.j_u * (&result.q_next - &base.q);
        let displacement = set.keys().into_iter().zip(disp.iter().copied()).collect();
        self.state = WorldState {
            q: result.q_next.clone(),
            contact_set: result.contact_set.clone(),
            band: base.band,
            step_index: base.step_index + 1,
        };
        self.sync()?;
        Ok(WorldStep { result, displacement })
    }

    pub fn observation(&self, q_cmd: &JointVector, q_ref_next: JointVector, noise: Option<&DVector<f64>>) -> Observation {
        let set = &self.state.contact_set;
        let mut f = set.f_c.clone();
        if let Some(n) = noise {
            f = (f + n).map(|v| v.max(0.0));
        }
        Observation {
            step: self.state.step_index,
            q: self.state.q.clone(),
            q_cmd: q_cmd.clone(),
            keys: set.keys(),
            f,
            j_u: set.j_u.clone(),
            k_c: set.k_c.clone(),
            q_ref_next,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactRecord {
    pub key: ContactKey,
    pub f: f64,
    /// Normal displacement `J_u(q^{l−1})(q^l − q^{l−1})` that led to this row.
    pub jdq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub q: JointVector,
    pub q_cmd: JointVector,
    pub contacts: Vec<ContactRecord>,
    pub band_length: Option<f64>,
    pub relaxed: bool,
    pub stalled: bool,
}

impl LogRow {
    pub fn max_force(&self) -> f64 {
        self.contacts.iter().map(|c| c.f).fold(0.0, f64::max)
    }

    pub fn force(&self, key: &ContactKey) -> f64 {
        self.contacts.iter().find(|c| c.key == *key).map_or(0.0, |c| c.f)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
}

impl TrajectoryLog {
    /// Every contact identity seen during the run, sorted.
    pub fn contact_keys(&self) -> Vec<ContactKey> {
        let mut keys: Vec<ContactKey> = self.rows.iter().flat_map(|r| r.contacts.iter().map(|c| c.key)).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    pub fn max_force(&self) -> f64 {
        self.rows.iter().map(LogRow::max_force).fold(0.0, f64::max)
    }

    pub fn stalled(&self) -> bool {
        self.rows.iter().any(|r| r.stalled)
    }

    /// CSV header: `step, q_i, qcmd_i, f_j, bandL`.
    pub fn csv_header(&self) -> Vec<String> {
        let n = self.rows.first().map_or(0, |r| r.q.len());
        let mut h = vec!["step".to_string()];
        h.extend((0..n).map(|i| format!("q_{i}")));
        h.extend((0..n).map(|i| format!("qcmd_{i}")));
        h.extend((0..self.contact_keys().len()).map(|i| format!("f_{i}")));
        h.push("bandL".into());
        h
    }

    pub fn csv_records(&self) -> Vec<Vec<String>> {
        let keys = self.contact_keys();
        self.rows
            .iter()
            .map(|r| {
                let mut rec = vec![r.step.to_string()];
                rec.extend(r.q.iter().map(|v| v.to_string()));
                rec.extend(r.q_cmd.iter().map(|v| v.to_string()));
                rec.extend(keys.iter().map(|k| r.force(k).to_string()));
                rec.push(r.band_length.map_or(String::new(), |l| l.to_string()));
                rec
            })
            .collect()
    }
}

/// Joint reference for the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Explicit setpoints; `q_ref^{l+1}` is entry `l + 1`, held at the end.
    Trajectory(Vec<JointVector>),
    /// Steps toward a goal from the measured configuration.
    Goal { q_goal: JointVector, step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoopOptions {
    /// Standard deviation of additive force-measurement noise (N).
    pub force_noise: f64,
    pub seed: u64,
}

fn log_row(world: &World, step: usize, q_cmd: &JointVector, disp: &[(ContactKey, f64)], relaxed: bool, stalled: bool) -> LogRow {
    let set = &world.state.contact_set;
    let mut contacts: Vec<ContactRecord> = set
        .keys()
        .into_iter()
        .enumerate()
        .map(|(i, key)| ContactRecord {
            key,
            f: set.f_c[i],
            jdq: disp.iter().find(|(k, _)| *k == key).map_or(0.0, |d| d.1),
        })
        .collect();
    for (key, d) in disp {
        if !contacts.iter().any(|c| c.key == *key) {
            contacts.push(ContactRecord { key: *key, f: 0.0, jdq: *d });
        }
    }
    contacts.sort_by_key(|c| c.key);
    LogRow {
        step,
        q: world.state.q.clone(),
        q_cmd: q_cmd.clone(),
        contacts,
        band_length: world.state.band.as_ref().map(|b| b.length),
        relaxed,
        stalled,
    }
}

/// Alternates controller queries and simulator steps for `n_steps` steps,
/// starting from the world's current state with command `q_cmd0`.
pub fn run_closed_loop(
    world: &mut World,
    controller: &mut dyn Controller,
    reference: &Reference,
    q_cmd0: &JointVector,
    n_steps: usize,
    options: LoopOptions,
) -> Result<TrajectoryLog, SimError> {
    let mut log = TrajectoryLog::default();
    let mut q_cmd = q_cmd0.clone();
    log.rows.push(log_row(world, 0, &q_cmd, &[], false, false));
    if let Reference::Trajectory(t) = reference {
        if t.is_empty() {
            return Ok(log);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let normal = Normal::new(0.0, options.force_noise.max(0.0)).expect("finite noise level");
    for l in 0..n_steps {
        let q_ref_next = match reference {
            Reference::Trajectory(t) => t[(l + 1).min(t.len() - 1)].clone(),
            Reference::Goal { q_goal, step } => crate::controller::goal_task_reference(&world.state.q, q_goal, *step),
        };
        let m = world.state.contact_set.len();
        let noise = (options.force_noise > 0.0).then(|| DVector::from_fn(m, |_, _| normal.sample(&mut rng)));
        let obs = world.observation(&q_cmd, q_ref_next, noise.as_ref());
        let ctrl = controller.command(world.model, &obs)?;
        q_cmd = ctrl.q_cmd_next.clone();
        let step = world.advance(&q_cmd)?;
        let prev = log.rows.last().expect("log has the initial row").clone();
        let mut prev_measured = prev.clone();
        for c in prev_measured.contacts.iter_mut() {
            if let Some(i) = obs.keys.iter().position(|k| *k == c.key) {
                c.f = obs.f[i];
            }
        }
        let row = log_row(world, l + 1, &q_cmd, &step.displacement, ctrl.relaxed, ctrl.stalled);
        controller.observe(&prev_measured, &row);
        log.rows.push(row);
    }
    Ok(log)
}
