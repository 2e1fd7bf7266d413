//! Command implementations behind the `contact-aware` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use contact_aware::contact::ContactKey;
use contact_aware::controller::{ContactAwareController, Controller, StiffnessModel};
use contact_aware::estimation::{harvest_regressor, EstimatorConfig, StiffnessEstimator};
use contact_aware::kinematics::JointVector;
use contact_aware::planner::{ik_candidates, optimize_goal_state, plan_all_modes, select_goal, PlanResult};
use contact_aware::scenario::{load_scenario, Goal, Scenario, ScenarioError, StiffnessSource};
use contact_aware::worldsim::{run_closed_loop, ContactRecord, LogRow, LoopOptions, Reference, TrajectoryLog, World};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// IO, parse or schema problem.
    Input(String),
    /// Control or simulation solver failure.
    Stall(String),
    /// No planning mode produced a path.
    Planning(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Stall(_) => 2,
            CliError::Planning(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Stall(m) => write!(f, "control stall: {m}"),
            CliError::Planning(m) => write!(f, "planning failed: {m}"),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_csv(path: &Path, header: &[String], records: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in records {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub max_force: f64,
    /// Largest force after the first five steps.
    pub max_force_after_transient: f64,
    /// Infinity-norm joint error to the final reference.
    pub tracking_error_final: f64,
    pub relaxed_steps: usize,
    pub stalled: bool,
    pub q_final: Vec<f64>,
    /// Final stiffness estimate per contact.
    pub k_hat: BTreeMap<String, f64>,
    pub seed: u64,
}

/// Everything a closed-loop run produced.
pub struct Rollout {
    pub log: TrajectoryLog,
    pub summary: Summary,
    pub estimator_trace: Vec<contact_aware::estimation::EstimatorTraceRow>,
}

fn contacts_records(log: &TrajectoryLog) -> Vec<Vec<String>> {
    log.rows
        .iter()
        .flat_map(|r| {
            r.contacts.iter().map(move |c| vec![r.step.to_string(), c.key.to_string(), c.f.to_string(), c.jdq.to_string()])
        })
        .collect()
}

impl Rollout {
    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        create_dir(out)?;
        write_csv(&out.join("run.csv"), &self.log.csv_header(), &self.log.csv_records())?;
        write_csv(&out.join("contacts.csv"), &strings(&["step", "contact_key", "f", "jdq"]), &contacts_records(&self.log))?;
        write_estimator_trace(&out.join("estimator.csv"), &self.estimator_trace)?;
        write_json(&out.join("summary.json"), &self.summary)
    }
}

fn write_estimator_trace(path: &Path, trace: &[contact_aware::estimation::EstimatorTraceRow]) -> Result<(), CliError> {
    let records: Vec<Vec<String>> = trace
        .iter()
        .map(|t| vec![t.step.to_string(), t.contact_key.clone(), t.phi_hat.to_string(), t.p.to_string(), t.innovation.to_string()])
        .collect();
    write_csv(path, &strings(&["step", "contact_key", "phi_hat", "P", "innovation"]), &records)
}

/// Joint-space goal of the task, solving IK for end-effector targets.
fn joint_goal(scenario: &Scenario) -> Result<JointVector, CliError> {
    match &scenario.task.goal {
        Goal::Joints(q) => Ok(DVector::from_vec(q.clone())),
        Goal::Ee(target) => {
            let model = scenario.robot_model()?;
            let q0 = scenario.q0();
            ik_candidates(&model, &q0, target, &scenario.boxes(), scenario.planner.ik_starts)
                .into_iter()
                .min_by(|a, b| (a - &q0).norm().total_cmp(&(b - &q0).norm()))
                .ok_or_else(|| CliError::Planning(format!("no IK solution reaches {target:?}")))
        }
    }
}

/// Runs the contact-aware controller against the simulator.
pub fn simulate(scenario: &Scenario, reference: &Reference, sigma: u8, steps: usize, seed: u64) -> Result<Rollout, CliError> {
    let model = scenario.robot_model()?;
    let q0 = scenario.q0();
    let mut world = World::new(&model, scenario.environment(sigma), q0.clone()).map_err(|e| CliError::Stall(e.to_string()))?;
    let stiffness = match scenario.simulation.stiffness {
        StiffnessSource::Estimated => StiffnessModel::Estimated(StiffnessEstimator::new(scenario.estimator)),
        StiffnessSource::Known => StiffnessModel::Known,
    };
    let mut ctrl = ContactAwareController::new(scenario.controller.clone(), stiffness);
    let options = LoopOptions { force_noise: scenario.simulation.force_noise, seed };
    let log = run_closed_loop(&mut world, &mut ctrl, reference, &q0, steps, options).map_err(|e| CliError::Stall(e.to_string()))?;
    let last = log.rows.last().expect("log has the initial row");
    let target = match reference {
        Reference::Goal { q_goal, .. } => q_goal.clone(),
        Reference::Trajectory(t) => t.last().cloned().unwrap_or_else(|| q0.clone()),
    };
    let estimator = ctrl.estimator();
    let k_hat = log
        .contact_keys()
        .into_iter()
        .filter_map(|k| estimator.and_then(|e| e.state(&k)).map(|s| (k.to_string(), -s.phi_hat[0])))
        .collect();
    let summary = Summary {
        steps: log.rows.len() - 1,
        max_force: log.max_force(),
        max_force_after_transient: log.rows.iter().skip(6).map(LogRow::max_force).fold(0.0, f64::max),
        tracking_error_final: (&last.q - &target).amax(),
        relaxed_steps: log.rows.iter().filter(|r| r.relaxed).count(),
        stalled: log.stalled(),
        q_final: last.q.iter().copied().collect(),
        k_hat,
        seed,
    };
    let estimator_trace = estimator.map(|e| e.trace.clone()).unwrap_or_default();
    Ok(Rollout { log, summary, estimator_trace })
}

fn stall_check(rollout: &Rollout) -> Result<(), CliError> {
    if rollout.summary.stalled {
        Err(CliError::Stall("controller reported a stall".into()))
    } else {
        Ok(())
    }
}

pub fn cmd_simulate(scenario_path: &Path, out: &Path, seed: Option<u64>) -> Result<Summary, CliError> {
    let scenario = load_scenario(scenario_path)?;
    let seed = seed.unwrap_or(scenario.seed);
    let reference = Reference::Goal { q_goal: joint_goal(&scenario)?, step: scenario.task.step };
    let rollout = simulate(&scenario, &reference, scenario.simulation.band_sigma, scenario.task.steps, seed)?;
    rollout.write(out)?;
    stall_check(&rollout)?;
    Ok(rollout.summary)
}

/// Subdivides a joint path so consecutive points are at most `step` apart
/// in every joint.
pub fn resample(path: &[JointVector], step: f64) -> Vec<JointVector> {
    let mut out: Vec<JointVector> = path.first().cloned().into_iter().collect();
    for w in path.windows(2) {
        let n = ((&w[1] - &w[0]).amax() / step).ceil().max(1.0) as usize;
        out.extend((1..=n).map(|i| &w[0] + (&w[1] - &w[0]) * (i as f64 / n as f64)));
    }
    out
}

pub struct PlanOptions {
    pub seed: Option<u64>,
    pub execute: bool,
    pub no_smoothing: bool,
}

pub fn cmd_plan(scenario_path: &Path, out: &Path, opts: &PlanOptions) -> Result<PlanResult, CliError> {
    let scenario = load_scenario(scenario_path)?;
    let Goal::Ee(target) = scenario.task.goal else {
        return Err(CliError::Input("plan needs an end-effector target (task.goal.ee)".into()));
    };
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mut params = scenario.planner.clone();
    if opts.no_smoothing {
        params.smoothing = false;
    }
    let model = scenario.robot_model()?;
    let scene = scenario.planning_scene(&model);
    let plans = plan_all_modes(&scene, &scenario.q0(), &target, &params, seed).map_err(|e| CliError::Planning(e.to_string()))?;
    create_dir(out)?;
    for r in &plans.results {
        write_json(&out.join(format!("plan_sigma{}.json", r.sigma)), r)?;
    }
    let best = plans.best().map_err(|e| CliError::Planning(e.to_string()))?.clone();
    write_json(&out.join("best.json"), &best)?;
    if opts.execute {
        let traj = resample(&best.joint_path(), scenario.controller.dq_max);
        let steps = traj.len() + scenario.task.steps;
        let rollout = simulate(&scenario, &Reference::Trajectory(traj), best.sigma, steps, seed)?;
        rollout.write(out)?;
        stall_check(&rollout)?;
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalReport {
    pub sigma: u8,
    pub q_seed: Vec<f64>,
    pub q: Vec<f64>,
    pub stretch_history: Vec<f64>,
    pub stretch_reduction: f64,
    pub ee_drift: f64,
    pub iterations: usize,
}

pub fn cmd_optimize_goal(scenario_path: &Path, out: &Path, sigma: u8) -> Result<GoalReport, CliError> {
    let scenario = load_scenario(scenario_path)?;
    let Goal::Ee(target) = scenario.task.goal else {
        return Err(CliError::Input("optimize-goal needs an end-effector target (task.goal.ee)".into()));
    };
    if scenario.band.is_none() || !(1..=2).contains(&sigma) {
        return Err(CliError::Input("optimize-goal needs a band and a mode of 1 or 2".into()));
    }
    let model = scenario.robot_model()?;
    let scene = scenario.planning_scene(&model);
    let q0 = scenario.q0();
    let candidates = ik_candidates(&model, &q0, &target, &scene.boxes, scenario.planner.ik_starts);
    let seed_state = select_goal(&scene, &candidates, &q0, sigma, scenario.planner.w_l)
        .ok_or_else(|| CliError::Planning(format!("no valid goal configuration in mode {sigma}")))?;
    let p = &scenario.planner;
    let opt = optimize_goal_state(&scene, &seed_state.q_r, sigma, p.goal_gamma, p.goal_dq_max, p.goal_max_iter)
        .map_err(|e| CliError::Planning(e.to_string()))?;
    let first = opt.stretch_history.first().copied().unwrap_or(0.0);
    let last = opt.stretch_history.last().copied().unwrap_or(0.0);
    let report = GoalReport {
        sigma,
        q_seed: seed_state.q_r.iter().copied().collect(),
        q: opt.q.iter().copied().collect(),
        stretch_reduction: if first > 0.0 { 1.0 - last / first } else { 0.0 },
        stretch_history: opt.stretch_history,
        ee_drift: opt.ee_drift,
        iterations: opt.iterations,
    };
    create_dir(out)?;
    write_json(&out.join("goal.json"), &report)?;
    Ok(report)
}

/// Reads a `contacts.csv` written by `simulate` back into log rows.
pub fn read_contact_log(path: &Path) -> Result<Vec<LogRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows: BTreeMap<usize, Vec<ContactRecord>> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let bad = |what: &str| io_err(path, format!("record {}: bad {what}", i + 1));
        if rec.len() != 4 {
            return Err(bad("column count"));
        }
        let step: usize = rec[0].parse().map_err(|_| bad("step"))?;
        let key: ContactKey = rec[1].parse().map_err(|_| bad("contact_key"))?;
        let f: f64 = rec[2].parse().map_err(|_| bad("f"))?;
        let jdq: f64 = rec[3].parse().map_err(|_| bad("jdq"))?;
        rows.entry(step).or_default().push(ContactRecord { key, f, jdq });
    }
    let last = rows.keys().next_back().copied();
    Ok(last
        .map(|n| {
            (0..=n)
                .map(|step| LogRow {
                    step,
                    q: DVector::zeros(0),
                    q_cmd: DVector::zeros(0),
                    contacts: rows.remove(&step).unwrap_or_default(),
                    band_length: None,
                    relaxed: false,
                    stalled: false,
                })
                .collect()
        })
        .unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub k_hat: BTreeMap<String, f64>,
    pub variance: BTreeMap<String, f64>,
    pub updates: usize,
}

/// Offline stiffness identification over a recorded contact log.
pub fn cmd_identify(contacts_csv: &Path, out: &Path, config: EstimatorConfig) -> Result<IdentifyReport, CliError> {
    let rows = read_contact_log(contacts_csv)?;
    let mut est = StiffnessEstimator::new(config);
    let mut updates = 0;
    for w in rows.windows(2) {
        if let Ok(sample) = harvest_regressor(&w[0], &w[1]) {
            updates += est.update(w[1].step, &sample).unwrap_or(0);
        }
    }
    let mut keys: Vec<ContactKey> = rows.iter().flat_map(|r| r.contacts.iter().map(|c| c.key)).collect();
    keys.sort();
    keys.dedup();
    let mut report = IdentifyReport { k_hat: BTreeMap::new(), variance: BTreeMap::new(), updates };
    for k in keys {
        if let Some(s) = est.state(&k) {
            report.k_hat.insert(k.to_string(), -s.phi_hat[0]);
            report.variance.insert(k.to_string(), s.p[(0, 0)]);
        }
    }
    create_dir(out)?;
    write_estimator_trace(&out.join("estimator.csv"), &est.trace)?;
    write_json(&out.join("identify.json"), &report)?;
    Ok(report)
}

/// Writes plot-ready series and returns the files created.
pub fn cmd_export_plot(input: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let is_json = input.extension().is_some_and(|e| e == "json");
    if is_json {
        export_plan(input, out)
    } else {
        export_run(input, out)
    }
}

fn export_plan(input: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(input).map_err(|e| io_err(input, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| io_err(input, e))?;
    let path = value
        .get("path")
        .and_then(|p| p.as_array())
        .ok_or_else(|| io_err(input, "plan JSON has no `path` array"))?;
    let waypoints: Vec<contact_aware::planner::Waypoint> =
        path.iter().map(|w| serde_json::from_value(w.clone())).collect::<Result<_, _>>().map_err(|e| io_err(input, e))?;
    let n = waypoints.first().map_or(0, |w| w.q.len());
    let mut header = vec!["index".to_string()];
    header.extend((0..n).map(|i| format!("q_{i}")));
    header.extend(strings(&["L", "sigma"]));
    let records: Vec<Vec<String>> = waypoints
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut r = vec![i.to_string()];
            r.extend(w.q.iter().map(|v| v.to_string()));
            r.push(w.band_length.map_or(String::new(), |l| l.to_string()));
            r.push(w.sigma.to_string());
            r
        })
        .collect();
    create_dir(out)?;
    let file = out.join("waypoints.csv");
    write_csv(&file, &header, &records)?;
    Ok(vec![file])
}

fn export_run(input: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut r = csv::Reader::from_path(input).map_err(|e| io_err(input, e))?;
    let header: Vec<String> = r.headers().map_err(|e| io_err(input, e))?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("step") {
        return Err(io_err(input, "run CSV must start with a `step` column"));
    }
    let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>().map_err(|e| io_err(input, e))?;
    let mut files = Vec::new();
    create_dir(out)?;
    let mut series = |col: usize, name: &str, value: &str| -> Result<(), CliError> {
        let records: Vec<Vec<String>> = rows
            .iter()
            .filter(|rec| !rec[col].is_empty())
            .map(|rec| vec![rec[0].to_string(), rec[col].to_string()])
            .collect();
        let file = out.join(format!("{name}.csv"));
        write_csv(&file, &strings(&["step", value]), &records)?;
        files.push(file);
        Ok(())
    };
    for (col, name) in header.iter().enumerate() {
        if let Some(i) = name.strip_prefix("f_") {
            series(col, &format!("force_{i}"), "f")?;
        } else if name == "bandL" {
            series(col, "band_length", "L")?;
        }
    }
    Ok(files)
}
