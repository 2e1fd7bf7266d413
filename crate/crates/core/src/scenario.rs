//! JSON scenario files: robot, obstacles, band, controller and task.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::band::BandParams;
use crate::controller::ControllerConfig;
use crate::estimation::EstimatorConfig;
use crate::geometry::{Aabb, Vec3};
use crate::kinematics::{JointVector, RobotModel};
use crate::planner::{PlannerParams, PlanningScene};
use crate::worldsim::{BandSetup, Environment, Obstacle, RigidMode, Stiffness};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema error at `{path}` (line {line}, column {column}): {message}")]
    Schema { path: String, line: usize, column: usize, message: String },
    #[error("invalid value at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

impl ScenarioError {
    /// Dotted field path of a schema or validation error.
    pub fn path(&self) -> Option<&str> {
        match self {
            ScenarioError::Schema { path, .. } | ScenarioError::Invalid { path, .. } => Some(path),
            _ => None,
        }
    }
}

/// Serial arm whose links lie along their local x axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub axes: Vec<Vec3>,
    pub lengths: Vec<f64>,
    pub radius: f64,
    #[serde(default = "one")]
    pub k_q: f64,
    #[serde(default = "one")]
    pub d_q: f64,
    /// Per-joint `[min, max]`; ±π when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<Vec<[f64; 2]>>,
    /// Links allowed to touch the band; all links when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_links: Option<Vec<usize>>,
}

fn one() -> f64 {
    1.0
}

impl RobotSpec {
    pub fn model(&self) -> Result<RobotModel, ScenarioError> {
        let invalid = |path: &str, message: String| ScenarioError::Invalid { path: path.into(), message };
        let n = self.axes.len();
        if n == 0 {
            return Err(invalid("robot.axes", "robot needs at least one joint".into()));
        }
        if self.lengths.len() != n {
            return Err(invalid("robot.lengths", format!("expected {n} entries, got {}", self.lengths.len())));
        }
        if let Some((i, _)) = self.axes.iter().enumerate().find(|(_, a)| !(a.norm() > 0.0)) {
            return Err(invalid(&format!("robot.axes[{i}]"), "axis must be non-zero".into()));
        }
        if let Some((i, _)) = self.lengths.iter().enumerate().find(|(_, l)| !(**l > 0.0)) {
            return Err(invalid(&format!("robot.lengths[{i}]"), "length must be positive".into()));
        }
        if !(self.radius > 0.0) {
            return Err(invalid("robot.radius", "radius must be positive".into()));
        }
        let mut model = RobotModel::serial(&self.axes, &self.lengths, self.radius);
        model.k_q.fill(self.k_q);
        model.d_q.fill(self.d_q);
        if let Some(limits) = &self.limits {
            if limits.len() != n {
                return Err(invalid("robot.limits", format!("expected {n} entries, got {}", limits.len())));
            }
            model.q_min = DVector::from_iterator(n, limits.iter().map(|l| l[0]));
            model.q_max = DVector::from_iterator(n, limits.iter().map(|l| l[1]));
        }
        if let Some(allowed) = &self.allowed_links {
            if let Some((i, l)) = allowed.iter().enumerate().find(|(_, l)| **l >= n) {
                return Err(invalid(&format!("robot.allowed_links[{i}]"), format!("link {l} does not exist ({n} links)")));
            }
            model.allowed_links = allowed.clone();
        }
        RobotModel::new(
            model.joints,
            model.links,
            model.k_q,
            model.d_q,
            model.q_min,
            model.q_max,
            model.allowed_links,
            model.ee_point,
        )
        .map_err(|e| invalid("robot", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: Vec3,
    pub half_extents: Vec3,
    #[serde(default = "rigid")]
    pub stiffness: Stiffness,
}

fn rigid() -> Stiffness {
    Stiffness::Rigid
}

/// Stiffness available to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StiffnessSource {
    /// Online RLS estimate.
    #[default]
    Estimated,
    Known,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "default_activation")]
    pub activation_dist: f64,
    #[serde(default)]
    pub rigid_mode: RigidMode,
    /// Force-measurement noise standard deviation (N).
    #[serde(default)]
    pub force_noise: f64,
    #[serde(default)]
    pub stiffness: StiffnessSource,
    /// Band mode used when simulating without a plan.
    #[serde(default)]
    pub band_sigma: u8,
}

fn default_activation() -> f64 {
    1e-3
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            activation_dist: default_activation(),
            rigid_mode: RigidMode::default(),
            force_noise: 0.0,
            stiffness: StiffnessSource::default(),
            band_sigma: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Joints(Vec<f64>),
    Ee(Vec3),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub q0: Vec<f64>,
    pub goal: Goal,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Joint-space step of the goal reference.
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_steps() -> usize {
    100
}

fn default_step() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub robot: RobotSpec,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<BandParams>,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub planner: PlannerParams,
    #[serde(default)]
    pub simulation: SimulationSpec,
    pub task: TaskSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn robot_model(&self) -> Result<RobotModel, ScenarioError> {
        self.robot.model()
    }

    pub fn q0(&self) -> JointVector {
        DVector::from_vec(self.task.q0.clone())
    }

    pub fn boxes(&self) -> Vec<Aabb> {
        self.boxes.iter().map(|b| Aabb::new(b.center, b.half_extents)).collect()
    }

    /// Simulation environment with the band in mode `sigma`.
    pub fn environment(&self, sigma: u8) -> Environment {
        Environment {
            obstacles: self
                .boxes
                .iter()
                .map(|b| Obstacle { aabb: Aabb::new(b.center, b.half_extents), stiffness: b.stiffness })
                .collect(),
            band: self.band.clone().map(|params| BandSetup { params, sigma }),
            activation_dist: self.simulation.activation_dist,
            rigid_mode: self.simulation.rigid_mode,
        }
    }

    pub fn planning_scene<'a>(&self, model: &'a RobotModel) -> PlanningScene<'a> {
        PlanningScene { model, boxes: self.boxes(), band: self.band.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks cross-field constraints that the schema cannot express.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |path: &str, message: String| Err(ScenarioError::Invalid { path: path.into(), message });
        if self.schema != SCHEMA_VERSION {
            return invalid("schema", format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema));
        }
        let model = self.robot_model()?;
        let n = model.n_q();
        if !(self.controller.f_max > 0.0 && self.controller.f_max.is_finite()) {
            return invalid("controller.f_max", format!("must be positive, got {}", self.controller.f_max));
        }
        if let Err(e) = self.controller.validate() {
            return invalid("controller", e.to_string());
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.half_extents.iter().any(|h| !(*h > 0.0)) {
                return invalid(&format!("boxes[{i}].half_extents"), "half extents must be positive".into());
            }
        }
        if let Some(band) = &self.band {
            if !(band.l_max > band.rest_length()) {
                return invalid("band.l_max", format!("must exceed the anchor distance {}", band.rest_length()));
            }
            if !(band.k_band >= 0.0) {
                return invalid("band.k_band", "must be non-negative".into());
            }
            if !(band.density > 0.0) || band.k_neighbors == 0 {
                return invalid("band.density", "sampling density and k_neighbors must be positive".into());
            }
        }
        if self.simulation.band_sigma > 2 {
            return invalid("simulation.band_sigma", "mode must be 0, 1 or 2".into());
        }
        if self.simulation.band_sigma != 0 && self.band.is_none() {
            return invalid("simulation.band_sigma", "a band mode needs a band".into());
        }
        if !(self.simulation.force_noise >= 0.0) {
            return invalid("simulation.force_noise", "must be non-negative".into());
        }
        if self.task.q0.len() != n {
            return invalid("task.q0", format!("expected {n} joints, got {}", self.task.q0.len()));
        }
        if let Goal::Joints(q) = &self.task.goal {
            if q.len() != n {
                return invalid("task.goal.joints", format!("expected {n} joints, got {}", q.len()));
            }
        }
        if !(self.task.step > 0.0) {
            return invalid("task.step", "must be positive".into());
        }
        Ok(())
    }
}

/// Nearest field name to `unknown` within a small edit distance.
fn suggest<'a>(unknown: &str, expected: &[&'a str]) -> Option<&'a str> {
    expected
        .iter()
        .map(|e| (strsim::levenshtein(unknown, e), *e))
        .filter(|(d, _)| *d <= 3)
        .min()
        .map(|(_, e)| e)
}

fn backticked(s: &str) -> Vec<&str> {
    s.split('`').skip(1).step_by(2).collect()
}

fn schema_error(path: String, err: serde_json::Error) -> ScenarioError {
    let (line, column) = (err.line(), err.column());
    let mut message = err.to_string();
    if let Some(i) = message.find(" at line ") {
        message.truncate(i);
    }
    let mut path = if path == "." { String::new() } else { path };
    if let Some(rest) = message.strip_prefix("missing field ") {
        let field = rest.trim_matches('`');
        path = if path.is_empty() { field.to_string() } else { format!("{path}.{field}") };
    } else if message.starts_with("unknown field ") {
        let names = backticked(&message);
        if let Some((unknown, expected)) = names.split_first() {
            let hint = match suggest(unknown, expected) {
                Some(s) => format!("did you mean `{s}`?"),
                None => format!("valid keys: {}", expected.join(", ")),
            };
            message = format!("unknown key `{unknown}`; {hint}");
        }
    }
    if path.is_empty() {
        path = ".".into();
    }
    ScenarioError::Schema { path, line, column, message }
}

/// Parses and validates scenario JSON text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let scenario: Scenario = match serde_path_to_error::deserialize(&mut de) {
        Ok(s) => s,
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            return Err(match inner.classify() {
                serde_json::error::Category::Data => schema_error(path, inner),
                _ => ScenarioError::Parse { line: inner.line(), column: inner.column(), message: inner.to_string() },
            });
        }
    };
    de.end()
        .map_err(|e| ScenarioError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario(&text)
}

/// Directory of the bundled scenario files.
pub fn fixtures_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}
