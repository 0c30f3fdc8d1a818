//! Scenario, agent, and trajectory types shared across the pipeline.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Vec2};

/// Maximum number of modeled agents per scenario.
pub const MAX_AGENTS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("agent index {index} out of range for scenario with {count} agents")]
    AgentIndex { index: usize, count: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario {id}: {violations}")]
    Invalid { id: String, violations: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub t: u32,
    pub pos: Vec2,
}

impl TrajPoint {
    pub fn new(t: u32, x: f64, y: f64) -> Self {
        Self {
            t,
            pos: Vec2::new(x, y),
        }
    }
}

/// Timestamped positions sampled at a fixed rate.
///
/// Full scenario trajectories start at timestep 0 and cover the horizon;
/// predicted future segments start at the scenario's `history_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajPoint>,
    pub rate: f64,
}

impl Trajectory {
    pub fn new(points: Vec<TrajPoint>, rate: f64) -> Self {
        Self { points, rate }
    }

    /// Builds a trajectory from positions with timesteps `start, start+1, ...`.
    pub fn from_positions(start: u32, positions: &[Vec2], rate: f64) -> Self {
        let points = positions
            .iter()
            .enumerate()
            .map(|(i, &pos)| TrajPoint {
                t: start + i as u32,
                pos,
            })
            .collect();
        Self { points, rate }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.points.iter().map(|p| p.pos).collect()
    }

    /// Points with timestep `>= start`.
    pub fn slice_from(&self, start: u32) -> Trajectory {
        Trajectory {
            points: self
                .points
                .iter()
                .copied()
                .filter(|p| p.t >= start)
                .collect(),
            rate: self.rate,
        }
    }

    /// Points with timestep `< end`.
    pub fn slice_until(&self, end: u32) -> Trajectory {
        Trajectory {
            points: self.points.iter().copied().filter(|p| p.t < end).collect(),
            rate: self.rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 3] = [
        AgentType::Vehicle,
        AgentType::Pedestrian,
        AgentType::Cyclist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::Cyclist => "cyclist",
        }
    }

    /// Default footprint as (length, width) in meters.
    pub fn default_footprint(self) -> (f64, f64) {
        match self {
            AgentType::Vehicle => (4.5, 2.0),
            AgentType::Cyclist => (1.8, 0.6),
            AgentType::Pedestrian => (0.6, 0.6),
        }
    }

    pub fn index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
            AgentType::Cyclist => 2,
        }
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentDescriptor {
    pub agent_type: AgentType,
    pub p0: Vec2,
    pub v0: Vec2,
    /// Distance to the ego's initial position (m).
    pub delta_d: f64,
    /// Bearing to the agent measured from the ego heading, in `[-π, π]`.
    pub delta_theta: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentDescriptor {
    /// Heading implied by the initial velocity, or 0 for a stationary agent.
    pub fn velocity_heading(&self) -> f64 {
        if self.v0.norm() > 1e-6 {
            self.v0.angle()
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub descriptor: AgentDescriptor,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub rate: f64,
    pub horizon: usize,
    pub history_len: usize,
    /// Ego is always agent 0.
    pub agents: Vec<Agent>,
    pub map_polylines: Vec<Vec<Vec2>>,
}

/// Inputs for one agent when building a [`Scenario`]; `p0` is taken from
/// the first trajectory point.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub agent_type: AgentType,
    pub v0: Vec2,
    pub length: f64,
    pub width: f64,
    pub trajectory: Trajectory,
}

impl AgentSpec {
    pub fn with_default_footprint(agent_type: AgentType, v0: Vec2, trajectory: Trajectory) -> Self {
        let (length, width) = agent_type.default_footprint();
        Self {
            agent_type,
            v0,
            length,
            width,
            trajectory,
        }
    }
}

impl Scenario {
    pub fn new(
        id: impl Into<String>,
        rate: f64,
        horizon: usize,
        history_len: usize,
        agents: Vec<AgentSpec>,
        map_polylines: Vec<Vec<Vec2>>,
    ) -> Self {
        let agents = agents
            .into_iter()
            .map(|a| {
                let p0 = a
                    .trajectory
                    .points
                    .first()
                    .map(|p| p.pos)
                    .unwrap_or_default();
                Agent {
                    descriptor: AgentDescriptor {
                        agent_type: a.agent_type,
                        p0,
                        v0: a.v0,
                        delta_d: 0.0,
                        delta_theta: 0.0,
                        length: a.length,
                        width: a.width,
                    },
                    trajectory: a.trajectory,
                }
            })
            .collect();
        let mut s = Scenario {
            id: id.into(),
            rate,
            horizon,
            history_len,
            agents,
            map_polylines,
        };
        s.refresh_relative();
        s
    }

    /// Recomputes `delta_d` / `delta_theta` of every agent from positions.
    pub fn refresh_relative(&mut self) {
        for i in 0..self.agents.len() {
            if let Ok((d, th)) = ego_relative(self, i) {
                self.agents[i].descriptor.delta_d = d;
                self.agents[i].descriptor.delta_theta = th;
            }
        }
    }

    pub fn future_len(&self) -> usize {
        self.horizon.saturating_sub(self.history_len)
    }

    pub fn ego(&self) -> &Agent {
        &self.agents[0]
    }

    /// Heading of the ego used for bearings.
    pub fn ego_heading(&self) -> f64 {
        let Some(ego) = self.agents.first() else {
            return 0.0;
        };
        if ego.descriptor.v0.norm() > 1e-6 {
            return ego.descriptor.v0.angle();
        }
        let hist = ego.trajectory.points.iter().take(self.history_len.max(1));
        let mut prev: Option<Vec2> = None;
        for p in hist {
            if let Some(q) = prev {
                let d = p.pos - q;
                if d.norm() > 1e-6 {
                    return d.angle();
                }
            }
            prev = Some(p.pos);
        }
        0.0
    }
}

/// Distance and bearing of agent `agent_index` relative to the ego.
pub fn ego_relative(s: &Scenario, agent_index: usize) -> Result<(f64, f64), ScenarioError> {
    if agent_index >= s.agents.len() {
        return Err(ScenarioError::AgentIndex {
            index: agent_index,
            count: s.agents.len(),
        });
    }
    let ego = s.agents[0].descriptor.p0;
    let p = s.agents[agent_index].descriptor.p0;
    let d = p - ego;
    let dist = d.norm();
    if dist == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((dist, wrap_angle(d.angle() - s.ego_heading())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every scenario invariant, returning one entry per violation.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: &str| {
        out.push(Violation {
            field,
            rule: rule.to_string(),
        })
    };
    if s.agents.is_empty() {
        push("agents".into(), "at least one agent required");
    }
    if s.agents.len() > MAX_AGENTS {
        push("agents".into(), "agent count exceeds 8");
    }
    if !(s.rate.is_finite() && s.rate > 0.0) {
        push("rate".into(), "rate must be positive and finite");
    }
    if s.history_len >= s.horizon {
        push(
            "history_len".into(),
            "history_len must be less than horizon",
        );
    }
    for (i, agent) in s.agents.iter().enumerate() {
        let d = &agent.descriptor;
        let f = |name: &str| format!("agents[{i}].{name}");
        if !(d.length > 0.0 && d.length.is_finite()) {
            push(f("length"), "footprint extent must be strictly positive");
        }
        if !(d.width > 0.0 && d.width.is_finite()) {
            push(f("width"), "footprint extent must be strictly positive");
        }
        if !(d.delta_d >= 0.0) {
            push(f("delta_d"), "delta_d must be non-negative");
        }
        if !(d.delta_theta.abs() <= std::f64::consts::PI) {
            push(f("delta_theta"), "delta_theta must lie within [-pi, pi]");
        }
        if !d.p0.is_finite() || !d.v0.is_finite() {
            push(f("p0/v0"), "coordinates must be finite");
        }
        let traj = &agent.trajectory;
        if traj.rate != s.rate {
            push(
                f("trajectory.rate"),
                "trajectory rate must match scenario rate",
            );
        }
        if traj.len() != s.horizon {
            push(f("trajectory"), "trajectory length must equal horizon");
        }
        if traj.points.first().is_some_and(|p| p.t != 0) {
            push(f("trajectory"), "timesteps must start at 0");
        }
        if traj.points.windows(2).any(|w| w[1].t <= w[0].t) {
            push(f("trajectory"), "timesteps must be strictly increasing");
        }
        if traj.points.iter().any(|p| !p.pos.is_finite()) {
            push(f("trajectory"), "coordinates must be finite");
        }
    }
    out
}

// ---- JSON schema ----

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioJson {
    id: String,
    rate: f64,
    horizon: usize,
    history_len: usize,
    agents: Vec<AgentJson>,
    map_polylines: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentJson {
    #[serde(rename = "type")]
    agent_type: AgentType,
    p0: [f64; 2],
    v0: [f64; 2],
    length: f64,
    width: f64,
    trajectory: Vec<(u32, f64, f64)>,
}

impl From<&Scenario> for ScenarioJson {
    fn from(s: &Scenario) -> Self {
        ScenarioJson {
            id: s.id.clone(),
            rate: s.rate,
            horizon: s.horizon,
            history_len: s.history_len,
            agents: s
                .agents
                .iter()
                .map(|a| AgentJson {
                    agent_type: a.descriptor.agent_type,
                    p0: a.descriptor.p0.into(),
                    v0: a.descriptor.v0.into(),
                    length: a.descriptor.length,
                    width: a.descriptor.width,
                    trajectory: a
                        .trajectory
                        .points
                        .iter()
                        .map(|p| (p.t, p.pos.x, p.pos.y))
                        .collect(),
                })
                .collect(),
            map_polylines: s
                .map_polylines
                .iter()
                .map(|l| l.iter().map(|&p| p.into()).collect())
                .collect(),
        }
    }
}

impl From<ScenarioJson> for Scenario {
    fn from(j: ScenarioJson) -> Self {
        let rate = j.rate;
        let agents = j
            .agents
            .into_iter()
            .map(|a| Agent {
                descriptor: AgentDescriptor {
                    agent_type: a.agent_type,
                    p0: a.p0.into(),
                    v0: a.v0.into(),
                    delta_d: 0.0,
                    delta_theta: 0.0,
                    length: a.length,
                    width: a.width,
                },
                trajectory: Trajectory::new(
                    a.trajectory
                        .into_iter()
                        .map(|(t, x, y)| TrajPoint::new(t, x, y))
                        .collect(),
                    rate,
                ),
            })
            .collect();
        let mut s = Scenario {
            id: j.id,
            rate,
            horizon: j.horizon,
            history_len: j.history_len,
            agents,
            map_polylines: j
                .map_polylines
                .into_iter()
                .map(|l| l.into_iter().map(Vec2::from).collect())
                .collect(),
        };
        s.refresh_relative();
        s
    }
}

pub fn scenario_to_json(s: &Scenario) -> String {
    serde_json::to_string(&ScenarioJson::from(s)).expect("scenario serializes")
}

pub fn scenario_from_json(text: &str) -> Result<Scenario, ScenarioError> {
    let j: ScenarioJson = serde_json::from_str(text)?;
    Ok(j.into())
}

/// Serializes a dataset as a JSON array of scenario objects.
pub fn dataset_to_json(scenarios: &[Scenario]) -> String {
    let js: Vec<ScenarioJson> = scenarios.iter().map(ScenarioJson::from).collect();
    serde_json::to_string_pretty(&js).expect("dataset serializes")
}

pub fn dataset_from_json(text: &str) -> Result<Vec<Scenario>, ScenarioError> {
    let js: Vec<ScenarioJson> = serde_json::from_str(text)?;
    Ok(js.into_iter().map(Scenario::from).collect())
}

pub fn save_dataset(path: &Path, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    std::fs::write(path, dataset_to_json(scenarios)).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a dataset and rejects any scenario that fails validation.
pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let scenarios = dataset_from_json(&text)?;
    for s in &scenarios {
        let report = validate_scenario(s);
        if !report.is_empty() {
            return Err(ScenarioError::Invalid {
                id: s.id.clone(),
                violations: report
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
    }
    Ok(scenarios)
}
