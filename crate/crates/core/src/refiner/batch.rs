use super::{linear_fill_points, RefinerError, STATIONARY_EPS};
use crate::geom::{Pose, Vec2};
use crate::preprocess::KeypointSet;
use crate::scenario::{AgentType, Scenario};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateToken {
    pub agent_type: AgentType,
    pub p0: Vec2,
    pub v0: Vec2,
    pub length: f64,
    pub width: f64,
    pub is_self: bool,
}

/// Refinement inputs for one agent; all positions in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerSample {
    pub scenario_id: String,
    pub agent_index: usize,
    pub rate: f64,
    pub horizon: usize,
    pub history_len: usize,
    /// Observed positions for timesteps `0..history_len`.
    pub history: Vec<Vec2>,
    pub keypoints: Vec<(u32, Vec2)>,
    /// The refined agent's own state first, then every other agent.
    pub states: Vec<StateToken>,
    /// Linear fill over the future timesteps.
    pub filled: Vec<Vec2>,
    /// Ground-truth future positions.
    pub target: Vec<Vec2>,
    /// Last observed pose; origin of the agent-centric frame.
    pub anchor: Pose,
}

impl RefinerSample {
    pub fn future_len(&self) -> usize {
        self.horizon - self.history_len
    }

    pub fn future_start(&self) -> u32 {
        self.history_len as u32
    }

    pub fn validate(&self) -> Result<(), RefinerError> {
        let f = self.future_len();
        if self.history.len() != self.history_len || self.history_len == 0 {
            return Err(RefinerError::Shape(format!(
                "history has {} points, expected {} (> 0)",
                self.history.len(),
                self.history_len
            )));
        }
        if f < 2 || self.filled.len() != f || self.target.len() != f {
            return Err(RefinerError::Shape(format!(
                "future segment: filled {}, target {}, expected {} (>= 2)",
                self.filled.len(),
                self.target.len(),
                f
            )));
        }
        if self.states.is_empty() || !self.states[0].is_self {
            return Err(RefinerError::Shape(
                "first state token must describe the agent itself".into(),
            ));
        }
        let finite = self
            .history
            .iter()
            .chain(&self.filled)
            .chain(&self.target)
            .all(|p| p.is_finite())
            && self.keypoints.iter().all(|(_, p)| p.is_finite())
            && self
                .states
                .iter()
                .all(|s| s.p0.is_finite() && s.v0.is_finite());
        if !finite {
            return Err(RefinerError::Shape("non-finite input".into()));
        }
        Ok(())
    }
}

/// Samples refined together. Keypoint sequences have per-sample lengths;
/// [`RefinerBatch::keypoint_mask`] gives the padded validity view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefinerBatch {
    pub samples: Vec<RefinerSample>,
}

impl RefinerBatch {
    pub fn max_keypoints(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.keypoints.len())
            .max()
            .unwrap_or(0)
    }

    /// `mask[i][j]` is true when keypoint slot `j` of sample `i` holds data.
    pub fn keypoint_mask(&self) -> Vec<Vec<bool>> {
        let m = self.max_keypoints();
        self.samples
            .iter()
            .map(|s| (0..m).map(|j| j < s.keypoints.len()).collect())
            .collect()
    }

    pub fn validate(&self) -> Result<(), RefinerError> {
        self.samples.iter().try_for_each(RefinerSample::validate)
    }
}

/// Last history position, heading of the last non-stationary history step.
pub fn anchor_pose(history: &[Vec2], fallback_heading: f64) -> Pose {
    let last = *history.last().expect("non-empty history");
    let heading = history
        .windows(2)
        .rev()
        .map(|w| w[1] - w[0])
        .find(|d| d.norm() > STATIONARY_EPS)
        .map(|d| d.angle())
        .unwrap_or(fallback_heading);
    Pose::new(last, heading)
}

/// Builds the refinement sample of agent `agent_index` from its keypoints.
pub fn build_sample(
    s: &Scenario,
    agent_index: usize,
    keypoints: &KeypointSet,
) -> Result<RefinerSample, RefinerError> {
    let kp: Vec<(u32, Vec2)> = keypoints.entries.iter().map(|k| (k.t, k.pos)).collect();
    build_sample_from_points(s, agent_index, kp)
}

/// [`build_sample`] from raw `(t, position)` keypoints sorted by timestep.
pub fn build_sample_from_points(
    s: &Scenario,
    agent_index: usize,
    keypoints: Vec<(u32, Vec2)>,
) -> Result<RefinerSample, RefinerError> {
    let agent = s
        .agents
        .get(agent_index)
        .ok_or_else(|| RefinerError::Shape(format!("agent index {agent_index} out of range")))?;
    if let Some(&(t, _)) = keypoints.iter().find(|(t, _)| *t as usize >= s.horizon) {
        return Err(RefinerError::KeypointOutOfRange(t));
    }
    let full = linear_fill_points(&keypoints, s.horizon)?;
    let positions = agent.trajectory.positions();
    if positions.len() != s.horizon || s.history_len == 0 || s.history_len >= s.horizon {
        return Err(RefinerError::Shape(format!(
            "agent {agent_index} trajectory has {} points for horizon {} / history {}",
            positions.len(),
            s.horizon,
            s.history_len
        )));
    }
    let history = positions[..s.history_len].to_vec();
    let anchor = anchor_pose(&history, agent.descriptor.velocity_heading());
    let mut states = Vec::with_capacity(s.agents.len());
    let token = |i: usize| {
        let d = &s.agents[i].descriptor;
        StateToken {
            agent_type: d.agent_type,
            p0: d.p0,
            v0: d.v0,
            length: d.length,
            width: d.width,
            is_self: i == agent_index,
        }
    };
    states.push(token(agent_index));
    states.extend((0..s.agents.len()).filter(|&i| i != agent_index).map(token));
    Ok(RefinerSample {
        scenario_id: s.id.clone(),
        agent_index,
        rate: s.rate,
        horizon: s.horizon,
        history_len: s.history_len,
        history,
        keypoints,
        states,
        filled: full[s.history_len..].to_vec(),
        target: positions[s.history_len..].to_vec(),
        anchor,
    })
}

/// One sample per agent, with `keypoints[i]` belonging to agent `i`.
pub fn build_batch(s: &Scenario, keypoints: &[KeypointSet]) -> Result<RefinerBatch, RefinerError> {
    if keypoints.len() != s.agents.len() {
        return Err(RefinerError::Shape(format!(
            "{} keypoint sets for {} agents",
            keypoints.len(),
            s.agents.len()
        )));
    }
    let samples = keypoints
        .iter()
        .enumerate()
        .map(|(i, k)| build_sample(s, i, k))
        .collect::<Result<_, _>>()?;
    Ok(RefinerBatch { samples })
}
