//! Keypoint extraction and scene serialization.
//!
//! Geometric keypoints come from Douglas-Peucker simplification of the
//! trajectory, kinematic keypoints from jumps in per-step speed. The final
//! set is their timestep union with both endpoints always present.

use std::fmt::Write as _;

use crate::geom::Vec2;
use crate::scenario::{validate_scenario, Scenario, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("trajectory has {len} points, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("{name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Douglas-Peucker tolerance (m).
    pub epsilon: f64,
    /// Speed-change threshold (m/s).
    pub delta_v: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            delta_v: 1.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        check_positive("epsilon", self.epsilon)?;
        check_positive("delta_v", self.delta_v)
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<(), PreprocessError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(PreprocessError::NonPositive { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointSource {
    Geometric,
    Kinematic,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub t: u32,
    pub pos: Vec2,
    pub source: KeypointSource,
}

/// Sparse waypoints ordered by strictly increasing timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet {
    pub entries: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timesteps(&self) -> Vec<u32> {
        self.entries.iter().map(|k| k.t).collect()
    }

    pub fn get(&self, t: u32) -> Option<&Keypoint> {
        self.entries
            .binary_search_by_key(&t, |k| k.t)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Builds a set from `(t, pos)` pairs, sorting and dropping duplicate timesteps.
    pub fn from_points(
        points: impl IntoIterator<Item = (u32, Vec2)>,
        source: KeypointSource,
    ) -> Self {
        let mut entries: Vec<Keypoint> = points
            .into_iter()
            .map(|(t, pos)| Keypoint { t, pos, source })
            .collect();
        entries.sort_by_key(|k| k.t);
        entries.dedup_by_key(|k| k.t);
        Self { entries }
    }
}

/// Free-text reasoning record attached to a scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningAnnotation {
    pub road_geometry: String,
    pub collision_risks: String,
    pub intention: String,
}

impl ReasoningAnnotation {
    pub fn is_complete(&self) -> bool {
        [&self.road_geometry, &self.collision_risks, &self.intention]
            .iter()
            .all(|s| !s.trim().is_empty())
    }

    /// Joined text used as the reasoning block of a tagged output.
    pub fn to_text(&self) -> String {
        format!(
            "{} {} {}",
            self.road_geometry, self.collision_risks, self.intention
        )
    }
}

// Distance from p to the segment a-b; the clamped projection makes this an
// upper bound on the infinite-line distance.
fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq < 1e-24 {
        return p.distance(a);
    }
    let s = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * s)
}

/// Douglas-Peucker simplification; returns the surviving points as geometric keypoints.
pub fn douglas_peucker(traj: &Trajectory, epsilon: f64) -> Result<KeypointSet, PreprocessError> {
    check_positive("epsilon", epsilon)?;
    let pts = &traj.points;
    if pts.len() < 2 {
        return Err(PreprocessError::TooShort {
            len: pts.len(),
            min: 2,
        });
    }
    let mut keep = vec![false; pts.len()];
    keep[0] = true;
    keep[pts.len() - 1] = true;
    let mut stack = vec![(0usize, pts.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (a, b) = (pts[lo].pos, pts[hi].pos);
        let mut best = (lo, -1.0f64);
        for (i, p) in pts.iter().enumerate().take(hi).skip(lo + 1) {
            let d = segment_distance(p.pos, a, b);
            if d > best.1 {
                best = (i, d);
            }
        }
        if best.1 > epsilon {
            keep[best.0] = true;
            stack.push((best.0, hi));
            stack.push((lo, best.0));
        }
    }
    let entries = pts
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| Keypoint {
            t: p.t,
            pos: p.pos,
            source: KeypointSource::Geometric,
        })
        .collect();
    Ok(KeypointSet { entries })
}

/// Per-step scalar speeds `‖p[i+1] − p[i]‖ · rate`.
pub fn step_speeds(traj: &Trajectory) -> Vec<f64> {
    traj.points
        .windows(2)
        .map(|w| w[0].pos.distance(w[1].pos) * traj.rate)
        .collect()
}

/// Keypoints at every step whose speed differs from the previous step's by more than `delta_v`.
pub fn kinematic_keypoints(
    traj: &Trajectory,
    delta_v: f64,
) -> Result<KeypointSet, PreprocessError> {
    check_positive("delta_v", delta_v)?;
    if traj.len() < 3 {
        return Err(PreprocessError::TooShort {
            len: traj.len(),
            min: 3,
        });
    }
    let speeds = step_speeds(traj);
    let entries = (1..speeds.len())
        .filter(|&i| (speeds[i] - speeds[i - 1]).abs() > delta_v)
        .map(|i| Keypoint {
            t: traj.points[i].t,
            pos: traj.points[i].pos,
            source: KeypointSource::Kinematic,
        })
        .collect();
    Ok(KeypointSet { entries })
}

/// Timestep union of the geometric and kinematic keypoints.
pub fn extract_keypoints(
    traj: &Trajectory,
    cfg: &PreprocessConfig,
) -> Result<KeypointSet, PreprocessError> {
    let geometric = douglas_peucker(traj, cfg.epsilon)?;
    // Two-point trajectories have no speed change to detect.
    let kinematic = if traj.len() >= 3 {
        kinematic_keypoints(traj, cfg.delta_v)?
    } else {
        KeypointSet::default()
    };
    Ok(union(&geometric, &kinematic))
}

/// Merges two timestep-sorted keypoint sets, flagging shared timesteps as `Both`.
pub fn union(a: &KeypointSet, b: &KeypointSet) -> KeypointSet {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.entries.len() || j < b.entries.len() {
        match (a.entries.get(i), b.entries.get(j)) {
            (Some(x), Some(y)) if x.t == y.t => {
                out.push(Keypoint {
                    source: if x.source == y.source {
                        x.source
                    } else {
                        KeypointSource::Both
                    },
                    ..*x
                });
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x.t < y.t => {
                out.push(*x);
                i += 1;
            }
            (Some(_), Some(y)) => {
                out.push(*y);
                j += 1;
            }
            (Some(x), None) => {
                out.push(*x);
                i += 1;
            }
            (None, Some(y)) => {
                out.push(*y);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    KeypointSet { entries: out }
}

/// Deterministic text description of a scene, one line per agent.
pub fn serialize_scene(s: &Scenario) -> Result<String, PreprocessError> {
    let report = validate_scenario(s);
    if !report.is_empty() {
        return Err(PreprocessError::InvalidScenario(
            report
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let mut out = format!(
        "Scene with {} agents, horizon {} steps at {} fps.",
        s.agents.len(),
        s.horizon,
        s.rate
    );
    for (i, agent) in s.agents.iter().enumerate() {
        let d = &agent.descriptor;
        out.push('\n');
        let ego = if i == 0 { " (ego)" } else { "" };
        let _ = write!(
            out,
            "Agent {i}{ego}: {} at ({:.2}, {:.2}), velocity ({:.2}, {:.2}) m/s",
            d.agent_type, d.p0.x, d.p0.y, d.v0.x, d.v0.y
        );
        if i != 0 {
            let _ = write!(
                out,
                ", distance {:.2} m, bearing {:.2} rad",
                d.delta_d, d.delta_theta
            );
        }
        out.push('.');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{AgentSpec, AgentType};

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        let pts: Vec<Vec2> = points.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        Trajectory::from_positions(0, &pts, 10.0)
    }

    #[test]
    fn dp_collinear_keeps_endpoints() {
        let k = douglas_peucker(
            &traj(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]),
            0.5,
        )
        .unwrap();
        assert_eq!(k.timesteps(), vec![0, 3]);
    }

    #[test]
    fn dp_keeps_apex() {
        let k = douglas_peucker(&traj(&[(0.0, 0.0), (5.0, 5.0), (10.0, 0.0)]), 0.5).unwrap();
        assert_eq!(k.timesteps(), vec![0, 1, 2]);
    }

    #[test]
    fn dp_small_bump_dropped() {
        let k = douglas_peucker(
            &traj(&[(0.0, 0.0), (1.0, 0.2), (2.0, 0.0), (3.0, 0.0)]),
            0.5,
        )
        .unwrap();
        assert_eq!(k.timesteps(), vec![0, 3]);
    }

    #[test]
    fn dp_rejects_short_and_bad_epsilon() {
        assert!(matches!(
            douglas_peucker(&traj(&[(0.0, 0.0)]), 0.5),
            Err(PreprocessError::TooShort { .. })
        ));
        assert!(douglas_peucker(&traj(&[(0.0, 0.0), (1.0, 0.0)]), 0.0).is_err());
    }

    #[test]
    fn kinematic_constant_velocity_is_empty() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 0.0)).collect();
        assert!(kinematic_keypoints(&traj(&pts), 1.0).unwrap().is_empty());
    }

    #[test]
    fn kinematic_speed_drop() {
        let k = kinematic_keypoints(
            &traj(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.5, 0.0), (3.0, 0.0)]),
            1.0,
        )
        .unwrap();
        assert_eq!(k.timesteps(), vec![2]);
    }

    #[test]
    fn kinematic_gentle_acceleration_is_empty() {
        // speed grows 0.5 m/s per step at 10 fps: displacement grows 0.05 m per step
        let mut x = 0.0;
        let mut pts = vec![(0.0, 0.0)];
        for i in 0..30 {
            x += 0.1 + 0.05 * i as f64;
            pts.push((x, 0.0));
        }
        assert!(kinematic_keypoints(&traj(&pts), 1.0).unwrap().is_empty());
    }

    #[test]
    fn kinematic_too_short() {
        assert!(kinematic_keypoints(&traj(&[(0.0, 0.0), (1.0, 0.0)]), 1.0).is_err());
    }

    #[test]
    fn extract_straight_is_endpoints() {
        let pts: Vec<(f64, f64)> = (0..50).map(|i| (0.5 * i as f64, 0.25 * i as f64)).collect();
        let k = extract_keypoints(&traj(&pts), &PreprocessConfig::default()).unwrap();
        assert_eq!(k.timesteps(), vec![0, 49]);
    }

    #[test]
    fn union_flags_shared_timesteps() {
        let p = |t: u32| (t, Vec2::new(t as f64, 0.0));
        let g = KeypointSet::from_points([p(0), p(25), p(49)], KeypointSource::Geometric);
        let v = KeypointSet::from_points([p(25), p(30)], KeypointSource::Kinematic);
        let u = union(&g, &v);
        assert_eq!(u.timesteps(), vec![0, 25, 30, 49]);
        assert_eq!(u.get(25).unwrap().source, KeypointSource::Both);
        assert_eq!(u.get(30).unwrap().source, KeypointSource::Kinematic);
        assert_eq!(u.get(0).unwrap().source, KeypointSource::Geometric);
    }

    #[test]
    fn scene_text() {
        let pts: Vec<Vec2> = (0..50).map(|i| Vec2::new(0.5 * i as f64, 0.0)).collect();
        let ego = AgentSpec::with_default_footprint(
            AgentType::Vehicle,
            Vec2::new(5.0, 0.0),
            Trajectory::from_positions(0, &pts, 10.0),
        );
        let s = Scenario::new("one", 10.0, 50, 10, vec![ego], vec![]);
        let text = serialize_scene(&s).unwrap();
        assert_eq!(
            text,
            "Scene with 1 agents, horizon 50 steps at 10 fps.\n\
             Agent 0 (ego): vehicle at (0.00, 0.00), velocity (5.00, 0.00) m/s."
        );
        assert_eq!(text, serialize_scene(&s).unwrap());
    }

    #[test]
    fn scene_text_non_ego_line() {
        let mk = |x: f64, y: f64| {
            let pts: Vec<Vec2> = (0..50).map(|i| Vec2::new(x + 0.5 * i as f64, y)).collect();
            AgentSpec::with_default_footprint(
                AgentType::Cyclist,
                Vec2::new(5.0, 0.0),
                Trajectory::from_positions(0, &pts, 10.0),
            )
        };
        let s = Scenario::new(
            "two",
            10.0,
            50,
            10,
            vec![mk(0.0, 0.0), mk(3.0, 4.0)],
            vec![],
        );
        let text = serialize_scene(&s).unwrap();
        let line = text.lines().nth(2).unwrap();
        assert_eq!(
            line,
            "Agent 1: cyclist at (3.00, 4.00), velocity (5.00, 0.00) m/s, distance 5.00 m, bearing 0.93 rad."
        );
    }
}
