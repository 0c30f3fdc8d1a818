//! Procedural driving scenarios built from a handful of motion archetypes.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{Pose, Vec2};
use crate::metrics::{boxes_overlap, OrientedBox};
use crate::refiner::headings_with_fallback;
use crate::scenario::{AgentSpec, AgentType, Scenario, Trajectory, MAX_AGENTS};

use super::PipelineError;

const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChange,
    Merge,
    Stop,
}

impl Archetype {
    pub const ALL: [Archetype; 6] = [
        Archetype::Straight,
        Archetype::LeftTurn,
        Archetype::RightTurn,
        Archetype::LaneChange,
        Archetype::Merge,
        Archetype::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Straight => "straight",
            Archetype::LeftTurn => "left_turn",
            Archetype::RightTurn => "right_turn",
            Archetype::LaneChange => "lane_change",
            Archetype::Merge => "merge",
            Archetype::Stop => "stop",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown archetype {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub counts: BTreeMap<Archetype, usize>,
    /// Standard deviation of the Gaussian waypoint noise (m).
    pub noise: f64,
    pub seed: u64,
    /// Inclusive range of agents per scenario, ego included.
    pub min_agents: usize,
    pub max_agents: usize,
    pub horizon: usize,
    pub history_len: usize,
    pub rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            counts: Archetype::ALL.into_iter().map(|a| (a, 20)).collect(),
            noise: 0.01,
            seed: 0,
            min_agents: 2,
            max_agents: 5,
            horizon: 50,
            history_len: 10,
            rate: 10.0,
        }
    }
}

impl SyntheticSpec {
    pub fn only(archetype: Archetype, count: usize) -> Self {
        Self {
            counts: BTreeMap::from([(archetype, count)]),
            ..Default::default()
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(format!("synthetic spec: {m}")));
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and >= 0");
        }
        if self.min_agents == 0 || self.min_agents > self.max_agents || self.max_agents > MAX_AGENTS
        {
            return bad("agent range must satisfy 1 <= min <= max <= 8");
        }
        if self.history_len < 2 || self.history_len + 2 > self.horizon {
            return bad("need history_len >= 2 and at least 2 future steps");
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad("rate must be positive");
        }
        Ok(())
    }
}

fn speed_range(t: AgentType) -> (f64, f64) {
    match t {
        AgentType::Vehicle => (5.0, 15.0),
        AgentType::Cyclist => (3.0, 6.0),
        AgentType::Pedestrian => (1.2, 2.0),
    }
}

fn turn_radius_range(t: AgentType) -> (f64, f64) {
    match t {
        AgentType::Vehicle => (10.0, 25.0),
        AgentType::Cyclist => (5.0, 10.0),
        AgentType::Pedestrian => (2.0, 5.0),
    }
}

fn lateral_shift(t: AgentType) -> f64 {
    match t {
        AgentType::Vehicle => LANE_WIDTH,
        AgentType::Cyclist => 2.0,
        AgentType::Pedestrian => 1.5,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Integrates per-step speeds and headings from the origin heading +x.
fn integrate(speeds: &[f64], headings: &[f64], dt: f64) -> Vec<Vec2> {
    let mut p = Vec2::ZERO;
    let mut out = Vec::with_capacity(speeds.len() + 1);
    out.push(p);
    for (&s, &h) in speeds.iter().zip(headings) {
        p += Vec2::new(h.cos(), h.sin()) * (s * dt);
        out.push(p);
    }
    out
}

/// Noise-free motion in the agent's own frame (start at origin, heading +x).
fn archetype_motion(
    a: Archetype,
    agent_type: AgentType,
    n: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec2> {
    let dt = 1.0 / rate;
    let (lo, hi) = speed_range(agent_type);
    let v = rng.random_range(lo..hi);
    let steps = n - 1;
    let last = n as f64 * dt;
    match a {
        Archetype::Straight => integrate(&vec![v; steps], &vec![0.0; steps], dt),
        Archetype::LeftTurn | Archetype::RightTurn => {
            let sign = if a == Archetype::LeftTurn { 1.0 } else { -1.0 };
            let (rlo, rhi) = turn_radius_range(agent_type);
            let radius = rng.random_range(rlo..rhi);
            let start = rng.random_range(5..(steps / 3).max(6));
            let mut heading = 0.0f64;
            let mut headings = Vec::with_capacity(steps);
            for k in 0..steps {
                if k >= start && heading.abs() < FRAC_PI_2 {
                    let dh = (v * dt / radius).min(FRAC_PI_2 - heading.abs());
                    // midpoint heading keeps the chord on the arc
                    headings.push(heading + sign * 0.5 * dh);
                    heading += sign * dh;
                } else {
                    headings.push(heading);
                }
            }
            integrate(&vec![v; steps], &headings, dt)
        }
        Archetype::LaneChange => {
            let w = lateral_shift(agent_type) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let tc = rng.random_range(0.3 * last..0.6 * last);
            let tau = rng.random_range(0.3..0.5);
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    Vec2::new(v * t, w * (sigmoid((t - tc) / tau) - sigmoid(-tc / tau)))
                })
                .collect()
        }
        Archetype::Merge => {
            let w = lateral_shift(agent_type);
            let accel = rng.random_range(0.5..1.5);
            let tc = rng.random_range(0.3 * last..0.6 * last);
            let tau = rng.random_range(0.6..0.9);
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    let lateral = w * (sigmoid((t - tc) / tau) - sigmoid(-tc / tau));
                    Vec2::new(v * t + 0.5 * accel * t * t, lateral)
                })
                .collect()
        }
        Archetype::Stop => {
            // Firm braking: every braking step loses more than 1 m/s.
            let decel = rng.random_range(12.0..15.0);
            let brake = rng.random_range(10..(steps - 5).max(11));
            let speeds: Vec<f64> = (0..steps)
                .map(|k| {
                    if k < brake {
                        v
                    } else {
                        (v - decel * dt * (k - brake + 1) as f64).max(0.0)
                    }
                })
                .collect();
            integrate(&speeds, &vec![0.0; steps], dt)
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 50;

fn specs_collide(a: &AgentSpec, b: &AgentSpec) -> bool {
    let pa = a.trajectory.positions();
    let pb = b.trajectory.positions();
    let ha = headings_with_fallback(&pa, a.v0.angle());
    let hb = headings_with_fallback(&pb, b.v0.angle());
    (0..pa.len().min(pb.len())).any(|t| {
        boxes_overlap(
            &OrientedBox::new(pa[t], ha[t], a.length, a.width),
            &OrientedBox::new(pb[t], hb[t], b.length, b.width),
        )
    })
}

fn sample_type(rng: &mut ChaCha8Rng) -> AgentType {
    match rng.random_range(0..10) {
        0..=5 => AgentType::Vehicle,
        6 | 7 => AgentType::Cyclist,
        _ => AgentType::Pedestrian,
    }
}

fn sample_archetype(rng: &mut ChaCha8Rng) -> Archetype {
    match rng.random_range(0..10) {
        0..=3 => Archetype::Straight,
        4 => Archetype::LeftTurn,
        5 => Archetype::RightTurn,
        6 => Archetype::LaneChange,
        7 => Archetype::Merge,
        _ => Archetype::Stop,
    }
}

fn build_one(
    id: String,
    ego_archetype: Archetype,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Scenario {
    let n = spec.horizon;
    let world = Pose::new(
        Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
        rng.random_range(-PI..PI),
    );
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n_agents = rng.random_range(spec.min_agents..=spec.max_agents);
    let mut lanes = vec![-2i32, -1, 1, 2, 3];
    lanes.shuffle(rng);

    let mut agents: Vec<AgentSpec> = Vec::with_capacity(n_agents);
    let mut used_lanes = vec![0i32];
    for j in 0..n_agents {
        let mut placed = None;
        for _attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            let (agent_type, archetype, placement) = if j == 0 {
                (
                    AgentType::Vehicle,
                    ego_archetype,
                    Pose::new(Vec2::ZERO, 0.0),
                )
            } else {
                let lane = lanes[(j - 1) % lanes.len()];
                let oncoming = rng.random_bool(0.25);
                let lateral = lane as f64 * LANE_WIDTH;
                let placement = if oncoming {
                    Pose::new(Vec2::new(rng.random_range(20.0..80.0), lateral), PI)
                } else {
                    Pose::new(Vec2::new(rng.random_range(-25.0..25.0), lateral), 0.0)
                };
                (sample_type(rng), sample_archetype(rng), placement)
            };
            let local = archetype_motion(archetype, agent_type, n, spec.rate, rng);
            let clean: Vec<Vec2> = local
                .iter()
                .map(|&p| world.to_world(placement.to_world(p)))
                .collect();
            let v0 = (clean[1] - clean[0]) * spec.rate;
            let positions: Vec<Vec2> = if spec.noise > 0.0 {
                clean
                    .iter()
                    .map(|&p| p + Vec2::new(noise.sample(rng), noise.sample(rng)))
                    .collect()
            } else {
                clean
            };
            let candidate = AgentSpec::with_default_footprint(
                agent_type,
                v0,
                Trajectory::from_positions(0, &positions, spec.rate),
            );
            if !agents.iter().any(|a| specs_collide(a, &candidate)) {
                placed = Some(candidate);
                break;
            }
        }
        // agents that cannot be placed without contact are left out
        if let Some(a) = placed {
            if j > 0 {
                used_lanes.push(lanes[(j - 1) % lanes.len()]);
            }
            agents.push(a);
        }
    }

    used_lanes.sort_unstable();
    let mut map: Vec<Vec<Vec2>> = used_lanes
        .iter()
        .map(|&l| {
            let y = l as f64 * LANE_WIDTH;
            vec![
                world.to_world(Vec2::new(-40.0, y)),
                world.to_world(Vec2::new(140.0, y)),
            ]
        })
        .collect();
    if matches!(ego_archetype, Archetype::LeftTurn | Archetype::RightTurn) {
        let x = 20.0;
        map.push(vec![
            world.to_world(Vec2::new(x, -60.0)),
            world.to_world(Vec2::new(x, 60.0)),
        ]);
    }
    Scenario::new(id, spec.rate, spec.horizon, spec.history_len, agents, map)
}

/// Deterministic scenario set: one seeded stream, archetypes in enum order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Scenario>, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.total());
    for (&archetype, &count) in &spec.counts {
        for k in 0..count {
            out.push(build_one(
                format!("{archetype}_{k:04}"),
                archetype,
                spec,
                &mut rng,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{
        extract_keypoints, kinematic_keypoints, step_speeds, PreprocessConfig,
    };
    use crate::scenario::validate_scenario;

    #[test]
    fn archetype_names_round_trip() {
        for a in Archetype::ALL {
            assert_eq!(a.as_str().parse::<Archetype>().unwrap(), a);
        }
        assert!("roundabout".parse::<Archetype>().is_err());
    }

    #[test]
    fn scenarios_are_valid() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(data.len(), 120);
        for s in &data {
            assert!(
                validate_scenario(s).is_empty(),
                "{}: {:?}",
                s.id,
                validate_scenario(s)
            );
            assert_eq!(s.horizon, 50);
            assert!(s.agents.iter().all(|a| a.trajectory.len() == 50));
        }
    }

    #[test]
    fn noise_free_straight_has_endpoint_only_kinematics() {
        let mut spec = SyntheticSpec::only(Archetype::Straight, 10);
        spec.noise = 0.0;
        spec.max_agents = 1;
        spec.min_agents = 1;
        for s in generate_synthetic(&spec).unwrap() {
            assert!(
                kinematic_keypoints(&s.ego().trajectory, 1.0)
                    .unwrap()
                    .is_empty(),
                "{}",
                s.id
            );
            let k = extract_keypoints(&s.ego().trajectory, &PreprocessConfig::default()).unwrap();
            assert_eq!(k.timesteps(), vec![0, 49], "{}", s.id);
        }
    }

    #[test]
    fn ground_truth_is_collision_free() {
        use crate::metrics::{footprints, ground_truth_future, scenario_collision};
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        for s in &data {
            assert!(
                !scenario_collision(s, &ground_truth_future(s), &footprints(s)).unwrap(),
                "{}",
                s.id
            );
        }
        let placed: usize = data.iter().map(|s| s.agents.len()).sum();
        assert!(placed >= 2 * data.len());
    }

    #[test]
    fn stop_has_speed_drop() {
        let data = generate_synthetic(&SyntheticSpec::only(Archetype::Stop, 10)).unwrap();
        for s in &data {
            let k = kinematic_keypoints(&s.ego().trajectory, 1.0).unwrap();
            assert!(k.len() > 2, "{}", s.id);
            let v = step_speeds(&s.ego().trajectory);
            assert!(v.windows(2).any(|w| (w[1] - w[0]).abs() > 1.0));
        }
    }

    #[test]
    fn turns_rotate_heading() {
        let mut spec = SyntheticSpec::only(Archetype::LeftTurn, 5);
        spec.noise = 0.0;
        for s in generate_synthetic(&spec).unwrap() {
            let p = s.ego().trajectory.positions();
            let h0 = (p[1] - p[0]).angle();
            let h1 = (p[49] - p[48]).angle();
            let turned = crate::geom::wrap_angle(h1 - h0);
            assert!(turned > 0.5, "{}: turned {turned}", s.id);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
        let other = SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        };
        assert_ne!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }
}
