//! Trajectory reward chain: grammar, linear fill, refiner, metrics, rewards.

use super::toy::{ToyContext, ToyPolicy};
use super::{Environment, Outcome, Rollout, TdapoError};
use crate::geom::{wrap_angle, Vec2};
use crate::grammar::{cot_length, extract_points, parse_output, TaggedOutput, TaggedPoint};
use crate::metrics::{ade_points, fde_points};
use crate::preprocess::{
    extract_keypoints, PreprocessConfig, PreprocessError, ReasoningAnnotation,
};
use crate::refiner::{build_sample_from_points, refine_sample, RefinerParams};
use crate::rewards::{
    accuracy_reward, composite_reward, cot_reward, RewardBreakdown, RewardConfig,
};
use crate::scenario::Scenario;

/// Template annotation of the ego's ground-truth behaviour, worded from
/// the toy policy's vocabulary.
pub fn annotate(s: &Scenario) -> ReasoningAnnotation {
    let pos = s.ego().trajectory.positions();
    let n = pos.len();
    let h0 = (pos[1] - pos[0]).angle();
    let h1 = (pos[n - 1] - pos[n - 2]).angle();
    let turn = wrap_angle(h1 - h0);
    let v0 = (pos[1] - pos[0]).norm() * s.rate;
    let v1 = (pos[n - 1] - pos[n - 2]).norm() * s.rate;
    let lateral = (pos[n - 1] - pos[0]).rotate(-h0).y;

    let road_geometry = if turn > 0.3 {
        "road curves left"
    } else if turn < -0.3 {
        "road curves right"
    } else {
        "road straight"
    };

    let last = s.history_len.saturating_sub(1).min(n - 1);
    let ego_now = pos[last];
    let nearest = s
        .agents
        .iter()
        .skip(1)
        .map(|a| {
            let p = a
                .trajectory
                .points
                .get(last)
                .map_or(a.descriptor.p0, |t| t.pos);
            (p.distance(ego_now), a.descriptor.agent_type, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let collision_risks = match nearest {
        None => "road ahead is clear".to_string(),
        Some((d, kind, p)) => {
            let ahead = (p - ego_now).rotate(-h0).x >= 0.0;
            format!(
                "nearest {} {} {} risk {}",
                kind,
                if ahead { "ahead" } else { "behind" },
                if d < 10.0 { "close" } else { "far" },
                if d < 10.0 { "high" } else { "low" }
            )
        }
    };

    let intention = if v1 < 0.3 * v0 {
        "brake to stop".to_string()
    } else if turn.abs() > 0.3 {
        format!("turn {}", if turn > 0.0 { "left" } else { "right" })
    } else if lateral.abs() > 1.0 {
        if v1 > v0 + 1.0 {
            "accelerate and merge".to_string()
        } else {
            format!(
                "change lane {}",
                if lateral > 0.0 { "left" } else { "right" }
            )
        }
    } else {
        "keep speed".to_string()
    };

    ReasoningAnnotation {
        road_geometry: road_geometry.to_string(),
        collision_risks,
        intention,
    }
}

/// Supervised target for the ego: annotation text plus extracted keypoints.
pub fn gold_output(s: &Scenario, cfg: &PreprocessConfig) -> Result<TaggedOutput, PreprocessError> {
    let kp = extract_keypoints(&s.ego().trajectory, cfg)?;
    let points = kp
        .entries
        .iter()
        .map(|k| TaggedPoint::new(k.t, k.pos.x, k.pos.y))
        .collect();
    Ok(TaggedOutput::new(annotate(s).to_text(), points))
}

/// Gold token sequences for SFT; scenarios whose gold output falls outside
/// the policy vocabulary are returned separately with the reason.
pub fn sft_dataset(
    policy: &ToyPolicy,
    scenarios: &[Scenario],
    cfg: &PreprocessConfig,
) -> (Vec<(ToyContext, Vec<u32>)>, Vec<TdapoError>) {
    let mut data = Vec::with_capacity(scenarios.len());
    let mut rejected = Vec::new();
    for s in scenarios {
        let ctx = policy.context(s);
        let encoded = gold_output(s, cfg)
            .map_err(|e| e.to_string())
            .and_then(|g| policy.encode(&ctx, &g));
        match encoded {
            Ok(tokens) => data.push((ctx, tokens)),
            Err(reason) => rejected.push(TdapoError::NotRepresentable {
                id: s.id.clone(),
                reason,
            }),
        }
    }
    (data, rejected)
}

/// Future of an agent that stays at its last observed position.
pub fn hold_position(s: &Scenario, agent_index: usize) -> Vec<Vec2> {
    let pos = s.agents[agent_index].trajectory.positions();
    vec![pos[s.history_len - 1]; s.future_len()]
}

/// Ego future predicted from generator text, and whether the text met the grammar.
///
/// Text that fails the grammar still contributes whatever well-formed
/// points it contains; when those cannot be filled (missing endpoints,
/// out-of-range timesteps) the prediction holds the last observed position.
pub fn predict_from_text(
    s: &Scenario,
    refiner: Option<&RefinerParams>,
    text: &str,
) -> (Vec<Vec2>, bool) {
    let (points, valid) = match parse_output(text) {
        Ok(o) => (o.keypoints, true),
        Err(_) => (extract_points(text), false),
    };
    let kp: Vec<(u32, Vec2)> = points.iter().map(|p| (p.t, Vec2::new(p.x, p.y))).collect();
    let pred = build_sample_from_points(s, 0, kp)
        .ok()
        .and_then(|sample| match refiner {
            Some(params) => refine_sample(params, &sample).ok().map(|r| r.predicted),
            None => Some(sample.filled),
        });
    (pred.unwrap_or_else(|| hold_position(s, 0)), valid)
}

/// Reward of generator text for the ego of `s`.
pub fn score_text(
    s: &Scenario,
    refiner: Option<&RefinerParams>,
    cfg: &RewardConfig,
    text: &str,
) -> Outcome {
    let (pred, valid) = predict_from_text(s, refiner, text);
    let gt = &s.ego().trajectory.positions()[s.history_len..];
    let ade = ade_points(&pred, gt).expect("aligned future");
    let fde = fde_points(&pred, gt).expect("aligned future");
    let r_acc = accuracy_reward(ade, fde, cfg).expect("non-negative errors");
    let r_cot = cot_reward(cot_length(text), cfg);
    let r_fmt = if valid { 1.0 } else { 0.0 };
    let breakdown: RewardBreakdown =
        composite_reward(r_acc, r_cot, r_fmt, cfg).expect("components in range");
    Outcome {
        reward: breakdown.composite,
        breakdown: Some(breakdown),
        error: ade + fde,
    }
}

/// Ego keypoint generation over a scenario set, scored through the full chain.
#[derive(Debug, Clone)]
pub struct TrajectoryTask {
    pub scenarios: Vec<Scenario>,
    pub refiner: Option<RefinerParams>,
    pub reward: RewardConfig,
}

impl Environment for TrajectoryTask {
    type Policy = ToyPolicy;

    fn len(&self) -> usize {
        self.scenarios.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.scenarios[i].id
    }

    fn context(&self, policy: &ToyPolicy, i: usize) -> ToyContext {
        policy.context(&self.scenarios[i])
    }

    fn evaluate(&self, i: usize, rollout: &Rollout) -> Outcome {
        score_text(
            &self.scenarios[i],
            self.refiner.as_ref(),
            &self.reward,
            &rollout.text,
        )
    }
}
