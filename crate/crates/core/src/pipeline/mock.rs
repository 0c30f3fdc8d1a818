//! Stand-in keypoint generator: perturbed ground-truth keypoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grammar::{serialize_output, TaggedOutput, TaggedPoint};
use crate::preprocess::{extract_keypoints, PreprocessConfig};
use crate::scenario::Scenario;

use super::PipelineError;

pub const MOCK_REASONING: &str =
    "Road geometry follows the mapped lanes. Nearby agents keep their lanes. Intention is to continue along the current path.";

/// Ground-truth keypoints of one agent with Gaussian jitter on every point
/// and interior points dropped with probability `dropout_p`.
pub fn mock_output(
    s: &Scenario,
    agent_index: usize,
    noise_sigma: f64,
    dropout_p: f64,
    cfg: &PreprocessConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TaggedOutput, PipelineError> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) || !(0.0..=1.0).contains(&dropout_p) {
        return Err(PipelineError::Config(format!(
            "mock generator needs sigma >= 0 and p in [0, 1], got {noise_sigma}, {dropout_p}"
        )));
    }
    let agent = s.agents.get(agent_index).ok_or_else(|| {
        PipelineError::Config(format!(
            "agent {agent_index} out of range in scenario {}",
            s.id
        ))
    })?;
    let kp = extract_keypoints(&agent.trajectory, cfg).map_err(|e| PipelineError::Stage {
        stage: "mock",
        cause: format!("{}: {e}", s.id),
    })?;
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let last = kp.len().saturating_sub(1);
    let mut points = Vec::with_capacity(kp.len());
    for (i, k) in kp.entries.iter().enumerate() {
        let interior = i != 0 && i != last;
        // draw unconditionally so the jitter stream does not depend on p
        let drop = rng.random::<f64>() < dropout_p;
        let (dx, dy) = (normal.sample(rng), normal.sample(rng));
        if interior && drop {
            continue;
        }
        let (dx, dy) = if noise_sigma > 0.0 {
            (dx, dy)
        } else {
            (0.0, 0.0)
        };
        points.push(TaggedPoint::new(k.t, k.pos.x + dx, k.pos.y + dy));
    }
    Ok(TaggedOutput::new(MOCK_REASONING, points))
}

/// Grammar text for the ego agent.
pub fn mock_generator(
    s: &Scenario,
    noise_sigma: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<String, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = mock_output(
        s,
        0,
        noise_sigma,
        dropout_p,
        &PreprocessConfig::default(),
        &mut rng,
    )?;
    Ok(serialize_output(&out).expect("mock output satisfies the grammar"))
}
