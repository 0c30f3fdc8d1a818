//! Displacement errors and scenario collision rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::geom::Vec2;
use crate::refiner::headings_with_fallback;
use crate::scenario::{Scenario, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: prediction {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("timesteps of prediction and ground truth are not aligned")]
    Misaligned,
    #[error("empty trajectories")]
    Empty,
    #[error("no scenarios to evaluate")]
    EmptyDataset,
    #[error("scenario {id}: {msg}")]
    Scenario { id: String, msg: String },
}

fn check_lengths(pred: &[Vec2], gt: &[Vec2]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn ade_points(pred: &[Vec2], gt: &[Vec2]) -> Result<f64, MetricsError> {
    check_lengths(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| a.distance(*b)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn fde_points(pred: &[Vec2], gt: &[Vec2]) -> Result<f64, MetricsError> {
    check_lengths(pred, gt)?;
    Ok(pred[pred.len() - 1].distance(gt[gt.len() - 1]))
}

fn aligned(pred: &Trajectory, gt: &Trajectory) -> Result<(), MetricsError> {
    check_lengths(&pred.positions(), &gt.positions())?;
    if pred.points.iter().zip(&gt.points).any(|(a, b)| a.t != b.t) {
        return Err(MetricsError::Misaligned);
    }
    Ok(())
}

/// Mean Euclidean error over the evaluated timesteps.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    aligned(pred, gt)?;
    ade_points(&pred.positions(), &gt.positions())
}

/// Euclidean error at the final evaluated timestep.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    aligned(pred, gt)?;
    fde_points(&pred.positions(), &gt.positions())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            half_length: 0.5 * length,
            half_width: 0.5 * width,
        }
    }

    pub fn axes(&self) -> (Vec2, Vec2) {
        let (s, c) = self.heading.sin_cos();
        (Vec2::new(c, s), Vec2::new(-s, c))
    }

    /// Projection radius onto a unit axis.
    fn radius(&self, axis: Vec2) -> f64 {
        let (u, v) = self.axes();
        self.half_length * axis.dot(u).abs() + self.half_width * axis.dot(v).abs()
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let (u, v) = self.axes();
        let (a, b) = (u * self.half_length, v * self.half_width);
        [
            self.center + a + b,
            self.center - a + b,
            self.center - a - b,
            self.center + a - b,
        ]
    }
}

/// Separating-axis test over the four edge normals; touching boxes overlap.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (au, av) = a.axes();
    let (bu, bv) = b.axes();
    let d = b.center - a.center;
    [au, av, bu, bv]
        .into_iter()
        .all(|axis| d.dot(axis).abs() <= a.radius(axis) + b.radius(axis))
}

/// Whether any pair of agents' footprints overlap at any evaluated step.
///
/// `predicted[i]` is agent `i`'s future positions and `footprints[i]` its
/// `(length, width)`. Headings follow the predicted motion; an agent that
/// has not moved yet keeps its descriptor heading.
pub fn scenario_collision(
    s: &Scenario,
    predicted: &[Vec<Vec2>],
    footprints: &[(f64, f64)],
) -> Result<bool, MetricsError> {
    let err = |msg: String| MetricsError::Scenario {
        id: s.id.clone(),
        msg,
    };
    if predicted.len() != s.agents.len() || footprints.len() != s.agents.len() {
        return Err(err(format!(
            "{} predictions / {} footprints for {} agents",
            predicted.len(),
            footprints.len(),
            s.agents.len()
        )));
    }
    let steps = predicted.first().map_or(0, |p| p.len());
    if predicted.iter().any(|p| p.len() != steps) {
        return Err(err("predicted trajectories are misaligned".into()));
    }
    let headings: Vec<Vec<f64>> = predicted
        .iter()
        .zip(&s.agents)
        .map(|(p, a)| headings_with_fallback(p, a.descriptor.velocity_heading()))
        .collect();
    for t in 0..steps {
        let boxes: Vec<OrientedBox> = (0..predicted.len())
            .map(|i| {
                OrientedBox::new(
                    predicted[i][t],
                    headings[i][t],
                    footprints[i].0,
                    footprints[i].1,
                )
            })
            .collect();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes_overlap(&boxes[i], &boxes[j]) {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

pub fn footprints(s: &Scenario) -> Vec<(f64, f64)> {
    s.agents
        .iter()
        .map(|a| (a.descriptor.length, a.descriptor.width))
        .collect()
}

/// Future segment of every agent's ground truth.
pub fn ground_truth_future(s: &Scenario) -> Vec<Vec<Vec2>> {
    s.agents
        .iter()
        .map(|a| a.trajectory.positions()[s.history_len..].to_vec())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioEval {
    pub id: String,
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
    pub made: f64,
    pub mfde: f64,
    pub collision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Sorted by scenario id.
    pub scenarios: Vec<ScenarioEval>,
    pub made: f64,
    pub mfde: f64,
    pub scr: f64,
    /// Scenarios without predictions.
    pub excluded: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per scenario, then an `ALL` aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario_id,n_agents,made,mfde,collision\n");
        for e in &self.scenarios {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                e.id,
                e.ade.len(),
                e.made,
                e.mfde,
                u8::from(e.collision)
            );
        }
        let _ = writeln!(
            s,
            "ALL,{},{:.6},{:.6},{:.6}",
            self.scenarios.len(),
            self.made,
            self.mfde,
            self.scr
        );
        s
    }
}

pub fn evaluate_scenario(
    s: &Scenario,
    predicted: &[Vec<Vec2>],
) -> Result<ScenarioEval, MetricsError> {
    let gt = ground_truth_future(s);
    if predicted.len() != gt.len() {
        return Err(MetricsError::Scenario {
            id: s.id.clone(),
            msg: format!("{} predictions for {} agents", predicted.len(), gt.len()),
        });
    }
    let mut ades = Vec::with_capacity(gt.len());
    let mut fdes = Vec::with_capacity(gt.len());
    for (p, g) in predicted.iter().zip(&gt) {
        ades.push(ade_points(p, g)?);
        fdes.push(fde_points(p, g)?);
    }
    let n = ades.len() as f64;
    Ok(ScenarioEval {
        id: s.id.clone(),
        made: ades.iter().sum::<f64>() / n,
        mfde: fdes.iter().sum::<f64>() / n,
        collision: scenario_collision(s, predicted, &footprints(s))?,
        ade: ades,
        fde: fdes,
    })
}

/// Dataset-level mADE / mFDE (mean over agents, then scenarios) and SCR.
pub fn evaluate(
    dataset: &[Scenario],
    predictions: &BTreeMap<String, Vec<Vec<Vec2>>>,
) -> Result<EvalReport, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut scenarios = Vec::with_capacity(dataset.len());
    let mut excluded = Vec::new();
    for s in dataset {
        match predictions.get(&s.id) {
            Some(p) => scenarios.push(evaluate_scenario(s, p)?),
            None => excluded.push(s.id.clone()),
        }
    }
    if scenarios.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    scenarios.sort_by(|a, b| a.id.cmp(&b.id));
    excluded.sort();
    let n = scenarios.len() as f64;
    Ok(EvalReport {
        made: scenarios.iter().map(|e| e.made).sum::<f64>() / n,
        mfde: scenarios.iter().map(|e| e.mfde).sum::<f64>() / n,
        scr: scenarios.iter().filter(|e| e.collision).count() as f64 / n,
        scenarios,
        excluded,
    })
}
