//! Residual trajectory refinement.
//!
//! Sparse keypoints are densified by linear interpolation and a small
//! cross-attention decoder predicts a per-timestep residual on top of the
//! filled trajectory. Keypoint tokens attend to the observed history and to
//! agent-state tokens; per-timestep query slots built from the filled
//! trajectory then attend to the fused keypoint streams.

mod batch;
mod loss;
mod model;
mod params;
pub mod tape;
mod train;

pub use batch::{
    anchor_pose, build_batch, build_sample, build_sample_from_points, RefinerBatch, RefinerSample,
    StateToken,
};
pub use loss::{refiner_loss, refiner_loss_and_grad, trajectory_loss, LossTerms};
pub use model::{refine, refine_sample, Refined};
pub use params::{ParamStore, RefinerParams};
pub use train::{train_refiner, EpochLosses, TrainedRefiner};

use crate::geom::{wrap_angle, Pose, Vec2};
use crate::preprocess::KeypointSet;
use crate::scenario::{TrajPoint, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RefinerError {
    #[error(
        "keypoints must include timesteps 0 and {last}; got first {first:?}, last {last_present:?}"
    )]
    MissingEndpoint {
        last: u32,
        first: Option<u32>,
        last_present: Option<u32>,
    },
    #[error("keypoint timestep {0} outside horizon")]
    KeypointOutOfRange(u32),
    #[error("trajectory needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("invalid refiner config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub lambda_theta: f64,
    pub lambda_v: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub use_rce: bool,
    pub use_kcl: bool,
    pub use_fpl: bool,
    /// Meters per unit on the network's inputs and outputs.
    pub position_scale: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_mult: 4,
            lambda_theta: 1.0,
            lambda_v: 0.1,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 100,
            use_rce: true,
            use_kcl: true,
            use_fpl: true,
            position_scale: 10.0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<(), RefinerError> {
        let err = |m: &str| Err(RefinerError::Config(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err("d_model must be a positive multiple of n_heads");
        }
        if !self.d_model.is_multiple_of(2) {
            return err("d_model must be even for the timestep encoding");
        }
        if self.n_layers == 0 {
            return err("n_layers must be at least 1");
        }
        if self.ff_mult == 0 || self.batch_size == 0 {
            return err("ff_mult and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.position_scale > 0.0) {
            return err("learning_rate and position_scale must be positive");
        }
        if !(self.lambda_theta >= 0.0 && self.lambda_v >= 0.0 && self.weight_decay >= 0.0) {
            return err("loss weights and weight decay must be non-negative");
        }
        Ok(())
    }
}

/// Piecewise-linear densification of `(t, pos)` keypoints over `0..horizon`.
pub fn linear_fill_points(kp: &[(u32, Vec2)], horizon: usize) -> Result<Vec<Vec2>, RefinerError> {
    let last = horizon.saturating_sub(1) as u32;
    let first_t = kp.first().map(|k| k.0);
    let last_t = kp.last().map(|k| k.0);
    if horizon == 0 || first_t != Some(0) || last_t != Some(last) {
        return Err(RefinerError::MissingEndpoint {
            last,
            first: first_t,
            last_present: last_t,
        });
    }
    let mut out = Vec::with_capacity(horizon);
    for w in kp.windows(2) {
        let ((t0, p0), (t1, p1)) = (w[0], w[1]);
        if t1 <= t0 {
            return Err(RefinerError::Shape(
                "keypoint timesteps must increase".into(),
            ));
        }
        for t in t0..t1 {
            let s = (t - t0) as f64 / (t1 - t0) as f64;
            out.push(if t == t0 { p0 } else { p0.lerp(p1, s) });
        }
    }
    out.push(kp[kp.len() - 1].1);
    Ok(out)
}

/// Linear fill of a keypoint set into a full-horizon trajectory.
pub fn linear_fill(
    kp: &KeypointSet,
    horizon: usize,
    rate: f64,
) -> Result<Trajectory, RefinerError> {
    let pts: Vec<(u32, Vec2)> = kp.entries.iter().map(|k| (k.t, k.pos)).collect();
    let filled = linear_fill_points(&pts, horizon)?;
    Ok(Trajectory::from_positions(0, &filled, rate))
}

/// Expresses `traj` in the frame of `anchor` (origin at its position, +x along its heading).
pub fn to_relative(traj: &Trajectory, anchor: &Pose) -> Trajectory {
    Trajectory {
        points: traj
            .points
            .iter()
            .map(|p| TrajPoint {
                t: p.t,
                pos: anchor.to_local(p.pos),
            })
            .collect(),
        rate: traj.rate,
    }
}

pub fn from_relative(traj: &Trajectory, anchor: &Pose) -> Trajectory {
    Trajectory {
        points: traj
            .points
            .iter()
            .map(|p| TrajPoint {
                t: p.t,
                pos: anchor.to_world(p.pos),
            })
            .collect(),
        rate: traj.rate,
    }
}

/// Displacements below this norm count as stationary.
pub(crate) const STATIONARY_EPS: f64 = 1e-9;

/// Per-step heading and speed with the index each value was taken from.
#[derive(Debug, Clone)]
pub(crate) struct StepKinematics {
    pub theta: Vec<f64>,
    pub speed: Vec<f64>,
    /// Displacement index that defines `theta[i]`, or `None` when it is the default.
    pub theta_src: Vec<Option<usize>>,
    /// Displacement index that defines `speed[i]`.
    pub speed_src: Vec<usize>,
}

pub(crate) fn step_kinematics(pos: &[Vec2], rate: f64, initial_heading: f64) -> StepKinematics {
    let n = pos.len();
    let steps = n - 1;
    let mut theta = Vec::with_capacity(n);
    let mut speed = Vec::with_capacity(n);
    let mut theta_src = Vec::with_capacity(n);
    let mut speed_src = Vec::with_capacity(n);
    let mut prev_theta = initial_heading;
    let mut prev_src = None;
    for i in 0..steps {
        let d = pos[i + 1] - pos[i];
        let norm = d.norm();
        if norm > STATIONARY_EPS {
            prev_theta = d.angle();
            prev_src = Some(i);
        }
        theta.push(prev_theta);
        theta_src.push(prev_src);
        speed.push(norm * rate);
        speed_src.push(i);
    }
    theta.push(theta[steps - 1]);
    theta_src.push(theta_src[steps - 1]);
    speed.push(speed[steps - 1]);
    speed_src.push(speed_src[steps - 1]);
    StepKinematics {
        theta,
        speed,
        theta_src,
        speed_src,
    }
}

/// Per-step `(heading rad, speed m/s)`; the last step repeats the previous
/// value and stationary steps carry the previous heading (0 at the start).
pub fn kinematics_from_trajectory(traj: &Trajectory) -> Result<Vec<(f64, f64)>, RefinerError> {
    if traj.len() < 2 {
        return Err(RefinerError::TooShort(traj.len()));
    }
    let k = step_kinematics(&traj.positions(), traj.rate, 0.0);
    Ok(k.theta.into_iter().zip(k.speed).collect())
}

/// Heading at each step, falling back to `initial` before the first movement.
pub fn headings_with_fallback(pos: &[Vec2], initial: f64) -> Vec<f64> {
    match pos.len() {
        0 => vec![],
        1 => vec![initial],
        _ => step_kinematics(pos, 1.0, initial).theta,
    }
}

/// Wrapped heading difference in `(-π, π]`.
pub fn angle_residual(pred: f64, target: f64) -> f64 {
    wrap_angle(pred - target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::KeypointSource;
    use std::f64::consts::PI;

    fn kp(points: &[(u32, f64, f64)]) -> KeypointSet {
        KeypointSet::from_points(
            points.iter().map(|&(t, x, y)| (t, Vec2::new(x, y))),
            KeypointSource::Geometric,
        )
    }

    #[test]
    fn fill_midpoint() {
        let t = linear_fill(&kp(&[(0, 0.0, 0.0), (10, 10.0, 0.0)]), 11, 10.0).unwrap();
        assert_eq!(t.points[5].pos, Vec2::new(5.0, 0.0));
        assert_eq!(t.len(), 11);
    }

    #[test]
    fn fill_dense_keypoints_reproduced() {
        let pts: Vec<(u32, f64, f64)> = (0..8)
            .map(|i| (i, (i * i) as f64 * 0.3, -(i as f64)))
            .collect();
        let t = linear_fill(&kp(&pts), 8, 10.0).unwrap();
        for (p, &(_, x, y)) in t.points.iter().zip(&pts) {
            assert_eq!(p.pos, Vec2::new(x, y));
        }
    }

    #[test]
    fn fill_quarter_point() {
        let t = linear_fill(&kp(&[(0, 0.0, 0.0), (4, 0.0, 8.0)]), 5, 10.0).unwrap();
        assert_eq!(t.points[1].pos, Vec2::new(0.0, 2.0));
    }

    #[test]
    fn fill_requires_endpoints() {
        assert!(matches!(
            linear_fill(&kp(&[(1, 0.0, 0.0), (4, 0.0, 8.0)]), 5, 10.0),
            Err(RefinerError::MissingEndpoint { .. })
        ));
        assert!(linear_fill(&kp(&[(0, 0.0, 0.0), (3, 0.0, 8.0)]), 5, 10.0).is_err());
    }

    #[test]
    fn relative_frames() {
        let traj = Trajectory::from_positions(0, &[Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)], 10.0);
        let id = to_relative(&traj, &Pose::new(Vec2::ZERO, 0.0));
        assert_eq!(id, traj);
        let r = to_relative(&traj, &Pose::new(Vec2::new(1.0, 0.0), 0.0));
        assert_eq!(r.points[0].pos, Vec2::ZERO);
        let r = to_relative(&traj, &Pose::new(Vec2::ZERO, PI / 2.0));
        assert!((r.points[1].pos - Vec2::new(1.0, 0.0)).norm() < 1e-12);
        let pose = Pose::new(Vec2::new(-4.0, 2.5), 2.2);
        let back = from_relative(&to_relative(&traj, &pose), &pose);
        for (a, b) in back.points.iter().zip(&traj.points) {
            assert!((a.pos - b.pos).norm() < 1e-9);
        }
    }

    #[test]
    fn kinematics_examples() {
        let pts: Vec<Vec2> = (0..6).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let k = kinematics_from_trajectory(&Trajectory::from_positions(0, &pts, 10.0)).unwrap();
        assert!(k
            .iter()
            .all(|&(th, v)| th == 0.0 && (v - 10.0).abs() < 1e-12));

        let still = vec![Vec2::new(3.0, 3.0); 5];
        let k = kinematics_from_trajectory(&Trajectory::from_positions(0, &still, 10.0)).unwrap();
        assert!(k.iter().all(|&(th, v)| th == 0.0 && v == 0.0));

        let up: Vec<Vec2> = (0..4).map(|i| Vec2::new(0.0, i as f64)).collect();
        let k = kinematics_from_trajectory(&Trajectory::from_positions(0, &up, 10.0)).unwrap();
        assert!(k.iter().all(|&(th, _)| (th - PI / 2.0).abs() < 1e-15));

        let stop = [
            Vec2::new(0.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(0.0, 1.0),
        ];
        let k = kinematics_from_trajectory(&Trajectory::from_positions(0, &stop, 10.0)).unwrap();
        assert!((k[1].0 - PI / 2.0).abs() < 1e-15, "carried heading");
        assert_eq!(k[1].1, 0.0);

        assert!(
            kinematics_from_trajectory(&Trajectory::from_positions(0, &[Vec2::ZERO], 10.0))
                .is_err()
        );
    }

    #[test]
    fn angle_wrap_residual() {
        let r = angle_residual(PI - 0.1, -PI + 0.1);
        assert!((r + 0.2).abs() < 1e-12);
        assert!((r * r - 0.04).abs() < 1e-12);
    }
}
