use ndarray::Array2;

use super::batch::RefinerBatch;
use super::model::{forward, prepare, residual_in_frame};
use super::params::RefinerParams;
use super::tape::Tape;
use super::{angle_residual, step_kinematics, RefinerConfig, RefinerError, STATIONARY_EPS};
use crate::geom::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub motion: f64,
    pub kcl: f64,
    pub fpl: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.total += o.total * s;
        self.motion += o.motion * s;
        self.kcl += o.kcl * s;
        self.fpl += o.fpl * s;
    }
}

/// Motion, kinematic-consistency and final-point losses of one predicted
/// future against its target, with the gradient w.r.t. every predicted point.
///
/// Disabled terms are reported as zero.
pub fn trajectory_loss(
    pred: &[Vec2],
    target: &[Vec2],
    rate: f64,
    cfg: &RefinerConfig,
) -> (LossTerms, Vec<Vec2>) {
    assert_eq!(
        pred.len(),
        target.len(),
        "prediction/target length mismatch"
    );
    let n = pred.len();
    let nf = n as f64;
    let mut grad = vec![Vec2::ZERO; n];
    let mut terms = LossTerms::default();

    for (g, (&p, &q)) in grad.iter_mut().zip(pred.iter().zip(target)) {
        let d = p - q;
        terms.motion += d.norm_sq() / nf;
        *g += d * (2.0 / nf);
    }

    if cfg.use_fpl && n > 0 {
        let d = pred[n - 1] - target[n - 1];
        terms.fpl = d.norm_sq();
        grad[n - 1] += d * 2.0;
    }

    if cfg.use_kcl && n >= 2 {
        let kp = step_kinematics(pred, rate, 0.0);
        let kt = step_kinematics(target, rate, 0.0);
        let mut theta_term = 0.0;
        let mut speed_term = 0.0;
        for i in 0..n {
            let r = angle_residual(kp.theta[i], kt.theta[i]);
            theta_term += r * r / nf;
            if let Some(j) = kp.theta_src[i] {
                let d = pred[j + 1] - pred[j];
                let g = Vec2::new(-d.y, d.x) * (2.0 * cfg.lambda_theta * r / nf / d.norm_sq());
                grad[j + 1] += g;
                grad[j] += -g;
            }
            let dv = kp.speed[i] - kt.speed[i];
            speed_term += dv * dv / nf;
            let j = kp.speed_src[i];
            let d = pred[j + 1] - pred[j];
            let norm = d.norm();
            if norm > STATIONARY_EPS {
                let g = d * (2.0 * cfg.lambda_v * dv / nf * rate / norm);
                grad[j + 1] += g;
                grad[j] += -g;
            }
        }
        terms.kcl = cfg.lambda_theta * theta_term + cfg.lambda_v * speed_term;
    }

    terms.total = terms.motion + terms.kcl + terms.fpl;
    (terms, grad)
}

fn check_compatible(params: &RefinerParams, cfg: &RefinerConfig) -> Result<(), RefinerError> {
    if params.config.use_rce != cfg.use_rce {
        return Err(RefinerError::Config(
            "use_rce differs between params and loss config".into(),
        ));
    }
    Ok(())
}

/// Batch-mean losses. Architecture and frame come from `params.config`;
/// loss weights and ablation flags from `cfg`.
pub fn refiner_loss(
    params: &RefinerParams,
    batch: &RefinerBatch,
    cfg: &RefinerConfig,
) -> Result<LossTerms, RefinerError> {
    check_compatible(params, cfg)?;
    batch.validate()?;
    if batch.samples.is_empty() {
        return Err(RefinerError::EmptyDataset);
    }
    let scale = params.config.position_scale;
    let w = 1.0 / batch.samples.len() as f64;
    let mut acc = LossTerms::default();
    for sample in &batch.samples {
        let prep = prepare(sample, params);
        let mut tape = Tape::new();
        let out = forward(&mut tape, params, &prep);
        let pred: Vec<Vec2> = residual_in_frame(&tape, out, scale)
            .iter()
            .zip(&prep.filled)
            .map(|(&r, &f)| f + r)
            .collect();
        let (terms, _) = trajectory_loss(&pred, &prep.target, sample.rate, cfg);
        acc.add_scaled(&terms, w);
    }
    Ok(acc)
}

/// [`refiner_loss`] plus its gradient w.r.t. every parameter tensor.
pub fn refiner_loss_and_grad(
    params: &RefinerParams,
    batch: &RefinerBatch,
    cfg: &RefinerConfig,
) -> Result<(LossTerms, Vec<Array2<f64>>), RefinerError> {
    check_compatible(params, cfg)?;
    batch.validate()?;
    if batch.samples.is_empty() {
        return Err(RefinerError::EmptyDataset);
    }
    let scale = params.config.position_scale;
    let w = 1.0 / batch.samples.len() as f64;
    let mut grads = params.store.zeros_like();
    let mut acc = LossTerms::default();
    for sample in &batch.samples {
        let prep = prepare(sample, params);
        let mut tape = Tape::new();
        let out = forward(&mut tape, params, &prep);
        let pred: Vec<Vec2> = residual_in_frame(&tape, out, scale)
            .iter()
            .zip(&prep.filled)
            .map(|(&r, &f)| f + r)
            .collect();
        let (terms, gpred) = trajectory_loss(&pred, &prep.target, sample.rate, cfg);
        acc.add_scaled(&terms, w);
        let seed = Array2::from_shape_fn((gpred.len(), 2), |(r, c)| {
            let g = gpred[r];
            (if c == 0 { g.x } else { g.y }) * scale * w
        });
        tape.backward(out, seed, &mut grads);
    }
    Ok((acc, grads))
}
