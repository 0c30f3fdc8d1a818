use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{RefinerBatch, RefinerSample};
use super::loss::{refiner_loss, refiner_loss_and_grad, LossTerms};
use super::params::RefinerParams;
use super::{RefinerConfig, RefinerError};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train: LossTerms,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedRefiner {
    pub params: RefinerParams,
    pub history: Vec<EpochLosses>,
}

impl TrainedRefiner {
    /// `epoch,train_total,val_total,motion,kcl,fpl`; empty validation cells when no split.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_total,val_total,motion,kcl,fpl\n");
        for e in &self.history {
            let val = e.val_total.map(|v| format!("{v:.9}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.9},{},{:.9},{:.9},{:.9}",
                e.epoch, e.train.total, val, e.train.motion, e.train.kcl, e.train.fpl
            );
        }
        s
    }
}

fn eval(
    params: &RefinerParams,
    samples: &[RefinerSample],
    cfg: &RefinerConfig,
) -> Result<LossTerms, RefinerError> {
    let batch = RefinerBatch {
        samples: samples.to_vec(),
    };
    refiner_loss(params, &batch, cfg)
}

/// Mini-batch AdamW training from a seeded initialization.
///
/// Deterministic for a given seed: initialization and per-epoch shuffles
/// both derive from it and all reductions run in a fixed order.
pub fn train_refiner(
    train: &[RefinerSample],
    val: &[RefinerSample],
    cfg: &RefinerConfig,
    seed: u64,
) -> Result<TrainedRefiner, RefinerError> {
    if train.is_empty() {
        return Err(RefinerError::EmptyDataset);
    }
    let mut params = RefinerParams::init(cfg, seed)?;
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.learning_rate, cfg.weight_decay),
        &params.store.tensors,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let mut history = Vec::with_capacity(cfg.epochs + 1);

    let record = |epoch: usize, params: &RefinerParams| -> Result<EpochLosses, RefinerError> {
        let train_terms = eval(params, train, cfg)?;
        let val_total = if val.is_empty() {
            None
        } else {
            Some(eval(params, val, cfg)?.total)
        };
        if !train_terms.total.is_finite() || val_total.is_some_and(|v| !v.is_finite()) {
            return Err(RefinerError::Diverged { epoch });
        }
        Ok(EpochLosses {
            epoch,
            train: train_terms,
            val_total,
        })
    };

    history.push(record(0, &params)?);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = RefinerBatch {
                samples: chunk.iter().map(|&i| train[i].clone()).collect(),
            };
            let (terms, grads) = refiner_loss_and_grad(&params, &batch, cfg)?;
            if !terms.total.is_finite() {
                return Err(RefinerError::Diverged { epoch });
            }
            opt.step(&mut params.store.tensors, &grads);
        }
        history.push(record(epoch, &params)?);
    }
    Ok(TrainedRefiner { params, history })
}
