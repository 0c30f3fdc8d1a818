//! Group-relative policy optimization with decoupled clipping, dynamic
//! sampling and hard-sample emphasis.
//!
//! The machinery is generic over a [`Policy`] (token sampler with tractable
//! per-token log-probabilities) and an [`Environment`] (rewards per rollout).
//! [`toy`] supplies a tabular keypoint policy and [`task`] the trajectory
//! reward chain; [`bandit`] is a minimal sanity environment.

pub mod bandit;
pub mod task;
pub mod toy;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::rewards::RewardBreakdown;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TdapoError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite ratio for output {output} token {token}: new {new_logp}, old {old_logp}")]
    NonFiniteRatio {
        output: usize,
        token: usize,
        new_logp: f64,
        old_logp: f64,
    },
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<TdapoError>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("gold output for {id} not representable: {reason}")]
    NotRepresentable { id: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdapoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub hard_fraction: f64,
    pub max_resample_rounds: usize,
    pub advantage_epsilon: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Optimizer steps between hard-set recomputations.
    pub hard_interval: usize,
    /// Scenario groups gathered per optimizer step.
    pub groups_per_step: usize,
    /// Gradient steps taken on each gathered batch; ratios leave 1 after the first.
    pub updates_per_batch: usize,
    pub temperature: f64,
}

impl Default for TdapoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps_low: 0.2,
            eps_high: 0.28,
            hard_fraction: 0.3,
            max_resample_rounds: 3,
            advantage_epsilon: 1e-8,
            steps: 1000,
            lr: 100.0,
            seed: 0,
            hard_interval: 50,
            groups_per_step: 4,
            updates_per_batch: 1,
            temperature: 1.0,
        }
    }
}

impl TdapoConfig {
    pub fn validate(&self) -> Result<(), TdapoError> {
        let bad = |m: &str| Err(TdapoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high) {
            return bad("need 0 < eps_low <= eps_high");
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return bad("hard_fraction must lie in (0, 1]");
        }
        if self.max_resample_rounds == 0
            || self.hard_interval == 0
            || self.groups_per_step == 0
            || self.updates_per_batch == 0
        {
            return bad("resample rounds, hard interval, groups per step and updates per batch must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.advantage_epsilon > 0.0) {
            return bad("lr and advantage_epsilon must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("training temperature must be positive");
        }
        Ok(())
    }
}

/// One sampled output.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<u32>,
    /// Log-probability of each token under the sampling parameters (temperature 1).
    pub logprobs: Vec<f64>,
    pub text: String,
}

/// Token sampler with per-token log-probabilities.
pub trait Policy {
    type Context;

    /// Samples at `temperature`; 0 decodes greedily.
    fn sample(&self, ctx: &Self::Context, temperature: f64, rng: &mut ChaCha8Rng) -> Rollout;

    /// Per-token log-probabilities of `tokens` under the current parameters.
    fn log_probs(&self, ctx: &Self::Context, tokens: &[u32]) -> Vec<f64>;

    /// Adds `sum_t weights[t] * grad log pi(tokens[t])` to the gradient buffer.
    fn accumulate(&mut self, ctx: &Self::Context, tokens: &[u32], weights: &[f64]);

    /// Moves parameters by `lr` along the buffered gradient, then clears it.
    fn ascend(&mut self, lr: f64);

    fn clear_grad(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub reward: f64,
    pub breakdown: Option<RewardBreakdown>,
    /// mADE + mFDE of the decoded prediction; the hard-sample ranking key.
    pub error: f64,
}

pub trait Environment {
    type Policy: Policy;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, i: usize) -> &str;

    fn context(&self, policy: &Self::Policy, i: usize) -> <Self::Policy as Policy>::Context;

    fn evaluate(&self, i: usize, rollout: &Rollout) -> Outcome;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub index: usize,
    pub id: String,
    pub rollouts: Vec<Rollout>,
    pub outcomes: Vec<Outcome>,
    pub advantages: Vec<f64>,
}

/// `(R_i - mean) / (population std + eps)`.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub const MIN_GROUP_STD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Sampled {
    Accepted(RolloutGroup),
    /// Every round had zero reward variance; carries the last round's rewards.
    Skipped {
        rounds: usize,
        rewards: Vec<Outcome>,
    },
}

/// Samples `group_size` rollouts, resampling while the reward spread is
/// below [`MIN_GROUP_STD`], for at most `max_rounds` rounds.
pub fn dynamic_sample<E: Environment>(
    env: &E,
    policy: &E::Policy,
    index: usize,
    group_size: usize,
    max_rounds: usize,
    temperature: f64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Sampled {
    let ctx = env.context(policy, index);
    let mut last = Vec::new();
    for _ in 0..max_rounds {
        let rollouts: Vec<Rollout> = (0..group_size)
            .map(|_| policy.sample(&ctx, temperature, rng))
            .collect();
        let outcomes: Vec<Outcome> = rollouts.iter().map(|r| env.evaluate(index, r)).collect();
        let rewards: Vec<f64> = outcomes.iter().map(|o| o.reward).collect();
        if population_std(&rewards) >= MIN_GROUP_STD {
            return Sampled::Accepted(RolloutGroup {
                index,
                id: env.id(index).to_string(),
                rollouts,
                outcomes,
                advantages: group_advantages(&rewards, eps),
            });
        }
        last = outcomes;
    }
    Sampled::Skipped {
        rounds: max_rounds,
        rewards: last,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLoss {
    pub loss: f64,
    /// Per output and token: derivative of `-loss` w.r.t. the token log-prob.
    pub ascent_weights: Vec<Vec<f64>>,
    pub clipped_tokens: usize,
    pub total_tokens: usize,
}

/// Token-level decoupled-clip objective of one group:
/// `loss = -sum_{i,t} min(rho A_i, clip(rho, 1-eps_low, 1+eps_high) A_i) / sum_i |o_i|`.
pub fn tdapo_loss<P: Policy>(
    group: &RolloutGroup,
    policy: &P,
    ctx: &P::Context,
    cfg: &TdapoConfig,
) -> Result<GroupLoss, TdapoError> {
    let total_tokens: usize = group.rollouts.iter().map(|r| r.tokens.len()).sum();
    let denom = total_tokens.max(1) as f64;
    let mut objective = 0.0;
    let mut clipped_tokens = 0;
    let mut ascent_weights = Vec::with_capacity(group.rollouts.len());
    for (i, (r, &a)) in group.rollouts.iter().zip(&group.advantages).enumerate() {
        let new = policy.log_probs(ctx, &r.tokens);
        let mut w = Vec::with_capacity(new.len());
        for (t, (&lp_new, &lp_old)) in new.iter().zip(&r.logprobs).enumerate() {
            let rho = (lp_new - lp_old).exp();
            if !rho.is_finite() {
                return Err(TdapoError::NonFiniteRatio {
                    output: i,
                    token: t,
                    new_logp: lp_new,
                    old_logp: lp_old,
                });
            }
            let unclipped = rho * a;
            let clipped = rho.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a;
            // d(rho A)/d(log pi) = rho A when the unclipped branch is the minimum
            if unclipped <= clipped {
                objective += unclipped;
                w.push(unclipped / denom);
            } else {
                objective += clipped;
                clipped_tokens += 1;
                w.push(0.0);
            }
        }
        ascent_weights.push(w);
    }
    Ok(GroupLoss {
        loss: -objective / denom,
        ascent_weights,
        clipped_tokens,
        total_tokens,
    })
}

/// Indices of the `ceil(fraction * N)` items with the highest mean error
/// over `draws` decodings at `temperature` (one greedy decoding when the
/// temperature is 0), ties broken by id.
pub fn select_hard_samples<E: Environment>(
    env: &E,
    policy: &E::Policy,
    fraction: f64,
    temperature: f64,
    draws: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = if temperature == 0.0 { 1 } else { draws.max(1) };
    let errors: Vec<f64> = (0..env.len())
        .map(|i| {
            let ctx = env.context(policy, i);
            let total: f64 = (0..draws)
                .map(|_| {
                    env.evaluate(i, &policy.sample(&ctx, temperature, &mut rng))
                        .error
                })
                .sum();
            total / draws as f64
        })
        .collect();
    let ids: Vec<&str> = (0..env.len()).map(|i| env.id(i)).collect();
    rank_hard(&ids, &errors, fraction)
}

/// Hard-sample ranking from precomputed errors; same ordering rule as
/// [`select_hard_samples`].
pub fn rank_hard(ids: &[&str], errors: &[f64], fraction: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| {
        errors[b]
            .total_cmp(&errors[a])
            .then_with(|| ids[a].cmp(ids[b]))
    });
    idx.truncate(((fraction * ids.len() as f64).ceil() as usize).min(ids.len()));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_acc: f64,
    pub mean_r_cot: f64,
    pub mean_r_fmt: f64,
    pub skipped_groups: usize,
    pub loss: f64,
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub selections: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("step,mean_reward,mean_r_acc,mean_r_cot,mean_r_fmt,skipped_groups,loss\n");
        for l in &self.log {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
                l.step,
                l.mean_reward,
                l.mean_r_acc,
                l.mean_r_cot,
                l.mean_r_fmt,
                l.skipped_groups,
                l.loss
            );
        }
        s
    }
}

fn step_stats(outcomes: &[Outcome]) -> (f64, f64, f64, f64) {
    if outcomes.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let n = outcomes.len() as f64;
    let mut acc = (0.0, 0.0, 0.0, 0.0);
    for o in outcomes {
        acc.0 += o.reward;
        if let Some(b) = o.breakdown {
            acc.1 += b.r_acc;
            acc.2 += b.r_cot;
            acc.3 += b.r_fmt;
        }
    }
    (acc.0 / n, acc.1 / n, acc.2 / n, acc.3 / n)
}

/// Optimization loop: periodic hard-set selection, then per step a batch
/// of dynamically sampled groups and one or more clipped updates.
pub fn tdapo_train<E: Environment>(
    env: &E,
    policy: &mut E::Policy,
    cfg: &TdapoConfig,
) -> Result<TrainReport, TdapoError> {
    cfg.validate()?;
    if env.is_empty() {
        return Err(TdapoError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut hard: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut selections = 0;
    for step in 0..cfg.steps {
        if step % cfg.hard_interval == 0 {
            hard = select_hard_samples(
                env,
                policy,
                cfg.hard_fraction,
                cfg.temperature,
                cfg.group_size,
                cfg.seed.wrapping_add(step as u64),
            );
            hard.shuffle(&mut rng);
            selections += 1;
            cursor = 0;
        }
        let mut groups = Vec::with_capacity(cfg.groups_per_step);
        let mut seen = Vec::new();
        let mut skipped = 0;
        for _ in 0..cfg.groups_per_step {
            let index = hard[cursor % hard.len()];
            cursor += 1;
            match dynamic_sample(
                env,
                policy,
                index,
                cfg.group_size,
                cfg.max_resample_rounds,
                cfg.temperature,
                cfg.advantage_epsilon,
                &mut rng,
            ) {
                Sampled::Accepted(g) => {
                    seen.extend_from_slice(&g.outcomes);
                    groups.push(g);
                }
                Sampled::Skipped { rewards, .. } => {
                    seen.extend(rewards);
                    skipped += 1;
                }
            }
        }
        let mut loss = 0.0;
        let updated = !groups.is_empty();
        if updated {
            let contexts: Vec<_> = groups
                .iter()
                .map(|g| env.context(policy, g.index))
                .collect();
            let scale = 1.0 / groups.len() as f64;
            for pass in 0..cfg.updates_per_batch {
                policy.clear_grad();
                let mut pass_loss = 0.0;
                for (g, ctx) in groups.iter().zip(&contexts) {
                    let gl = tdapo_loss(g, policy, ctx, cfg).map_err(|e| TdapoError::Step {
                        step,
                        source: Box::new(e),
                    })?;
                    pass_loss += gl.loss * scale;
                    for (r, w) in g.rollouts.iter().zip(&gl.ascent_weights) {
                        let w: Vec<f64> = w.iter().map(|x| x * scale).collect();
                        policy.accumulate(ctx, &r.tokens, &w);
                    }
                }
                if pass == 0 {
                    loss = pass_loss;
                }
                policy.ascend(cfg.lr);
            }
        }
        let (mean_reward, mean_r_acc, mean_r_cot, mean_r_fmt) = step_stats(&seen);
        log.push(StepLog {
            step,
            mean_reward,
            mean_r_acc,
            mean_r_cot,
            mean_r_fmt,
            skipped_groups: skipped,
            loss,
            updated,
        });
    }
    Ok(TrainReport { log, selections })
}

fn mean_nll<P: Policy>(policy: &P, data: &[(P::Context, Vec<u32>)]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (ctx, tokens) in data {
        sum -= policy.log_probs(ctx, tokens).iter().sum::<f64>();
        count += tokens.len();
    }
    sum / count.max(1) as f64
}

/// Per-sample gradient ascent on the mean token log-likelihood of gold
/// sequences. Returns the per-token NLL before training and after each epoch.
pub fn sft_warmup<P: Policy>(
    policy: &mut P,
    data: &[(P::Context, Vec<u32>)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, TdapoError> {
    if data.is_empty() {
        return Err(TdapoError::EmptyDataset);
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TdapoError::Config("sft lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = vec![mean_nll(policy, data)];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (ctx, tokens) = &data[i];
            let w = vec![1.0 / tokens.len().max(1) as f64; tokens.len()];
            policy.clear_grad();
            policy.accumulate(ctx, tokens, &w);
            policy.ascend(lr);
        }
        history.push(mean_nll(policy, data));
    }
    Ok(history)
}

/// Mean reward of `samples` rollouts per item.
pub fn evaluate_policy<E: Environment>(
    env: &E,
    policy: &E::Policy,
    samples: usize,
    temperature: f64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..env.len() {
        let ctx = env.context(policy, i);
        for _ in 0..samples {
            total += env
                .evaluate(i, &policy.sample(&ctx, temperature, &mut rng))
                .reward;
        }
    }
    total / (env.len() * samples) as f64
}
