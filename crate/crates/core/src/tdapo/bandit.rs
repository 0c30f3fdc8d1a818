//! Multi-armed bandit with a softmax policy, plus an exact-gradient oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Environment, Outcome, Policy, Rollout};

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Single-token policy over `n` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditPolicy {
    pub logits: Vec<f64>,
    grad: Vec<f64>,
}

impl BanditPolicy {
    pub fn uniform(n: usize) -> Self {
        Self {
            logits: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

impl Policy for BanditPolicy {
    type Context = ();

    fn sample(&self, _: &(), temperature: f64, rng: &mut ChaCha8Rng) -> Rollout {
        let p = self.probs();
        let a = if temperature == 0.0 {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        } else {
            let scaled: Vec<f64> = self.logits.iter().map(|l| l / temperature).collect();
            let q = softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = q.len() - 1;
            for (i, &v) in q.iter().enumerate() {
                acc += v;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        Rollout {
            tokens: vec![a as u32],
            logprobs: vec![p[a].ln()],
            text: a.to_string(),
        }
    }

    fn log_probs(&self, _: &(), tokens: &[u32]) -> Vec<f64> {
        let p = self.probs();
        tokens.iter().map(|&a| p[a as usize].ln()).collect()
    }

    fn accumulate(&mut self, _: &(), tokens: &[u32], weights: &[f64]) {
        let p = self.probs();
        for (&a, &w) in tokens.iter().zip(weights) {
            for (j, g) in self.grad.iter_mut().enumerate() {
                let onehot = if j == a as usize { 1.0 } else { 0.0 };
                *g += w * (onehot - p[j]);
            }
        }
    }

    fn ascend(&mut self, lr: f64) {
        for (l, g) in self.logits.iter_mut().zip(&mut self.grad) {
            *l += lr * *g;
            *g = 0.0;
        }
    }

    fn clear_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Deterministic per-arm rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditTask {
    pub rewards: Vec<f64>,
}

impl Environment for BanditTask {
    type Policy = BanditPolicy;

    fn len(&self) -> usize {
        1
    }

    fn id(&self, _: usize) -> &str {
        "bandit"
    }

    fn context(&self, _: &BanditPolicy, _: usize) {}

    fn evaluate(&self, _: usize, rollout: &Rollout) -> Outcome {
        let r = self.rewards[rollout.tokens[0] as usize];
        let best = self
            .rewards
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        Outcome {
            reward: r,
            breakdown: None,
            error: best - r,
        }
    }
}

/// Exact-expectation policy gradient on softmax logits:
/// `dJ/dz_j = p_j (r_j - sum_k p_k r_k)`. Returns the action probabilities
/// after `steps` ascent steps from uniform logits.
pub fn vanilla_pg_oracle(rewards: &[f64], lr: f64, steps: usize) -> Vec<f64> {
    let n = rewards.len();
    let mut z = vec![0.0; n];
    for _ in 0..steps {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v: &f64| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        let baseline: f64 = p.iter().zip(rewards).map(|(a, b)| a * b).sum();
        for j in 0..n {
            z[j] += lr * p[j] * (rewards[j] - baseline);
        }
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}
