//! Tabular keypoint policy.
//!
//! Each scenario maps to a bucket (hash of quantized ego-history features)
//! holding independent categorical tables. An output is the token sequence
//!
//! ```text
//! word* END? num (t x y){num}
//! ```
//!
//! where word tokens index [`REASONING_VOCAB`], `num` is the keypoint
//! count, and each slot draws a timestep and x/y grid cells in the ego's
//! last observed frame. Every table is indexed by position (reasoning
//! position or keypoint slot) only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Policy, Rollout, TdapoError};
use crate::checkpoint::TensorContainer;
use crate::geom::{Pose, Vec2};
use crate::grammar::TaggedOutput;
use crate::refiner::anchor_pose;
use crate::scenario::Scenario;

pub const REASONING_VOCAB: &[&str] = &[
    "road",
    "straight",
    "curves",
    "left",
    "right",
    "lane",
    "lanes",
    "ahead",
    "behind",
    "nearest",
    "agent",
    "vehicle",
    "cyclist",
    "pedestrian",
    "close",
    "far",
    "clear",
    "risk",
    "low",
    "high",
    "keep",
    "speed",
    "turn",
    "change",
    "merge",
    "brake",
    "stop",
    "accelerate",
    "follow",
    "path",
    "into",
    "to",
    "and",
    "is",
    "the",
    "at",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub grid_pitch: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub max_keypoints: usize,
    pub max_reasoning: usize,
    pub n_buckets: u64,
    pub horizon: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            grid_pitch: 0.5,
            x_min: -30.0,
            x_max: 90.0,
            y_min: -45.0,
            y_max: 45.0,
            max_keypoints: 16,
            max_reasoning: 32,
            n_buckets: 4096,
            horizon: 50,
        }
    }
}

impl ToyConfig {
    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.grid_pitch).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.grid_pitch).round() as usize
    }

    pub fn end_token(&self) -> u32 {
        REASONING_VOCAB.len() as u32
    }

    pub fn validate(&self) -> Result<(), TdapoError> {
        let ok = self.grid_pitch > 0.0
            && self.x_max > self.x_min
            && self.y_max > self.y_min
            && self.nx() > 0
            && self.ny() > 0
            && self.max_keypoints >= 2
            && self.max_reasoning >= 1
            && self.n_buckets >= 1
            && self.horizon >= 2;
        if ok {
            Ok(())
        } else {
            Err(TdapoError::Config(format!(
                "invalid toy policy config {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyContext {
    pub bucket: u64,
    pub anchor: Pose,
}

#[derive(Debug, Clone, PartialEq)]
struct Tables {
    reason: Array2<f64>,
    num: Array2<f64>,
    t: Array2<f64>,
    x: Array2<f64>,
    y: Array2<f64>,
}

impl Tables {
    fn zeros(c: &ToyConfig) -> Self {
        Self {
            reason: Array2::zeros((c.max_reasoning, REASONING_VOCAB.len() + 1)),
            num: Array2::zeros((1, c.max_keypoints + 1)),
            t: Array2::zeros((c.max_keypoints, c.horizon)),
            x: Array2::zeros((c.max_keypoints, c.nx())),
            y: Array2::zeros((c.max_keypoints, c.ny())),
        }
    }

    fn row(&self, h: Head) -> ArrayView1<'_, f64> {
        match h {
            Head::Reason(i) => self.reason.row(i),
            Head::Num => self.num.row(0),
            Head::T(j) => self.t.row(j),
            Head::X(j) => self.x.row(j),
            Head::Y(j) => self.y.row(j),
        }
    }

    fn row_mut(&mut self, h: Head) -> ArrayViewMut1<'_, f64> {
        match h {
            Head::Reason(i) => self.reason.row_mut(i),
            Head::Num => self.num.row_mut(0),
            Head::T(j) => self.t.row_mut(j),
            Head::X(j) => self.x.row_mut(j),
            Head::Y(j) => self.y.row_mut(j),
        }
    }

    fn named(&self) -> [(&'static str, &Array2<f64>); 5] {
        [
            ("reason", &self.reason),
            ("num", &self.num),
            ("t", &self.t),
            ("x", &self.x),
            ("y", &self.y),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Reason(usize),
    Num,
    T(usize),
    X(usize),
    Y(usize),
}

/// Walks the output structure; `next` yields the token for each head.
fn walk(cfg: &ToyConfig, mut next: impl FnMut(Head) -> Option<u32>) {
    let end = cfg.end_token();
    for i in 0..cfg.max_reasoning {
        match next(Head::Reason(i)) {
            Some(tok) if tok == end => break,
            Some(_) => {}
            None => return,
        }
    }
    let Some(n) = next(Head::Num) else { return };
    for j in 0..(n as usize).min(cfg.max_keypoints) {
        for h in [Head::T(j), Head::X(j), Head::Y(j)] {
            if next(h).is_none() {
                return;
            }
        }
    }
}

fn log_softmax_at(row: ArrayView1<'_, f64>, k: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

fn draw(row: ArrayView1<'_, f64>, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        return best;
    }
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let u = rng.random::<f64>() * z;
    let mut acc = 0.0;
    for (i, &v) in w.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

fn fnv1a(values: &[i64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub config: ToyConfig,
    tables: BTreeMap<u64, Tables>,
    grads: BTreeMap<u64, Tables>,
    blank: Tables,
}

impl ToyPolicy {
    pub fn new(config: ToyConfig) -> Result<Self, TdapoError> {
        config.validate()?;
        let blank = Tables::zeros(&config);
        Ok(Self {
            config,
            tables: BTreeMap::new(),
            grads: BTreeMap::new(),
            blank,
        })
    }

    pub fn buckets(&self) -> usize {
        self.tables.len()
    }

    fn tables(&self, bucket: u64) -> &Tables {
        self.tables.get(&bucket).unwrap_or(&self.blank)
    }

    /// Bucket and frame of the ego's last observed pose.
    pub fn context(&self, s: &Scenario) -> ToyContext {
        let ego = s.ego();
        let hist: Vec<Vec2> =
            ego.trajectory.positions()[..s.history_len.min(ego.trajectory.len())].to_vec();
        let anchor = anchor_pose(&hist, ego.descriptor.velocity_heading());
        let local: Vec<Vec2> = hist.iter().map(|&p| anchor.to_local(p)).collect();
        let n = local.len();
        let speed = |i: usize| (local[i + 1] - local[i]).norm() * s.rate;
        let (v_first, v_last) = if n >= 2 {
            (speed(0), speed(n - 2))
        } else {
            (0.0, 0.0)
        };
        let bin = |v: f64, w: f64| (v / w).round() as i64;
        let start = local.first().copied().unwrap_or_default();
        let bucket = fnv1a(&[
            bin(v_first, 0.25),
            bin(v_last, 0.25),
            bin(start.x, 0.5),
            bin(start.y, 0.25),
        ]) % self.config.n_buckets;
        ToyContext { bucket, anchor }
    }

    fn cell_center(&self, head: Head, k: u32) -> f64 {
        let c = &self.config;
        match head {
            Head::X(_) => c.x_min + (k as f64 + 0.5) * c.grid_pitch,
            _ => c.y_min + (k as f64 + 0.5) * c.grid_pitch,
        }
    }

    /// Wire text of a token sequence. Timestep order is not enforced, so the
    /// text may fail the grammar.
    pub fn render(&self, ctx: &ToyContext, tokens: &[u32]) -> String {
        let mut words = Vec::new();
        let mut points: Vec<(u32, Vec2)> = Vec::new();
        let mut pending = (0u32, 0.0f64);
        let mut idx = 0;
        walk(&self.config, |h| {
            let tok = *tokens.get(idx)?;
            idx += 1;
            match h {
                Head::Reason(_) if tok != self.config.end_token() => {
                    words.push(REASONING_VOCAB[tok as usize])
                }
                Head::T(_) => pending.0 = tok,
                Head::X(_) => pending.1 = self.cell_center(h, tok),
                Head::Y(_) => {
                    let local = Vec2::new(pending.1, self.cell_center(h, tok));
                    points.push((pending.0, ctx.anchor.to_world(local)));
                }
                _ => {}
            }
            Some(tok)
        });
        let mut s = format!(
            "<think>{}</think><answer><num>{}</num>",
            words.join(" "),
            points.len()
        );
        for (t, p) in points {
            let _ = write!(s, "<point>{},{:.2},{:.2}</point>", t, p.x, p.y);
        }
        s.push_str("</answer>");
        s
    }

    /// Token sequence of a gold output, or why it falls outside the vocabulary.
    pub fn encode(&self, ctx: &ToyContext, o: &TaggedOutput) -> Result<Vec<u32>, String> {
        let c = &self.config;
        let mut tokens = Vec::new();
        let words: Vec<&str> = o.reasoning.split_whitespace().collect();
        if words.len() > c.max_reasoning {
            return Err(format!(
                "{} reasoning words exceed {}",
                words.len(),
                c.max_reasoning
            ));
        }
        for w in &words {
            let id = REASONING_VOCAB
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| format!("word {w:?} not in vocabulary"))?;
            tokens.push(id as u32);
        }
        if words.len() < c.max_reasoning {
            tokens.push(c.end_token());
        }
        if o.keypoints.len() > c.max_keypoints {
            return Err(format!(
                "{} keypoints exceed {}",
                o.keypoints.len(),
                c.max_keypoints
            ));
        }
        tokens.push(o.keypoints.len() as u32);
        for p in &o.keypoints {
            if p.t as usize >= c.horizon {
                return Err(format!("timestep {} outside horizon", p.t));
            }
            let local = ctx.anchor.to_local(Vec2::new(p.x, p.y));
            let ix = ((local.x - c.x_min) / c.grid_pitch).floor();
            let iy = ((local.y - c.y_min) / c.grid_pitch).floor();
            if !(ix >= 0.0 && (ix as usize) < c.nx() && iy >= 0.0 && (iy as usize) < c.ny()) {
                return Err(format!(
                    "keypoint at t={} lies outside the grid ({:.2}, {:.2})",
                    p.t, local.x, local.y
                ));
            }
            tokens.extend([p.t, ix as u32, iy as u32]);
        }
        Ok(tokens)
    }

    pub fn to_container(&self) -> TensorContainer {
        let c = &self.config;
        let mut out = TensorContainer::new("toy_policy");
        out.config = vec![
            ("grid_pitch".into(), format!("{:e}", c.grid_pitch)),
            ("x_min".into(), format!("{:e}", c.x_min)),
            ("x_max".into(), format!("{:e}", c.x_max)),
            ("y_min".into(), format!("{:e}", c.y_min)),
            ("y_max".into(), format!("{:e}", c.y_max)),
            ("max_keypoints".into(), c.max_keypoints.to_string()),
            ("max_reasoning".into(), c.max_reasoning.to_string()),
            ("n_buckets".into(), c.n_buckets.to_string()),
            ("horizon".into(), c.horizon.to_string()),
        ];
        for (b, t) in &self.tables {
            for (name, arr) in t.named() {
                out.tensors.push((format!("b{b}.{name}"), arr.clone()));
            }
        }
        out
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, TdapoError> {
        if c.kind != "toy_policy" {
            return Err(TdapoError::Checkpoint(format!(
                "expected kind toy_policy, got {}",
                c.kind
            )));
        }
        fn get<T: std::str::FromStr>(c: &TensorContainer, k: &str) -> Result<T, TdapoError> {
            c.config_value(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TdapoError::Checkpoint(format!("missing or malformed config {k}")))
        }
        let config = ToyConfig {
            grid_pitch: get(c, "grid_pitch")?,
            x_min: get(c, "x_min")?,
            x_max: get(c, "x_max")?,
            y_min: get(c, "y_min")?,
            y_max: get(c, "y_max")?,
            max_keypoints: get(c, "max_keypoints")?,
            max_reasoning: get(c, "max_reasoning")?,
            n_buckets: get(c, "n_buckets")?,
            horizon: get(c, "horizon")?,
        };
        let mut policy = ToyPolicy::new(config)?;
        let mut buckets: BTreeMap<u64, Tables> = BTreeMap::new();
        for (name, arr) in &c.tensors {
            let (b, field) = name
                .strip_prefix('b')
                .and_then(|r| r.split_once('.'))
                .ok_or_else(|| TdapoError::Checkpoint(format!("unexpected tensor {name}")))?;
            let b: u64 = b
                .parse()
                .map_err(|_| TdapoError::Checkpoint(format!("bad bucket in {name}")))?;
            let t = buckets.entry(b).or_insert_with(|| policy.blank.clone());
            let slot = match field {
                "reason" => &mut t.reason,
                "num" => &mut t.num,
                "t" => &mut t.t,
                "x" => &mut t.x,
                "y" => &mut t.y,
                _ => return Err(TdapoError::Checkpoint(format!("unexpected tensor {name}"))),
            };
            if slot.dim() != arr.dim() {
                return Err(TdapoError::Checkpoint(format!("shape mismatch for {name}")));
            }
            *slot = arr.clone();
        }
        policy.tables = buckets;
        Ok(policy)
    }
}

impl Policy for ToyPolicy {
    type Context = ToyContext;

    fn sample(&self, ctx: &ToyContext, temperature: f64, rng: &mut ChaCha8Rng) -> Rollout {
        let t = self.tables(ctx.bucket);
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        walk(&self.config, |h| {
            let row = t.row(h);
            let k = draw(row, temperature, rng);
            tokens.push(k as u32);
            logprobs.push(log_softmax_at(row, k));
            Some(k as u32)
        });
        let text = self.render(ctx, &tokens);
        Rollout {
            tokens,
            logprobs,
            text,
        }
    }

    fn log_probs(&self, ctx: &ToyContext, tokens: &[u32]) -> Vec<f64> {
        let t = self.tables(ctx.bucket);
        let mut out = Vec::with_capacity(tokens.len());
        walk(&self.config, |h| {
            let &tok = tokens.get(out.len())?;
            out.push(log_softmax_at(t.row(h), tok as usize));
            Some(tok)
        });
        out
    }

    fn accumulate(&mut self, ctx: &ToyContext, tokens: &[u32], weights: &[f64]) {
        let params = self.tables.get(&ctx.bucket).unwrap_or(&self.blank);
        let grads = self
            .grads
            .entry(ctx.bucket)
            .or_insert_with(|| self.blank.clone());
        let mut i = 0;
        walk(&self.config, |h| {
            let &tok = tokens.get(i)?;
            let w = weights[i];
            i += 1;
            if w != 0.0 {
                let row = params.row(h);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let mut g = grads.row_mut(h);
                for (k, (gk, &v)) in g.iter_mut().zip(row.iter()).enumerate() {
                    let p = (v - m).exp() / z;
                    let onehot = if k == tok as usize { 1.0 } else { 0.0 };
                    *gk += w * (onehot - p);
                }
            }
            Some(tok)
        });
    }

    fn ascend(&mut self, lr: f64) {
        let grads = std::mem::take(&mut self.grads);
        for (b, g) in grads {
            let t = self.tables.entry(b).or_insert_with(|| self.blank.clone());
            t.reason.scaled_add(lr, &g.reason);
            t.num.scaled_add(lr, &g.num);
            t.t.scaled_add(lr, &g.t);
            t.x.scaled_add(lr, &g.x);
            t.y.scaled_add(lr, &g.y);
        }
    }

    fn clear_grad(&mut self) {
        self.grads.clear();
    }
}
