use ndarray::Array2;

use super::batch::{RefinerBatch, RefinerSample, StateToken};
use super::params::{
    AttentionIds, LinearIds, NormIds, RefinerParams, HISTORY_FEATURES, KEYPOINT_FEATURES,
    QUERY_FEATURES, STATE_FEATURES,
};
use super::tape::{Tape, Var};
use super::RefinerError;
use crate::geom::{Pose, Vec2};

/// Network inputs for one sample, expressed in the working frame.
pub(crate) struct Prepared {
    pub frame: Option<Pose>,
    pub filled: Vec<Vec2>,
    pub target: Vec<Vec2>,
    query: Array2<f64>,
    query_pe: Array2<f64>,
    history: Array2<f64>,
    history_pe: Array2<f64>,
    keypoints: Array2<f64>,
    keypoint_pe: Array2<f64>,
    states: Array2<f64>,
}

fn timestep_encoding(ts: impl Iterator<Item = u32>, d: usize) -> Array2<f64> {
    let ts: Vec<u32> = ts.collect();
    Array2::from_shape_fn((ts.len(), d), |(r, c)| {
        let i = (c / 2) as f64;
        let freq = 1.0 / 1000f64.powf(2.0 * i / d as f64);
        let a = ts[r] as f64 * freq;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

fn state_row(
    s: &StateToken,
    to_frame: &dyn Fn(Vec2) -> Vec2,
    vec_to_frame: &dyn Fn(Vec2) -> Vec2,
    scale: f64,
) -> [f64; STATE_FEATURES] {
    let p = to_frame(s.p0) * (1.0 / scale);
    let v = vec_to_frame(s.v0) * (1.0 / scale);
    let mut row = [0.0; STATE_FEATURES];
    row[s.agent_type.index()] = 1.0;
    row[3] = p.x;
    row[4] = p.y;
    row[5] = v.x;
    row[6] = v.y;
    row[7] = s.length / 5.0;
    row[8] = s.width / 5.0;
    row[9] = if s.is_self { 1.0 } else { 0.0 };
    row
}

pub(crate) fn prepare(sample: &RefinerSample, params: &RefinerParams) -> Prepared {
    let cfg = &params.config;
    let d = cfg.d_model;
    let scale = cfg.position_scale;
    let frame = cfg.use_rce.then_some(sample.anchor);
    let to_frame = |p: Vec2| frame.map_or(p, |f| f.to_local(p));
    let vec_to_frame = |v: Vec2| frame.map_or(v, |f| f.vector_to_local(v));

    let filled: Vec<Vec2> = sample.filled.iter().map(|&p| to_frame(p)).collect();
    let target: Vec<Vec2> = sample.target.iter().map(|&p| to_frame(p)).collect();
    let start = sample.future_start();

    let query = Array2::from_shape_fn((filled.len(), QUERY_FEATURES), |(r, c)| {
        let p = filled[r] * (1.0 / scale);
        if c == 0 {
            p.x
        } else {
            p.y
        }
    });
    let query_pe = timestep_encoding(start..start + filled.len() as u32, d);

    let hist: Vec<Vec2> = sample.history.iter().map(|&p| to_frame(p)).collect();
    let history = Array2::from_shape_fn((hist.len(), HISTORY_FEATURES), |(r, c)| {
        let p = hist[r] * (1.0 / scale);
        let v = if r == 0 {
            Vec2::ZERO
        } else {
            (hist[r] - hist[r - 1]) * (sample.rate / scale)
        };
        [p.x, p.y, v.x, v.y][c]
    });
    let history_pe = timestep_encoding(0..hist.len() as u32, d);

    let kp: Vec<Vec2> = sample.keypoints.iter().map(|&(_, p)| to_frame(p)).collect();
    let keypoints = Array2::from_shape_fn((kp.len(), KEYPOINT_FEATURES), |(r, c)| {
        let p = kp[r] * (1.0 / scale);
        if c == 0 {
            p.x
        } else {
            p.y
        }
    });
    let keypoint_pe = timestep_encoding(sample.keypoints.iter().map(|k| k.0), d);

    let mut states = Array2::zeros((sample.states.len(), STATE_FEATURES));
    for (r, s) in sample.states.iter().enumerate() {
        let row = state_row(s, &to_frame, &vec_to_frame, scale);
        for (c, v) in row.into_iter().enumerate() {
            states[[r, c]] = v;
        }
    }

    Prepared {
        frame,
        filled,
        target,
        query,
        query_pe,
        history,
        history_pe,
        keypoints,
        keypoint_pe,
        states,
    }
}

struct Net<'a, 'p> {
    tape: &'a mut Tape<'p>,
    params: &'p RefinerParams,
    vars: Vec<Option<Var>>,
}

impl<'a, 'p> Net<'a, 'p> {
    fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let v = self.tape.param(idx, &self.params.store.tensors[idx]);
        self.vars[idx] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, ids: LinearIds) -> Var {
        let w = self.p(ids.w);
        let b = self.p(ids.b);
        let h = self.tape.matmul(x, w);
        self.tape.add_row(h, b)
    }

    fn norm(&mut self, x: Var, ids: NormIds) -> Var {
        let g = self.p(ids.gamma);
        let b = self.p(ids.beta);
        self.tape.layer_norm(x, g, b)
    }

    fn embed(&mut self, features: &Array2<f64>, pe: Option<&Array2<f64>>, ids: LinearIds) -> Var {
        let x = self.tape.constant(features.clone());
        let h = self.linear(x, ids);
        match pe {
            Some(pe) => {
                let pe = self.tape.constant(pe.clone());
                self.tape.add(h, pe)
            }
            None => h,
        }
    }

    fn attention(&mut self, query: Var, context: Var, ids: &AttentionIds) -> Var {
        let heads = ids.wq.len();
        let dh = self.params.config.d_model / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out: Option<Var> = None;
        for h in 0..heads {
            let (wq, wk, wv, wo) = (
                self.p(ids.wq[h]),
                self.p(ids.wk[h]),
                self.p(ids.wv[h]),
                self.p(ids.wo[h]),
            );
            let q = self.tape.matmul(query, wq);
            let k = self.tape.matmul(context, wk);
            let v = self.tape.matmul(context, wv);
            let scores = self.tape.matmul_t(q, k);
            let scores = self.tape.scale(scores, inv);
            let attn = self.tape.softmax_rows(scores);
            let mixed = self.tape.matmul(attn, v);
            let proj = self.tape.matmul(mixed, wo);
            out = Some(match out {
                Some(acc) => self.tape.add(acc, proj),
                None => proj,
            });
        }
        let bo = self.p(ids.bo);
        self.tape.add_row(out.expect("at least one head"), bo)
    }
}

/// Builds the forward graph; returns the residual node (future_len × 2, scaled units).
pub(crate) fn forward<'p>(tape: &mut Tape<'p>, params: &'p RefinerParams, prep: &Prepared) -> Var {
    let layout = &params.layout;
    let mut net = Net {
        tape,
        params,
        vars: vec![None; params.store.len()],
    };
    let mut q = net.embed(&prep.query, Some(&prep.query_pe), layout.query_in);
    let hist = net.embed(&prep.history, Some(&prep.history_pe), layout.history_in);
    let mut kp = net.embed(&prep.keypoints, Some(&prep.keypoint_pe), layout.keypoint_in);
    let states = net.embed(&prep.states, None, layout.state_in);

    for layer in &layout.layers {
        let kn = net.norm(kp, layer.norm_k);
        let from_history = net.attention(kn, hist, &layer.kp_history);
        let kh = net.tape.add(kp, from_history);
        let from_states = net.attention(kn, states, &layer.kp_state);
        let ks = net.tape.add(kp, from_states);
        let fused = net.tape.concat_rows(kh, ks);

        let qn = net.norm(q, layer.norm_q);
        let ctx = net.attention(qn, fused, &layer.fusion);
        q = net.tape.add(q, ctx);
        let qn = net.norm(q, layer.norm_ff);
        let h = net.linear(qn, layer.ff1);
        let h = net.tape.gelu(h);
        let h = net.linear(h, layer.ff2);
        q = net.tape.add(q, h);

        let merged = net.tape.add(kh, ks);
        kp = net.tape.scale(merged, 0.5);
    }
    let h = net.linear(q, layout.head1);
    let h = net.tape.gelu(h);
    net.linear(h, layout.head2)
}

/// Residual output converted to working-frame meters.
pub(crate) fn residual_in_frame(tape: &Tape<'_>, out: Var, scale: f64) -> Vec<Vec2> {
    tape.value(out)
        .rows()
        .into_iter()
        .map(|r| Vec2::new(r[0] * scale, r[1] * scale))
        .collect()
}

/// Refinement result for one agent, in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    /// `filled + residual` over the future timesteps.
    pub predicted: Vec<Vec2>,
    pub residual: Vec<Vec2>,
}

pub fn refine_sample(
    params: &RefinerParams,
    sample: &RefinerSample,
) -> Result<Refined, RefinerError> {
    sample.validate()?;
    let prep = prepare(sample, params);
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, &prep);
    let residual_frame = residual_in_frame(&tape, out, params.config.position_scale);
    let residual: Vec<Vec2> = residual_frame
        .iter()
        .map(|&r| prep.frame.map_or(r, |f| f.vector_to_world(r)))
        .collect();
    // Added in the world frame so a zero residual reproduces the fill bit-for-bit.
    let predicted = sample
        .filled
        .iter()
        .zip(&residual)
        .map(|(&f, &r)| f + r)
        .collect();
    Ok(Refined {
        predicted,
        residual,
    })
}

/// Refines every sample of the batch independently.
pub fn refine(params: &RefinerParams, batch: &RefinerBatch) -> Result<Vec<Refined>, RefinerError> {
    batch
        .samples
        .iter()
        .map(|s| refine_sample(params, s))
        .collect()
}
