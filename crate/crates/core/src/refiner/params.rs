use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RefinerConfig, RefinerError};
use crate::checkpoint::TensorContainer;

/// Named dense tensors addressed by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Array2<f64>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors
            .iter()
            .map(|t| Array2::zeros(t.raw_dim()))
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct NormIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttentionIds {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: Vec<usize>,
    pub bo: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerIds {
    pub norm_k: NormIds,
    pub kp_history: AttentionIds,
    pub kp_state: AttentionIds,
    pub norm_q: NormIds,
    pub fusion: AttentionIds,
    pub norm_ff: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub query_in: LinearIds,
    pub history_in: LinearIds,
    pub keypoint_in: LinearIds,
    pub state_in: LinearIds,
    pub layers: Vec<LayerIds>,
    pub head1: LinearIds,
    pub head2: LinearIds,
}

pub(crate) const QUERY_FEATURES: usize = 2;
pub(crate) const HISTORY_FEATURES: usize = 4;
pub(crate) const KEYPOINT_FEATURES: usize = 2;
pub(crate) const STATE_FEATURES: usize = 10;

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn xavier(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let t = Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-a..a));
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.store.add(name, Array2::zeros((rows, cols)))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            w: self.xavier(format!("{name}.w"), fan_in, fan_out),
            b: self.zeros(format!("{name}.b"), 1, fan_out),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self
                .store
                .add(format!("{name}.gamma"), Array2::ones((1, d))),
            beta: self.zeros(format!("{name}.beta"), 1, d),
        }
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize) -> AttentionIds {
        let dh = d / heads;
        let mut a = AttentionIds {
            wq: vec![],
            wk: vec![],
            wv: vec![],
            wo: vec![],
            bo: 0,
        };
        for h in 0..heads {
            a.wq.push(self.xavier(format!("{name}.h{h}.wq"), d, dh));
            a.wk.push(self.xavier(format!("{name}.h{h}.wk"), d, dh));
            a.wv.push(self.xavier(format!("{name}.h{h}.wv"), d, dh));
            a.wo.push(self.xavier(format!("{name}.h{h}.wo"), dh, d));
        }
        a.bo = self.zeros(format!("{name}.bo"), 1, d);
        a
    }
}

fn build(cfg: &RefinerConfig, seed: u64) -> (ParamStore, Layout) {
    let mut store = ParamStore::default();
    let d = cfg.d_model;
    let ff = cfg.ff_mult * d;
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let query_in = init.linear("query_in", QUERY_FEATURES, d);
    let history_in = init.linear("history_in", HISTORY_FEATURES, d);
    let keypoint_in = init.linear("keypoint_in", KEYPOINT_FEATURES, d);
    let state_in = init.linear("state_in", STATE_FEATURES, d);
    let layers = (0..cfg.n_layers)
        .map(|l| LayerIds {
            norm_k: init.norm(&format!("layer{l}.norm_k"), d),
            kp_history: init.attention(&format!("layer{l}.kp_history"), d, cfg.n_heads),
            kp_state: init.attention(&format!("layer{l}.kp_state"), d, cfg.n_heads),
            norm_q: init.norm(&format!("layer{l}.norm_q"), d),
            fusion: init.attention(&format!("layer{l}.fusion"), d, cfg.n_heads),
            norm_ff: init.norm(&format!("layer{l}.norm_ff"), d),
            ff1: init.linear(&format!("layer{l}.ff1"), d, ff),
            ff2: init.linear(&format!("layer{l}.ff2"), ff, d),
        })
        .collect();
    let head1 = init.linear("head1", d, d);
    // Zero output layer: an untrained refiner reproduces the linear fill.
    let head2 = LinearIds {
        w: init.zeros("head2.w".into(), d, 2),
        b: init.zeros("head2.b".into(), 1, 2),
    };
    (
        store,
        Layout {
            query_in,
            history_in,
            keypoint_in,
            state_in,
            layers,
            head1,
            head2,
        },
    )
}

/// All learnable tensors of the refiner plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub config: RefinerConfig,
    pub store: ParamStore,
    pub(crate) layout: Layout,
}

impl RefinerParams {
    pub fn init(cfg: &RefinerConfig, seed: u64) -> Result<Self, RefinerError> {
        cfg.validate()?;
        let (store, layout) = build(cfg, seed);
        Ok(Self {
            config: cfg.clone(),
            store,
            layout,
        })
    }

    /// Output-layer tensors, zero at initialization.
    pub fn residual_head_output(&self) -> (&Array2<f64>, &Array2<f64>) {
        (
            &self.store.tensors[self.layout.head2.w],
            &self.store.tensors[self.layout.head2.b],
        )
    }

    pub fn to_container(&self) -> TensorContainer {
        let c = &self.config;
        let mut out = TensorContainer::new("refiner");
        let kv = [
            ("d_model", c.d_model.to_string()),
            ("n_heads", c.n_heads.to_string()),
            ("n_layers", c.n_layers.to_string()),
            ("ff_mult", c.ff_mult.to_string()),
            ("lambda_theta", format!("{:e}", c.lambda_theta)),
            ("lambda_v", format!("{:e}", c.lambda_v)),
            ("learning_rate", format!("{:e}", c.learning_rate)),
            ("weight_decay", format!("{:e}", c.weight_decay)),
            ("batch_size", c.batch_size.to_string()),
            ("epochs", c.epochs.to_string()),
            ("use_rce", c.use_rce.to_string()),
            ("use_kcl", c.use_kcl.to_string()),
            ("use_fpl", c.use_fpl.to_string()),
            ("position_scale", format!("{:e}", c.position_scale)),
        ];
        out.config = kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        out.tensors = self
            .store
            .names
            .iter()
            .cloned()
            .zip(self.store.tensors.iter().cloned())
            .collect();
        out
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, RefinerError> {
        let bad = |m: String| RefinerError::Checkpoint(m);
        if c.kind != "refiner" {
            return Err(bad(format!("expected kind refiner, found {:?}", c.kind)));
        }
        fn get<T: std::str::FromStr>(c: &TensorContainer, key: &str) -> Result<T, RefinerError> {
            c.config_value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| RefinerError::Checkpoint(format!("missing or bad config key {key}")))
        }
        let cfg = RefinerConfig {
            d_model: get(c, "d_model")?,
            n_heads: get(c, "n_heads")?,
            n_layers: get(c, "n_layers")?,
            ff_mult: get(c, "ff_mult")?,
            lambda_theta: get(c, "lambda_theta")?,
            lambda_v: get(c, "lambda_v")?,
            learning_rate: get(c, "learning_rate")?,
            weight_decay: get(c, "weight_decay")?,
            batch_size: get(c, "batch_size")?,
            epochs: get(c, "epochs")?,
            use_rce: get(c, "use_rce")?,
            use_kcl: get(c, "use_kcl")?,
            use_fpl: get(c, "use_fpl")?,
            position_scale: get(c, "position_scale")?,
        };
        let mut params = RefinerParams::init(&cfg, 0)?;
        for (name, slot) in params
            .store
            .names
            .iter()
            .zip(params.store.tensors.iter_mut())
        {
            let t = c
                .tensor(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.dim() != slot.dim() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dim(),
                    slot.dim()
                )));
            }
            slot.assign(t);
        }
        Ok(params)
    }
}
