//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! seed = 7
//! reward.alpha = 0.7
//! refiner.use_rce = false
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::synthetic::{Archetype, SyntheticSpec};
use super::PipelineError;
use crate::preprocess::PreprocessConfig;
use crate::refiner::RefinerConfig;
use crate::rewards::RewardConfig;
use crate::tdapo::TdapoConfig;

/// Keypoint source scored by the eval stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Mock,
    Toy,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Mock => "mock",
            Generator::Toy => "toy",
        })
    }
}

impl FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Generator::Mock),
            "toy" => Ok(Generator::Toy),
            _ => Err(format!("expected mock or toy, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: String,
    pub train_per_archetype: usize,
    pub test_per_archetype: usize,
    pub noise: f64,
    pub min_agents: usize,
    pub max_agents: usize,
    pub history_len: usize,
    pub preprocess: PreprocessConfig,
    pub mock_sigma: f64,
    pub mock_dropout: f64,
    pub reward: RewardConfig,
    pub refiner: RefinerConfig,
    /// Trailing share of training scenarios held out for validation loss.
    pub val_fraction: f64,
    pub tdapo: TdapoConfig,
    pub tdapo_enabled: bool,
    /// Leading training scenarios used by the policy stage; 0 takes all.
    pub tdapo_scenarios: usize,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub generator: Generator,
    pub plot_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            train_per_archetype: 100,
            test_per_archetype: 34,
            noise: 0.01,
            min_agents: 2,
            max_agents: 5,
            history_len: 10,
            preprocess: PreprocessConfig::default(),
            mock_sigma: 1.0,
            mock_dropout: 0.1,
            reward: RewardConfig::default(),
            refiner: RefinerConfig {
                d_model: 32,
                epochs: 30,
                learning_rate: 1e-3,
                batch_size: 32,
                ..RefinerConfig::default()
            },
            val_fraction: 0.1,
            tdapo: TdapoConfig::default(),
            tdapo_enabled: true,
            tdapo_scenarios: 24,
            sft_epochs: 5,
            sft_lr: 50.0,
            generator: Generator::Mock,
            plot_count: 3,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| PipelineError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every recognised key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl PipelineConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
                match key {
                    $($key => self.$($field).+ = parse_value(key, value)?,)*
                    _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.to_string())),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "paths.out" => out_dir,
    "synthetic.train_per_archetype" => train_per_archetype,
    "synthetic.test_per_archetype" => test_per_archetype,
    "synthetic.noise" => noise,
    "synthetic.min_agents" => min_agents,
    "synthetic.max_agents" => max_agents,
    "synthetic.history_len" => history_len,
    "preprocess.epsilon" => preprocess.epsilon,
    "preprocess.delta_v" => preprocess.delta_v,
    "mock.sigma" => mock_sigma,
    "mock.dropout" => mock_dropout,
    "reward.lambda1" => reward.lambda1,
    "reward.lambda2" => reward.lambda2,
    "reward.tau1" => reward.tau1,
    "reward.tau2" => reward.tau2,
    "reward.l_max" => reward.l_max,
    "reward.alpha" => reward.alpha,
    "reward.beta" => reward.beta,
    "reward.gamma" => reward.gamma,
    "refiner.d_model" => refiner.d_model,
    "refiner.n_heads" => refiner.n_heads,
    "refiner.n_layers" => refiner.n_layers,
    "refiner.ff_mult" => refiner.ff_mult,
    "refiner.lambda_theta" => refiner.lambda_theta,
    "refiner.lambda_v" => refiner.lambda_v,
    "refiner.learning_rate" => refiner.learning_rate,
    "refiner.weight_decay" => refiner.weight_decay,
    "refiner.batch_size" => refiner.batch_size,
    "refiner.epochs" => refiner.epochs,
    "refiner.use_rce" => refiner.use_rce,
    "refiner.use_kcl" => refiner.use_kcl,
    "refiner.use_fpl" => refiner.use_fpl,
    "refiner.position_scale" => refiner.position_scale,
    "refiner.val_fraction" => val_fraction,
    "tdapo.enabled" => tdapo_enabled,
    "tdapo.scenarios" => tdapo_scenarios,
    "tdapo.sft_epochs" => sft_epochs,
    "tdapo.sft_lr" => sft_lr,
    "tdapo.group_size" => tdapo.group_size,
    "tdapo.eps_low" => tdapo.eps_low,
    "tdapo.eps_high" => tdapo.eps_high,
    "tdapo.hard_fraction" => tdapo.hard_fraction,
    "tdapo.max_resample_rounds" => tdapo.max_resample_rounds,
    "tdapo.advantage_epsilon" => tdapo.advantage_epsilon,
    "tdapo.steps" => tdapo.steps,
    "tdapo.lr" => tdapo.lr,
    "tdapo.hard_interval" => tdapo.hard_interval,
    "tdapo.groups_per_step" => tdapo.groups_per_step,
    "tdapo.updates_per_batch" => tdapo.updates_per_batch,
    "tdapo.temperature" => tdapo.temperature,
    "eval.generator" => generator,
    "plot.count" => plot_count,
}

impl PipelineConfig {
    /// Defaults overlaid with the assignments in `text`.
    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            PipelineError::Config(format!("override {assignment:?} is not key=value"))
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    fn spec(&self, per_archetype: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            counts: Archetype::ALL
                .into_iter()
                .map(|a| (a, per_archetype))
                .collect(),
            noise: self.noise,
            seed,
            min_agents: self.min_agents,
            max_agents: self.max_agents,
            history_len: self.history_len,
            ..SyntheticSpec::default()
        }
    }

    pub fn train_spec(&self) -> SyntheticSpec {
        self.spec(self.train_per_archetype, self.seed)
    }

    pub fn test_spec(&self) -> SyntheticSpec {
        self.spec(self.test_per_archetype, self.seed.wrapping_add(1))
    }

    pub fn tdapo_config(&self) -> TdapoConfig {
        TdapoConfig {
            seed: self.seed,
            ..self.tdapo.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn fmt::Display| PipelineError::Config(e.to_string());
        if self.out_dir.is_empty() {
            return Err(PipelineError::Config("paths.out must not be empty".into()));
        }
        if self.train_per_archetype == 0 || self.test_per_archetype == 0 {
            return Err(PipelineError::Config(
                "each split needs at least one scenario per archetype".into(),
            ));
        }
        self.train_spec().validate()?;
        self.preprocess.validate().map_err(|e| cfg(&e))?;
        self.reward.validate().map_err(|e| cfg(&e))?;
        self.refiner.validate().map_err(|e| cfg(&e))?;
        self.tdapo.validate().map_err(|e| cfg(&e))?;
        if !(self.mock_sigma.is_finite() && self.mock_sigma >= 0.0)
            || !(0.0..=1.0).contains(&self.mock_dropout)
        {
            return Err(PipelineError::Config(
                "mock.sigma must be >= 0 and mock.dropout in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(PipelineError::Config(
                "refiner.val_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.sft_lr > 0.0 && self.sft_lr.is_finite()) {
            return Err(PipelineError::Config(
                "tdapo.sft_lr must be positive".into(),
            ));
        }
        Ok(())
    }
}
