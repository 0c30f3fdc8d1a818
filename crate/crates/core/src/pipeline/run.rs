//! Stage runner. Every stage reads its inputs from and writes its outputs
//! under the configured output directory:
//!
//! ```text
//! config.txt
//! data/{train,test}.json
//! preprocess/{train,test}.json
//! refiner/{refiner.ckpt,loss_history.csv}
//! tdapo/{policy.ckpt,training_log.csv,sft_nll.csv,summary.json}
//! eval/{report.json,eval.csv,baseline.csv}
//! plots/<scenario id>.svg   (evenly spaced through the split)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{Generator, PipelineConfig};
use super::mock::mock_output;
use super::plot::{plot_scenario, Variant};
use super::synthetic::generate_synthetic;
use super::PipelineError;
use crate::checkpoint::TensorContainer;
use crate::geom::Vec2;
use crate::grammar::serialize_output;
use crate::metrics::{evaluate, EvalReport};
use crate::preprocess::{extract_keypoints, serialize_scene};
use crate::refiner::{
    build_sample_from_points, refine_sample, train_refiner, RefinerParams, RefinerSample,
};
use crate::scenario::{load_dataset, save_dataset, Scenario};
use crate::tdapo::task::{gold_output, predict_from_text, sft_dataset, TrajectoryTask};
use crate::tdapo::toy::{ToyConfig, ToyPolicy};
use crate::tdapo::{evaluate_policy, sft_warmup, tdapo_train, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Preprocess,
    TrainRefiner,
    Tdapo,
    Eval,
    Plot,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::GenData,
        Stage::Preprocess,
        Stage::TrainRefiner,
        Stage::Tdapo,
        Stage::Eval,
        Stage::Plot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Preprocess => "preprocess",
            Stage::TrainRefiner => "train-refiner",
            Stage::Tdapo => "tdapo",
            Stage::Eval => "eval",
            Stage::Plot => "plot",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    root: PathBuf,
    stage: &'static str,
}

impl Ctx<'_> {
    fn fail(&self, cause: impl fmt::Display) -> PipelineError {
        PipelineError::Stage {
            stage: self.stage,
            cause: cause.to_string(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&self, rel: &str, contents: &str) -> Result<(), PipelineError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| self.fail(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(&path, contents).map_err(|e| self.fail(format!("{}: {e}", path.display())))
    }

    fn dataset(&self, split: &str) -> Result<Vec<Scenario>, PipelineError> {
        let path = self.path(&format!("data/{split}.json"));
        load_dataset(&path).map_err(|e| self.fail(e))
    }

    fn refiner(&self) -> Result<RefinerParams, PipelineError> {
        let c =
            TensorContainer::load(&self.path("refiner/refiner.ckpt")).map_err(|e| self.fail(e))?;
        RefinerParams::from_container(&c).map_err(|e| self.fail(e))
    }

    fn policy(&self) -> Result<ToyPolicy, PipelineError> {
        let c = TensorContainer::load(&self.path("tdapo/policy.ckpt")).map_err(|e| self.fail(e))?;
        ToyPolicy::from_container(&c).map_err(|e| self.fail(e))
    }

    /// Mock keypoints for every agent of every scenario, one stream per split.
    fn mock_keypoints(
        &self,
        data: &[Scenario],
        stream: u64,
    ) -> Result<Vec<Vec<Vec<(u32, Vec2)>>>, PipelineError> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(1000).wrapping_add(stream));
        data.iter()
            .map(|s| {
                (0..s.agents.len())
                    .map(|i| {
                        let o = mock_output(
                            s,
                            i,
                            self.cfg.mock_sigma,
                            self.cfg.mock_dropout,
                            &self.cfg.preprocess,
                            &mut rng,
                        )
                        .map_err(|e| self.fail(e))?;
                        Ok(o.keypoints
                            .iter()
                            .map(|p| (p.t, Vec2::new(p.x, p.y)))
                            .collect())
                    })
                    .collect()
            })
            .collect()
    }

    fn samples(
        &self,
        data: &[Scenario],
        kps: &[Vec<Vec<(u32, Vec2)>>],
    ) -> Result<Vec<Vec<RefinerSample>>, PipelineError> {
        data.iter()
            .zip(kps)
            .map(|(s, agents)| {
                agents
                    .iter()
                    .enumerate()
                    .map(|(i, kp)| {
                        build_sample_from_points(s, i, kp.clone())
                            .map_err(|e| self.fail(format!("{}: {e}", s.id)))
                    })
                    .collect()
            })
            .collect()
    }

    fn tdapo_scenarios(&self) -> Result<Vec<Scenario>, PipelineError> {
        let mut train = self.dataset("train")?;
        if self.cfg.tdapo_scenarios > 0 {
            train.truncate(self.cfg.tdapo_scenarios);
        }
        Ok(train)
    }
}

const TRAIN_STREAM: u64 = 11;
const TEST_STREAM: u64 = 12;

fn gen_data(c: &Ctx) -> Result<(), PipelineError> {
    let train = generate_synthetic(&c.cfg.train_spec())?;
    let test = generate_synthetic(&c.cfg.test_spec())?;
    c.write("config.txt", &c.cfg.to_text())?;
    for (name, data) in [("train", &train), ("test", &test)] {
        let path = c.path(&format!("data/{name}.json"));
        std::fs::create_dir_all(path.parent().expect("nested path")).map_err(|e| c.fail(e))?;
        save_dataset(&path, data).map_err(|e| c.fail(e))?;
    }
    Ok(())
}

fn preprocess(c: &Ctx) -> Result<(), PipelineError> {
    for split in ["train", "test"] {
        let data = c.dataset(split)?;
        let mut rows = Vec::with_capacity(data.len());
        for s in &data {
            let scene = serialize_scene(s).map_err(|e| c.fail(format!("{}: {e}", s.id)))?;
            let mut agents = Vec::with_capacity(s.agents.len());
            for a in &s.agents {
                let kp = extract_keypoints(&a.trajectory, &c.cfg.preprocess)
                    .map_err(|e| c.fail(format!("{}: {e}", s.id)))?;
                agents.push(
                    kp.entries
                        .iter()
                        .map(|k| json!([k.t, k.pos.x, k.pos.y]))
                        .collect::<Vec<_>>(),
                );
            }
            let gold =
                gold_output(s, &c.cfg.preprocess).map_err(|e| c.fail(format!("{}: {e}", s.id)))?;
            let gold = serialize_output(&gold).map_err(|e| c.fail(format!("{}: {e}", s.id)))?;
            rows.push(json!({"id": s.id, "scene": scene, "keypoints": agents, "gold": gold}));
        }
        let text = serde_json::to_string_pretty(&rows).map_err(|e| c.fail(e))?;
        c.write(&format!("preprocess/{split}.json"), &(text + "\n"))?;
    }
    Ok(())
}

fn train_refiner_stage(c: &Ctx) -> Result<(), PipelineError> {
    let data = c.dataset("train")?;
    let kps = c.mock_keypoints(&data, TRAIN_STREAM)?;
    let per_scenario = c.samples(&data, &kps)?;
    let n_val = (data.len() as f64 * c.cfg.val_fraction).floor() as usize;
    let cut = data.len() - n_val.min(data.len() - 1);
    let train: Vec<RefinerSample> = per_scenario[..cut].iter().flatten().cloned().collect();
    let val: Vec<RefinerSample> = per_scenario[cut..].iter().flatten().cloned().collect();
    let trained = train_refiner(&train, &val, &c.cfg.refiner, c.cfg.seed).map_err(|e| c.fail(e))?;
    c.write(
        "refiner/refiner.ckpt",
        &trained.params.to_container().to_text(),
    )?;
    c.write("refiner/loss_history.csv", &trained.history_csv())
}

fn tdapo_stage(c: &Ctx) -> Result<(), PipelineError> {
    let scenarios = c.tdapo_scenarios()?;
    let refiner = c.refiner()?;
    let tcfg = c.cfg.tdapo_config();
    let mut policy = ToyPolicy::new(ToyConfig::default()).map_err(|e| c.fail(e))?;
    let (sft, rejected) = sft_dataset(&policy, &scenarios, &c.cfg.preprocess);
    let env = TrajectoryTask {
        scenarios,
        refiner: Some(refiner),
        reward: c.cfg.reward,
    };
    let eval =
        |p: &ToyPolicy| evaluate_policy(&env, p, tcfg.group_size, tcfg.temperature, c.cfg.seed);
    let reward_initial = eval(&policy);
    let nll = sft_warmup(
        &mut policy,
        &sft,
        c.cfg.sft_epochs,
        c.cfg.sft_lr,
        c.cfg.seed,
    )
    .map_err(|e| c.fail(e))?;
    let reward_sft = eval(&policy);
    let report = tdapo_train(&env, &mut policy, &tcfg).map_err(|e| c.fail(e))?;
    let reward_final = eval(&policy);

    let mut nll_csv = String::from("epoch,nll\n");
    for (e, v) in nll.iter().enumerate() {
        nll_csv.push_str(&format!("{e},{v:.9}\n"));
    }
    let summary = json!({
        "scenarios": env.scenarios.len(),
        "sft_samples": sft.len(),
        "rejected": rejected.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
        "reward_initial": reward_initial,
        "reward_sft": reward_sft,
        "reward_final": reward_final,
        "hard_selections": report.selections,
        "skipped_groups": report.log.iter().map(|l| l.skipped_groups).sum::<usize>(),
    });
    c.write("tdapo/policy.ckpt", &policy.to_container().to_text())?;
    c.write("tdapo/training_log.csv", &report.to_csv())?;
    c.write("tdapo/sft_nll.csv", &nll_csv)?;
    c.write(
        "tdapo/summary.json",
        &(serde_json::to_string_pretty(&summary).map_err(|e| c.fail(e))? + "\n"),
    )
}

/// Filled and refined futures for every agent, plus the keypoints used.
struct Predictions {
    data: Vec<Scenario>,
    keypoints: Vec<Vec<Vec<(u32, Vec2)>>>,
    filled: Vec<Vec<Vec<Vec2>>>,
    refined: Vec<Vec<Vec<Vec2>>>,
}

fn predict(c: &Ctx) -> Result<Predictions, PipelineError> {
    let refiner = c.refiner()?;
    let (data, policy) = match c.cfg.generator {
        Generator::Mock => (c.dataset("test")?, None),
        // the tabular policy only covers scenarios it was trained on
        Generator::Toy => (c.tdapo_scenarios()?, Some(c.policy()?)),
    };
    let mut keypoints = c.mock_keypoints(&data, TEST_STREAM)?;
    let samples = c.samples(&data, &keypoints)?;
    let mut filled = Vec::with_capacity(data.len());
    let mut refined = Vec::with_capacity(data.len());
    for (k, (s, agents)) in data.iter().zip(&samples).enumerate() {
        let mut f: Vec<Vec<Vec2>> = agents.iter().map(|a| a.filled.clone()).collect();
        let mut r = agents
            .iter()
            .map(|a| {
                refine_sample(&refiner, a)
                    .map(|x| x.predicted)
                    .map_err(|e| c.fail(format!("{}: {e}", s.id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(p) = &policy {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let text = p.sample(&p.context(s), 0.0, &mut rng).text;
            f[0] = predict_from_text(s, None, &text).0;
            r[0] = predict_from_text(s, Some(&refiner), &text).0;
            keypoints[k][0] = crate::grammar::extract_points(&text)
                .iter()
                .map(|q| (q.t, Vec2::new(q.x, q.y)))
                .collect();
        }
        filled.push(f);
        refined.push(r);
    }
    Ok(Predictions {
        data,
        keypoints,
        filled,
        refined,
    })
}

fn report(
    c: &Ctx,
    data: &[Scenario],
    preds: &[Vec<Vec<Vec2>>],
) -> Result<EvalReport, PipelineError> {
    let map: BTreeMap<String, Vec<Vec<Vec2>>> = data
        .iter()
        .map(|s| s.id.clone())
        .zip(preds.iter().cloned())
        .collect();
    evaluate(data, &map).map_err(|e| c.fail(e))
}

fn eval_stage(c: &Ctx) -> Result<(), PipelineError> {
    let p = predict(c)?;
    let baseline = report(c, &p.data, &p.filled)?;
    let refined = report(c, &p.data, &p.refined)?;
    let summary = json!({
        "generator": c.cfg.generator.to_string(),
        "baseline": baseline,
        "refined": refined,
    });
    c.write(
        "eval/report.json",
        &(serde_json::to_string_pretty(&summary).map_err(|e| c.fail(e))? + "\n"),
    )?;
    c.write("eval/eval.csv", &refined.to_csv())?;
    c.write("eval/baseline.csv", &baseline.to_csv())
}

fn plot_stage(c: &Ctx) -> Result<(), PipelineError> {
    let p = predict(c)?;
    let dir = c.path("plots");
    std::fs::create_dir_all(&dir).map_err(|e| c.fail(format!("{}: {e}", dir.display())))?;
    let stride = (p.data.len() / c.cfg.plot_count.max(1)).max(1);
    for (k, s) in p
        .data
        .iter()
        .enumerate()
        .step_by(stride)
        .take(c.cfg.plot_count)
    {
        let with_history = |fut: &[Vec<Vec2>]| -> Vec<Vec<Vec2>> {
            s.agents
                .iter()
                .zip(fut)
                .map(|(a, f)| {
                    let mut path = vec![a.trajectory.positions()[s.history_len - 1]];
                    path.extend_from_slice(f);
                    path
                })
                .collect()
        };
        let variants = [
            Variant::new(
                "gt",
                "#2a9d3a",
                false,
                s.agents.iter().map(|a| a.trajectory.positions()).collect(),
            ),
            Variant::new("filled", "#d08c1f", true, with_history(&p.filled[k])),
            Variant::new("refined", "#1f5fd0", false, with_history(&p.refined[k])),
        ];
        plot_scenario(
            s,
            &variants,
            &p.keypoints[k],
            &dir.join(format!("{}.svg", s.id)),
        )
        .map_err(|e| c.fail(e))?;
    }
    Ok(())
}

/// Runs one stage, or every stage in order for [`Stage::All`] (the policy
/// stage only when enabled). Inputs are read from disk, so stages can be
/// rerun independently.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<(), PipelineError> {
    cfg.validate()?;
    if stage == Stage::All {
        for s in Stage::ORDER {
            if s == Stage::Tdapo && !cfg.tdapo_enabled {
                continue;
            }
            run_stage(cfg, s)?;
        }
        return Ok(());
    }
    let c = Ctx {
        cfg,
        root: cfg.out_path(),
        stage: stage.as_str(),
    };
    std::fs::create_dir_all(&c.root).map_err(|e| c.fail(format!("{}: {e}", c.root.display())))?;
    match stage {
        Stage::GenData => gen_data(&c),
        Stage::Preprocess => preprocess(&c),
        Stage::TrainRefiner => train_refiner_stage(&c),
        Stage::Tdapo => tdapo_stage(&c),
        Stage::Eval => eval_stage(&c),
        Stage::Plot => plot_stage(&c),
        Stage::All => unreachable!("handled above"),
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    run_stage(cfg, Stage::All)
}

/// Location of a stage artifact under the output directory.
pub fn artifact(cfg: &PipelineConfig, rel: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(rel)
}
