//! `kgen`: command-line driver for the pipeline stages.
//!
//! Exit codes: 0 success, 1 configuration error, 2 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use kgen_core::pipeline::{artifact, run_stage, PipelineConfig, PipelineError, Stage};

#[derive(Parser, Debug)]
#[command(
    name = "kgen",
    version,
    about = "Keypoint-guided trajectory generation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData(Common),
    /// Extract keypoints, scene text and gold outputs.
    Preprocess(Common),
    /// Train the residual refiner on mock keypoints.
    TrainRefiner(Common),
    /// Warm up and optimize the toy keypoint policy.
    Tdapo(Common),
    /// Score linear fill and refined predictions on the test split.
    Eval(Common),
    /// Render SVG plots for the first test scenarios.
    Plot(Common),
    /// Run every stage in order.
    All(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable. `--reward.alpha=0.5` is shorthand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Command {
    fn split(&self) -> (Stage, &Common) {
        match self {
            Command::GenData(c) => (Stage::GenData, c),
            Command::Preprocess(c) => (Stage::Preprocess, c),
            Command::TrainRefiner(c) => (Stage::TrainRefiner, c),
            Command::Tdapo(c) => (Stage::Tdapo, c),
            Command::Eval(c) => (Stage::Eval, c),
            Command::Plot(c) => (Stage::Plot, c),
            Command::All(c) => (Stage::All, c),
        }
    }
}

/// Rewrites `--a.b=v` and `--a.b v` into `--set a.b=v`.
fn expand_dotted(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(body) = arg
            .strip_prefix("--")
            .filter(|b| b.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            out.push(arg);
            continue;
        };
        out.push("--set".into());
        if body.contains('=') {
            out.push(body.to_string());
        } else if let Some(v) = it.next_if(|v| !v.starts_with("--")) {
            out.push(format!("{body}={v}"));
        } else {
            out.push(body.to_string());
        }
    }
    out
}

fn resolve(c: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Ok(seed) = std::env::var("KGEN_SEED") {
        cfg.set("seed", &seed)
            .map_err(|e| PipelineError::Config(format!("KGEN_SEED: {e}")))?;
    }
    for s in &c.set {
        cfg.apply(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(cfg: &PipelineConfig, stage: Stage) -> anyhow::Result<()> {
    if matches!(stage, Stage::Eval | Stage::All) {
        let path = artifact(cfg, "eval/report.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        for name in ["baseline", "refined"] {
            let r = &v[name];
            let f = |k: &str| r[k].as_f64().unwrap_or(f64::NAN);
            println!(
                "{name:>8}: mADE {:.4} mFDE {:.4} SCR {:.4}",
                f("made"),
                f("mfde"),
                f("scr")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_dotted(std::env::args())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (stage, common) = cli.command.split();
    let cfg = match resolve(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("kgen: {e}");
            return ExitCode::from(1);
        }
    };
    match run_stage(&cfg, stage) {
        Ok(()) => {}
        Err(e @ PipelineError::Config(_)) => {
            eprintln!("kgen: {e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            eprintln!("kgen: {e}");
            return ExitCode::from(2);
        }
    }
    if let Err(e) = summarize(&cfg, stage) {
        eprintln!("kgen: {e:#}");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        assert_eq!(
            expand_dotted(s(&[
                "kgen",
                "eval",
                "--reward.alpha=0.5",
                "--refiner.epochs",
                "3",
                "--config",
                "c.txt"
            ])),
            s(&[
                "kgen",
                "eval",
                "--set",
                "reward.alpha=0.5",
                "--set",
                "refiner.epochs=3",
                "--config",
                "c.txt"
            ])
        );
    }
}
