//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr outside the harness capture, so a plain `cargo test` shows them.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use kgen_core::geom::Vec2;
use kgen_core::grammar::{
    format_reward, parse_output, quantize, serialize_output, TaggedOutput, TaggedPoint,
};
use kgen_core::metrics::{
    ade_points, boxes_overlap, evaluate, fde_points, ground_truth_future, OrientedBox,
};
use kgen_core::pipeline::{artifact, run_pipeline, run_stage, PipelineConfig, Stage};
use kgen_core::preprocess::douglas_peucker;
use kgen_core::refiner::{
    build_sample_from_points, refiner_loss, refiner_loss_and_grad, RefinerBatch, RefinerConfig,
    RefinerParams,
};
use kgen_core::rewards::{accuracy_reward, composite_reward, cot_reward, RewardConfig};
use kgen_core::scenario::{AgentSpec, AgentType, Scenario, Trajectory};
use kgen_core::tdapo::bandit::{vanilla_pg_oracle, BanditPolicy, BanditTask};
use kgen_core::tdapo::{tdapo_train, TdapoConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const MIN_TEST_SCENARIOS: usize = 200;
const MIN_MADE_REDUCTION: f64 = 0.30;
const MAX_TRAIN_SECONDS: f64 = 600.0;
const ABLATION_SEEDS: u64 = 5;
const MIN_SEEDS_HOLDING: usize = 4;
const GRAD_REL_TOL: f64 = 1e-4;
const REWARD_TOL: f64 = 1e-12;
const DP_TRAJECTORIES: usize = 1000;
const GRAMMAR_ROUND_TRIPS: usize = 1000;
const GRAMMAR_MUTATIONS: usize = 100;
const MIN_REWARD_GAIN: f64 = 0.2;
const TDAPO_STEPS: usize = 1000;
const BANDIT_STEPS: usize = 500;
const BANDIT_MIN_PROB: f64 = 0.95;
const METRIC_PAIRS: usize = 100;
const METRIC_TOL: f64 = 1e-12;
const BOX_PAIRS: usize = 500;
const BOX_BAND: f64 = 1e-3;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {n} {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn config(out: &Path, overrides: &[&str]) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    for kv in overrides {
        c.apply(kv).unwrap();
    }
    c.out_dir = out.to_string_lossy().into_owned();
    c
}

fn read_json(cfg: &PipelineConfig, rel: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(artifact(cfg, rel)).unwrap()).unwrap()
}

fn f(v: &Value, path: &[&str]) -> f64 {
    path.iter().fold(v, |v, k| &v[*k]).as_f64().unwrap()
}

#[test]
fn criterion_1_refiner_reduces_displacement_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["tdapo.enabled=false", "mock.sigma=1.0"]);
    run_stage(&cfg, Stage::GenData).unwrap();
    run_stage(&cfg, Stage::Preprocess).unwrap();
    let t0 = Instant::now();
    run_stage(&cfg, Stage::TrainRefiner).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    run_stage(&cfg, Stage::Eval).unwrap();
    let r = read_json(&cfg, "eval/report.json");
    let n = r["refined"]["scenarios"].as_array().unwrap().len();
    let (base, refined) = (f(&r, &["baseline", "made"]), f(&r, &["refined", "made"]));
    let reduction = 1.0 - refined / base;
    report(
        1,
        "refiner efficacy",
        n >= MIN_TEST_SCENARIOS && reduction >= MIN_MADE_REDUCTION && secs <= MAX_TRAIN_SECONDS,
        &format!(
            "{n} test scenarios, mADE {base:.4} -> {refined:.4} ({:.1}% reduction, need {:.0}%), mFDE {:.4} -> {:.4}, training {secs:.1} s (limit {MAX_TRAIN_SECONDS} s)",
            100.0 * reduction,
            100.0 * MIN_MADE_REDUCTION,
            f(&r, &["baseline", "mfde"]),
            f(&r, &["refined", "mfde"]),
        ),
    );
}

#[test]
fn criterion_2_ablation_directions() {
    let dir = tempfile::tempdir().unwrap();
    let (mut rce_holds, mut fpl_holds) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let seed_kv = format!("seed={seed}");
        let base = [
            seed_kv.as_str(),
            "synthetic.test_per_archetype=20",
            "refiner.d_model=16",
            "refiner.n_heads=4",
            "refiner.epochs=30",
            "refiner.batch_size=32",
            "refiner.learning_rate=0.001",
            "mock.sigma=1.0",
        ];
        let out = dir.path().join(format!("seed{seed}"));
        let data_cfg = config(&out, &base);
        run_stage(&data_cfg, Stage::GenData).unwrap();
        run_stage(&data_cfg, Stage::Preprocess).unwrap();
        let score = |extra: &str| {
            let mut kv = base.to_vec();
            kv.push(extra);
            let cfg = config(&out, &kv);
            run_stage(&cfg, Stage::TrainRefiner).unwrap();
            run_stage(&cfg, Stage::Eval).unwrap();
            let r = read_json(&cfg, "eval/report.json");
            (f(&r, &["refined", "made"]), f(&r, &["refined", "mfde"]))
        };
        let full = score("refiner.use_rce=true");
        let no_rce = score("refiner.use_rce=false");
        let no_fpl = score("refiner.use_fpl=false");
        rce_holds += usize::from(full.0 < no_rce.0);
        fpl_holds += usize::from(full.1 < no_fpl.1);
        rows.push(format!(
            "seed {seed}: mADE {:.3} vs no-RCE {:.3}, mFDE {:.3} vs no-FPL {:.3}",
            full.0, no_rce.0, full.1, no_fpl.1
        ));
    }
    report(
        2,
        "ablation directions",
        rce_holds >= MIN_SEEDS_HOLDING && fpl_holds >= MIN_SEEDS_HOLDING,
        &format!(
            "RCE lowers mADE on {rce_holds}/{ABLATION_SEEDS}, FPL lowers mFDE on {fpl_holds}/{ABLATION_SEEDS} (need {MIN_SEEDS_HOLDING}); {}",
            rows.join("; ")
        ),
    );
}

fn tiny_scenario() -> Scenario {
    let agents = (0..2)
        .map(|i| {
            let pts: Vec<Vec2> = (0..10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    Vec2::new(8.0 * t + 0.3 * i as f64, 3.5 * i as f64 + 0.6 * t * t)
                })
                .collect();
            AgentSpec::with_default_footprint(
                AgentType::Vehicle,
                (pts[1] - pts[0]) * 10.0,
                Trajectory::from_positions(0, &pts, 10.0),
            )
        })
        .collect();
    Scenario::new("tiny", 10.0, 10, 4, agents, vec![])
}

#[test]
fn criterion_3_gradient_check() {
    let t0 = Instant::now();
    let s = tiny_scenario();
    let samples = (0..2)
        .map(|i| {
            let p = s.agents[i].trajectory.positions();
            build_sample_from_points(
                &s,
                i,
                vec![
                    (0, p[0]),
                    (5, p[5] + Vec2::new(0.4, -0.3)),
                    (9, p[9] + Vec2::new(-0.2, 0.5)),
                ],
            )
            .unwrap()
        })
        .collect();
    let batch = RefinerBatch { samples };
    let cfg = RefinerConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        ff_mult: 2,
        ..RefinerConfig::default()
    };
    let mut params = RefinerParams::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for t in &mut params.store.tensors {
        t.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
    }
    let (_, grads) = refiner_loss_and_grad(&params, &batch, &cfg).unwrap();
    let h = 1e-5;
    let (mut num, mut den, mut count) = (0.0f64, 0.0f64, 0usize);
    for (ti, tensor) in params.store.tensors.iter().enumerate() {
        for idx in 0..tensor.len() {
            let mut plus = params.clone();
            plus.store.tensors[ti].as_slice_mut().unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.store.tensors[ti].as_slice_mut().unwrap()[idx] -= h;
            let fd = (refiner_loss(&plus, &batch, &cfg).unwrap().total
                - refiner_loss(&minus, &batch, &cfg).unwrap().total)
                / (2.0 * h);
            let an = grads[ti].as_slice().unwrap()[idx];
            num += (an - fd).powi(2);
            den += an.powi(2) + fd.powi(2);
            count += 1;
        }
    }
    let rel = num.sqrt() / den.sqrt();
    report(
        3,
        "gradient check",
        rel <= GRAD_REL_TOL,
        &format!(
            "{count} parameters, relative error {rel:.3e} (limit {GRAD_REL_TOL:e}), {:.1} s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_reward_exactness() {
    let c = RewardConfig::default();
    let acc = accuracy_reward(1.0, 2.0, &c).unwrap();
    let expected = 0.5 * (-1.0f64).exp() + 0.5 * (-1.0f64).exp();
    let cot = cot_reward(256, &c);
    let comp = composite_reward(1.0, 1.0, 1.0, &c).unwrap().composite;
    report(
        4,
        "reward exactness",
        (acc - expected).abs() <= REWARD_TOL && cot == 0.5 && (comp - 1.0).abs() <= REWARD_TOL,
        &format!("accuracy(1, 2) = {acc:.15} (expect {expected:.15}), cot(256) = {cot}, composite(1, 1, 1) = {comp:.15}"),
    );
}

fn perpendicular_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p.x - a.x).powi(2) + (p.y - a.y).powi(2)).sqrt();
    }
    let s = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    ((p.x - a.x - s * dx).powi(2) + (p.y - a.y - s * dy).powi(2)).sqrt()
}

#[test]
fn criterion_5_douglas_peucker_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut violations, mut omitted) = (0usize, 0usize);
    for _ in 0..DP_TRAJECTORIES {
        let n = rng.random_range(2..120);
        let eps = rng.random_range(0.01..3.0);
        let mut p = Vec2::ZERO;
        let mut heading: f64 = rng.random_range(-3.1..3.1);
        let points: Vec<Vec2> = (0..n)
            .map(|_| {
                heading += rng.random_range(-0.4..0.4);
                let step = rng.random_range(0.0..2.0);
                p += Vec2::new(heading.cos(), heading.sin()) * step
                    + Vec2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                p
            })
            .collect();
        let kept = douglas_peucker(&Trajectory::from_positions(0, &points, 10.0), eps)
            .unwrap()
            .timesteps();
        if kept.first() != Some(&0) || kept.last().map(|&t| t as usize) != Some(n - 1) {
            violations += 1;
        }
        for w in kept.windows(2) {
            let (a, b) = (points[w[0] as usize], points[w[1] as usize]);
            for q in &points[w[0] as usize + 1..w[1] as usize] {
                omitted += 1;
                violations += usize::from(perpendicular_distance(*q, a, b) > eps);
            }
        }
    }
    report(
        5,
        "DP contract",
        violations == 0 && omitted > 0,
        &format!("{DP_TRAJECTORIES} trajectories, {omitted} omitted points checked, {violations} violations"),
    );
}

fn random_output(rng: &mut ChaCha8Rng) -> TaggedOutput {
    let words: Vec<String> = (0..rng.random_range(0..15))
        .map(|_| {
            (0..rng.random_range(1..9))
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect()
        })
        .collect();
    let mut t = 0u32;
    let points = (0..rng.random_range(0..12))
        .map(|_| {
            t += rng.random_range(1..20);
            TaggedPoint::new(
                t,
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
            )
        })
        .collect();
    TaggedOutput::new(words.join(" "), points)
}

fn mutate(text: &str, k: usize, rng: &mut ChaCha8Rng) -> String {
    let tags: Vec<(usize, usize)> = text
        .match_indices('<')
        .map(|(i, _)| (i, text[i..].find('>').unwrap() + 1))
        .collect();
    match k % 3 {
        0 => {
            let (at, len) = tags[rng.random_range(0..tags.len())];
            format!("{}{}", &text[..at], &text[at + len..])
        }
        1 => {
            // answer block before the think block
            let split = text.find("<answer>").unwrap();
            format!("{}{}", &text[split..], &text[..split])
        }
        _ => {
            // closing tag ahead of its opening tag
            let (open, close) = [
                ("<think>", "</think>"),
                ("<answer>", "</answer>"),
                ("<num>", "</num>"),
            ][rng.random_range(0..3)];
            text.replacen(open, "\u{0}", 1)
                .replacen(close, open, 1)
                .replacen('\u{0}', close, 1)
        }
    }
}

#[test]
fn criterion_6_grammar_round_trip_and_mutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    let mut texts = Vec::new();
    for _ in 0..GRAMMAR_ROUND_TRIPS {
        let o = random_output(&mut rng);
        let text = serialize_output(&o).unwrap();
        let back = parse_output(&text).unwrap();
        let same = back.reasoning == o.reasoning
            && back.keypoints.len() == o.keypoints.len()
            && back.keypoints.iter().zip(&o.keypoints).all(|(p, q)| {
                p.t == q.t
                    && p.x.to_bits() == quantize(q.x).to_bits()
                    && p.y.to_bits() == quantize(q.y).to_bits()
            })
            && serialize_output(&back).unwrap() == text;
        exact += usize::from(same);
        texts.push(text);
    }
    let mut rejected = 0;
    for k in 0..GRAMMAR_MUTATIONS {
        let mutated = mutate(&texts[k], k, &mut rng);
        assert_ne!(mutated, texts[k]);
        rejected += usize::from(format_reward(&mutated) == 0.0);
    }
    report(
        6,
        "grammar round trip",
        exact == GRAMMAR_ROUND_TRIPS && rejected == GRAMMAR_MUTATIONS,
        &format!("{exact}/{GRAMMAR_ROUND_TRIPS} exact round trips, {rejected}/{GRAMMAR_MUTATIONS} mutations scored 0"),
    );
}

#[test]
fn criterion_7_tdapo_efficacy() {
    let dir = tempfile::tempdir().unwrap();
    let mut holds = 0;
    let mut rows = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let seed_kv = format!("seed={seed}");
        let steps_kv = format!("tdapo.steps={TDAPO_STEPS}");
        let cfg = config(
            &dir.path().join(format!("seed{seed}")),
            &[
                &seed_kv,
                &steps_kv,
                "synthetic.train_per_archetype=4",
                "synthetic.test_per_archetype=1",
                "refiner.d_model=16",
                "refiner.n_heads=2",
                "refiner.epochs=10",
                "refiner.batch_size=16",
                "refiner.val_fraction=0",
                "tdapo.scenarios=0",
            ],
        );
        for stage in [
            Stage::GenData,
            Stage::Preprocess,
            Stage::TrainRefiner,
            Stage::Tdapo,
        ] {
            run_stage(&cfg, stage).unwrap();
        }
        let s = read_json(&cfg, "tdapo/summary.json");
        let (sft, fin) = (f(&s, &["reward_sft"]), f(&s, &["reward_final"]));
        holds += usize::from(fin - sft >= MIN_REWARD_GAIN);
        rows.push(format!("seed {seed}: {sft:.3} -> {fin:.3}"));
    }

    let flat = BanditTask {
        rewards: vec![0.3; 4],
    };
    let mut frozen = BanditPolicy::uniform(4);
    frozen.logits = vec![0.5, -0.2, 0.1, 0.0];
    let before = frozen.clone();
    let zcfg = TdapoConfig {
        steps: 50,
        lr: 10.0,
        ..TdapoConfig::default()
    };
    let zrep = tdapo_train(&flat, &mut frozen, &zcfg).unwrap();
    let zero_ok = frozen == before && zrep.log.iter().all(|l| !l.updated && l.loss == 0.0);

    let env = BanditTask {
        rewards: vec![1.0, 0.0],
    };
    let mut bandit = BanditPolicy::uniform(2);
    let bcfg = TdapoConfig {
        steps: BANDIT_STEPS,
        lr: 1.0,
        seed: 3,
        ..TdapoConfig::default()
    };
    tdapo_train(&env, &mut bandit, &bcfg).unwrap();
    let p = bandit.probs()[0];
    let oracle = vanilla_pg_oracle(&env.rewards, 1.0, BANDIT_STEPS)[0];

    report(
        7,
        "T-DAPO efficacy",
        holds >= MIN_SEEDS_HOLDING && zero_ok && p >= BANDIT_MIN_PROB && oracle >= BANDIT_MIN_PROB,
        &format!(
            "reward gain >= {MIN_REWARD_GAIN} on {holds}/{ABLATION_SEEDS} seeds ({}); zero-variance groups frozen: {zero_ok}; bandit p(best) {p:.4}, exact-gradient oracle {oracle:.4} after {BANDIT_STEPS} steps",
            rows.join(", ")
        ),
    );
}

fn inside(b: &OrientedBox, p: Vec2) -> bool {
    let (u, v) = b.axes();
    let d = p - b.center;
    d.dot(u).abs() <= b.half_length && d.dot(v).abs() <= b.half_width
}

/// Walks both perimeters at `spacing` and tests containment in the other box.
fn dense_overlap(a: &OrientedBox, b: &OrientedBox, spacing: f64) -> bool {
    let hits = |x: &OrientedBox, y: &OrientedBox| {
        let c = x.corners();
        (0..4).any(|i| {
            let (p, q) = (c[i], c[(i + 1) % 4]);
            let n = (p.distance(q) / spacing).ceil() as usize;
            (0..=n).any(|k| inside(y, p + (q - p) * (k as f64 / n as f64)))
        })
    };
    hits(a, b) || hits(b, a)
}

fn lane_agent(y: f64, x0: f64) -> AgentSpec {
    let pts: Vec<Vec2> = (0..20).map(|k| Vec2::new(x0 + 0.5 * k as f64, y)).collect();
    AgentSpec::with_default_footprint(
        AgentType::Vehicle,
        Vec2::new(5.0, 0.0),
        Trajectory::from_positions(0, &pts, 10.0),
    )
}

#[test]
fn criterion_8_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..METRIC_PAIRS {
        let n = rng.random_range(1..60);
        let mut pt = || Vec2::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0));
        let p: Vec<Vec2> = (0..n).map(|_| pt()).collect();
        let g: Vec<Vec2> = (0..n).map(|_| pt()).collect();
        let dists: Vec<f64> = p
            .iter()
            .zip(&g)
            .map(|(a, b)| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt())
            .collect();
        let brute_ade = dists.iter().sum::<f64>() / n as f64;
        worst = worst.max((ade_points(&p, &g).unwrap() - brute_ade).abs());
        worst = worst.max((fde_points(&p, &g).unwrap() - dists[n - 1]).abs());
    }

    let (mut agree, mut compared, mut overlapping) = (0, 0, 0);
    while compared < BOX_PAIRS {
        let mut bx = || {
            OrientedBox::new(
                Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
                rng.random_range(-3.2..3.2),
                rng.random_range(0.5..5.0),
                rng.random_range(0.5..2.5),
            )
        };
        let (a, b) = (bx(), bx());
        let shrunk = OrientedBox {
            half_length: a.half_length - BOX_BAND,
            half_width: a.half_width - BOX_BAND,
            ..a
        };
        let grown = OrientedBox {
            half_length: a.half_length + BOX_BAND,
            half_width: a.half_width + BOX_BAND,
            ..a
        };
        if boxes_overlap(&shrunk, &b) != boxes_overlap(&grown, &b) {
            continue;
        }
        compared += 1;
        let sat = boxes_overlap(&a, &b);
        overlapping += usize::from(sat);
        agree += usize::from(sat == dense_overlap(&a, &b, BOX_BAND / 4.0));
    }

    let data: Vec<Scenario> = (0..4)
        .map(|i| {
            let y = if i == 2 { 0.0 } else { 10.0 };
            Scenario::new(
                format!("s{i}"),
                10.0,
                20,
                10,
                vec![lane_agent(0.0, 0.0), lane_agent(y, 2.0)],
                vec![],
            )
        })
        .collect();
    let preds: BTreeMap<_, _> = data
        .iter()
        .map(|s| (s.id.clone(), ground_truth_future(s)))
        .collect();
    let scr = evaluate(&data, &preds).unwrap().scr;

    report(
        8,
        "metric oracles",
        worst <= METRIC_TOL && agree == BOX_PAIRS && scr == 0.25,
        &format!(
            "ade/fde worst deviation {worst:.2e} over {METRIC_PAIRS} pairs; box overlap agrees on {agree}/{BOX_PAIRS} ({overlapping} overlapping); SCR {scr}"
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "synthetic.train_per_archetype=4",
        "synthetic.test_per_archetype=4",
        "refiner.d_model=8",
        "refiner.n_heads=2",
        "refiner.epochs=3",
        "tdapo.steps=20",
        "tdapo.scenarios=12",
        "plot.count=1",
    ];
    let (a, b) = (
        config(&dir.path().join("a"), &small),
        config(&dir.path().join("b"), &small),
    );
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    let same = ["eval/eval.csv", "eval/baseline.csv"].iter().all(|rel| {
        std::fs::read(artifact(&a, rel)).unwrap() == std::fs::read(artifact(&b, rel)).unwrap()
    });
    let rows = std::fs::read_to_string(artifact(&a, "eval/eval.csv"))
        .unwrap()
        .lines()
        .count();
    report(
        9,
        "determinism",
        same,
        &format!("two full runs, eval CSVs ({rows} lines) byte-identical: {same}"),
    );
}
