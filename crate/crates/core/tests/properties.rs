use kgen_core::geom::{Pose, Vec2};
use kgen_core::grammar::{
    format_reward, parse_output, quantize, serialize_output, TaggedOutput, TaggedPoint,
};
use kgen_core::preprocess::{
    douglas_peucker, extract_keypoints, kinematic_keypoints, union, PreprocessConfig,
};
use kgen_core::rewards::{accuracy_reward, composite_reward, cot_reward, RewardConfig};
use kgen_core::scenario::{ego_relative, AgentSpec, AgentType, Scenario, Trajectory};
use kgen_core::tdapo::bandit::BanditPolicy;
use kgen_core::tdapo::{
    group_advantages, population_std, tdapo_loss, Outcome, Policy, Rollout, RolloutGroup,
    TdapoConfig,
};
use proptest::prelude::*;

fn polyline() -> impl Strategy<Value = Vec<Vec2>> {
    prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..60).prop_map(|steps| {
        let mut p = Vec2::ZERO;
        steps
            .into_iter()
            .map(|(dx, dy)| {
                p += Vec2::new(dx, dy);
                p
            })
            .collect()
    })
}

fn oracle_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let (ux, uy) = (b.x - a.x, b.y - a.y);
    let len2 = ux * ux + uy * uy;
    if len2 == 0.0 {
        return ((p.x - a.x).powi(2) + (p.y - a.y).powi(2)).sqrt();
    }
    let s = (((p.x - a.x) * ux + (p.y - a.y) * uy) / len2).clamp(0.0, 1.0);
    ((p.x - a.x - s * ux).powi(2) + (p.y - a.y - s * uy).powi(2)).sqrt()
}

fn tagged_output() -> impl Strategy<Value = TaggedOutput> {
    let words = prop::collection::vec("[a-z]{1,8}", 0..12).prop_map(|w| w.join(" "));
    let points =
        prop::collection::btree_map(0u32..200, (-500.0f64..500.0, -500.0f64..500.0), 0..10);
    (words, points).prop_map(|(r, pts)| {
        TaggedOutput::new(
            r,
            pts.into_iter()
                .map(|(t, (x, y))| TaggedPoint::new(t, x, y))
                .collect(),
        )
    })
}

fn scenario_from(points: &[Vec<Vec2>], v0: &[Vec2]) -> Scenario {
    let agents = points
        .iter()
        .zip(v0)
        .map(|(p, &v)| {
            AgentSpec::with_default_footprint(
                AgentType::Vehicle,
                v,
                Trajectory::from_positions(0, p, 10.0),
            )
        })
        .collect();
    Scenario::new("p", 10.0, points[0].len(), 2, agents, vec![])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dp_omitted_points_lie_within_epsilon(points in polyline(), eps in 0.05f64..5.0) {
        let traj = Trajectory::from_positions(0, &points, 10.0);
        let kept = douglas_peucker(&traj, eps).unwrap();
        let ts = kept.timesteps();
        prop_assert_eq!(ts[0], 0);
        prop_assert_eq!(*ts.last().unwrap() as usize, points.len() - 1);
        for w in ts.windows(2) {
            let (a, b) = (points[w[0] as usize], points[w[1] as usize]);
            for p in &points[w[0] as usize + 1..w[1] as usize] {
                prop_assert!(oracle_segment_distance(*p, a, b) <= eps + 1e-12);
            }
        }
    }

    #[test]
    fn dp_keeps_fewer_points_at_larger_tolerance(points in polyline(), eps in 0.05f64..3.0, grow in 1.0f64..4.0) {
        let traj = Trajectory::from_positions(0, &points, 10.0);
        let fine = douglas_peucker(&traj, eps).unwrap().timesteps();
        let coarse = douglas_peucker(&traj, eps * grow).unwrap().timesteps();
        prop_assert!(coarse.iter().all(|t| fine.contains(t)));
    }

    #[test]
    fn keypoint_union_is_idempotent_and_commutative(points in polyline(), eps in 0.1f64..3.0, dv in 0.5f64..5.0) {
        prop_assume!(points.len() >= 3);
        let traj = Trajectory::from_positions(0, &points, 10.0);
        let g = douglas_peucker(&traj, eps).unwrap();
        let k = kinematic_keypoints(&traj, dv).unwrap();
        prop_assert_eq!(union(&g, &g), g.clone());
        let u = union(&g, &k);
        prop_assert_eq!(union(&u, &u), u.clone());
        prop_assert_eq!(u.timesteps(), union(&k, &g).timesteps());
        prop_assert!(u.timesteps().windows(2).all(|w| w[0] < w[1]));
        let e = extract_keypoints(&traj, &PreprocessConfig { epsilon: eps, delta_v: dv }).unwrap();
        prop_assert_eq!(e.timesteps(), u.timesteps());
    }

    #[test]
    fn ego_relative_is_invariant_under_rigid_motion(
        a in polyline(), b in polyline(), heading in -3.1f64..3.1, shift in (-100.0f64..100.0, -100.0f64..100.0)
    ) {
        let n = a.len().min(b.len()).max(3);
        prop_assume!(a.len() >= n && b.len() >= n);
        let paths = vec![a[..n].to_vec(), b[..n].to_vec()];
        let v0: Vec<Vec2> = paths.iter().map(|p| (p[1] - p[0]) * 10.0).collect();
        prop_assume!(v0[0].norm() > 1e-3);
        let pose = Pose::new(Vec2::new(shift.0, shift.1), heading);
        let moved: Vec<Vec<Vec2>> = paths.iter().map(|p| p.iter().map(|&q| pose.to_world(q)).collect()).collect();
        let moved_v0: Vec<Vec2> = v0.iter().map(|&v| pose.vector_to_world(v)).collect();
        let (d0, t0) = ego_relative(&scenario_from(&paths, &v0), 1).unwrap();
        let (d1, t1) = ego_relative(&scenario_from(&moved, &moved_v0), 1).unwrap();
        prop_assert!((d0 - d1).abs() < 1e-9);
        let dt = kgen_core::geom::wrap_angle(t0 - t1);
        prop_assert!(dt.abs() < 1e-9 || d0 < 1e-9);
    }

    #[test]
    fn grammar_round_trip_is_exact_after_quantization(o in tagged_output()) {
        let text = serialize_output(&o).unwrap();
        let back = parse_output(&text).unwrap();
        prop_assert_eq!(&back.reasoning, &o.reasoning);
        prop_assert_eq!(back.keypoints.len(), o.keypoints.len());
        for (p, q) in back.keypoints.iter().zip(&o.keypoints) {
            prop_assert_eq!(p.t, q.t);
            prop_assert_eq!(p.x.to_bits(), quantize(q.x).to_bits());
            prop_assert_eq!(p.y.to_bits(), quantize(q.y).to_bits());
        }
        prop_assert_eq!(serialize_output(&back).unwrap(), text);
    }

    #[test]
    fn deleting_any_tag_breaks_the_format(o in tagged_output(), pick in any::<prop::sample::Index>()) {
        let text = serialize_output(&o).unwrap();
        let tags: Vec<(usize, usize)> = text.match_indices('<').map(|(i, _)| (i, text[i..].find('>').unwrap() + 1)).collect();
        let (at, len) = tags[pick.index(tags.len())];
        let mutated = format!("{}{}", &text[..at], &text[at + len..]);
        prop_assert_eq!(format_reward(&mutated), 0.0, "{}", mutated);
    }

    #[test]
    fn accuracy_reward_decreases_with_error(ade in 0.0f64..20.0, fde in 0.0f64..20.0, d in 0.001f64..5.0) {
        let c = RewardConfig::default();
        let r = accuracy_reward(ade, fde, &c).unwrap();
        prop_assert!(accuracy_reward(ade + d, fde, &c).unwrap() < r);
        prop_assert!(accuracy_reward(ade, fde + d, &c).unwrap() < r);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn cot_reward_is_bounded_and_non_increasing(len in 0usize..2000, extra in 0usize..100) {
        let c = RewardConfig::default();
        let r = cot_reward(len, &c);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!(cot_reward(len + extra, &c) <= r);
    }

    #[test]
    fn composite_is_the_weighted_sum(a in 0.0f64..=1.0, b in 0.0f64..=1.0, f in prop::bool::ANY) {
        let c = RewardConfig::default();
        let fmt = if f { 1.0 } else { 0.0 };
        let r = composite_reward(a, b, fmt, &c).unwrap();
        prop_assert!((r.composite - (c.alpha * a + c.beta * b + c.gamma * fmt)).abs() < 1e-12);
    }

    #[test]
    fn advantages_have_zero_mean_and_unit_spread(rewards in prop::collection::vec(0.0f64..1.0, 2..32)) {
        let a = group_advantages(&rewards, 1e-8);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() <= 1e-9);
        if population_std(&rewards) > 0.01 {
            prop_assert!((population_std(&a) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn positive_advantage_contribution_never_exceeds_the_upper_clip(
        logits in prop::collection::vec(-3.0f64..3.0, 2..6),
        shifts in prop::collection::vec(-2.0f64..2.0, 2..6),
        a in 0.01f64..3.0,
    ) {
        let mut policy = BanditPolicy::uniform(logits.len());
        policy.logits = logits.clone();
        let n = logits.len().min(shifts.len());
        let lps = policy.log_probs(&(), &(0..n as u32).collect::<Vec<_>>());
        let rollouts: Vec<Rollout> = (0..n)
            .map(|i| Rollout { tokens: vec![i as u32], logprobs: vec![lps[i] + shifts[i]], text: String::new() })
            .collect();
        let outcomes = vec![Outcome { reward: 0.0, breakdown: None, error: 0.0 }; n];
        let group = RolloutGroup { index: 0, id: "g".into(), rollouts, outcomes, advantages: vec![a; n] };
        let cfg = TdapoConfig::default();
        let l = tdapo_loss(&group, &policy, &(), &cfg).unwrap();
        prop_assert!(-l.loss <= (1.0 + cfg.eps_high) * a + 1e-12);
    }
}
