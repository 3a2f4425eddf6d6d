mod common;

use std::collections::HashSet;

use sidrec::grpo::{
    group_advantages, grpo_update, rl_examples, rl_init, rl_train, rollout_group, score_group, GrpoConfig, Rollout, TrajectoryGroup,
};
use sidrec::numerics::{Optimizer, OptimizerKind};
use sidrec::policy::{load_policy, save_policy, GenerationOutput, Policy, Stage, StopReason};
use sidrec::sidspace::SemanticId;

fn activated(fx: &common::Fixture) -> Policy {
    let mut p = fx.policy.clone();
    p.stage = Stage::Activated;
    p
}

fn small_config() -> GrpoConfig {
    GrpoConfig {
        group_size: 4,
        batch_size: 4,
        max_reasoning_tokens: 6,
        learning_rate: 1e-3,
        max_steps: 100,
        ..GrpoConfig::default()
    }
}

#[test]
fn groups_are_diverse_and_reproducible() {
    let fx = common::fixture(2);
    let p = activated(&fx);
    let data = rl_examples(&fx.train, &fx.assignment, &p.vocab).unwrap();
    let cfg = GrpoConfig {
        group_size: 8,
        max_reasoning_tokens: 6,
        ..GrpoConfig::default()
    };
    let mut diverse = 0;
    for i in 0..100 {
        let ex = &data[i % data.len()];
        let g = rollout_group(&p, &p, &ex.context, &fx.trie, &cfg, i as u64).unwrap();
        assert_eq!(g.rollouts.len(), 8);
        if i < 3 {
            assert_eq!(g, rollout_group(&p, &p, &ex.context, &fx.trie, &cfg, i as u64).unwrap());
        }
        let answers: HashSet<Vec<u32>> = g.rollouts.iter().map(|r| r.output.answer.clone()).collect();
        if answers.len() >= 2 {
            diverse += 1;
        }
    }
    assert!(diverse >= 90, "only {diverse}/100 groups had two distinct answers");
}

/// Hand-computed rewards for L = 3, λ = 0.1 against truth ⟨0,1,2⟩.
#[test]
fn mixed_group_rewards_match_table() {
    let fx = common::fixture(0);
    let p = &fx.policy;
    let v = &p.vocab;
    let truth_id = fx.assignment.iter().find(|(_, s)| s.codes == [0, 1, 2]).unwrap().0.to_string();
    let truth: SemanticId = fx.assignment.get(&truth_id).unwrap().clone();
    let tok = |l: usize, c: u32| v.sid_token(l, c).unwrap();
    let answer = |codes: &[u32]| codes.iter().enumerate().map(|(l, &c)| tok(l, c)).collect::<Vec<_>>();
    // (answer, stop, expected total, expected m)
    let table: Vec<(Vec<u32>, StopReason, f64, usize)> = vec![
        (answer(&[0, 1, 2]), StopReason::Answered, 1.1, 3),
        (answer(&[0, 1, 0]), StopReason::Answered, 0.6, 2),
        (answer(&[0, 2, 0]), StopReason::Answered, 0.35, 1),
        (answer(&[1, 1, 2]), StopReason::Answered, 0.225, 0),
        (answer(&[3, 3, 3]), StopReason::Answered, 0.125, 0),
        (answer(&[0, 1]), StopReason::EndedWithoutAnswer, 0.0, 0),
        (Vec::new(), StopReason::EndedWithoutAnswer, 0.0, 0),
    ];
    assert!(fx.trie.lookup(&[3, 3, 3]).is_none(), "fixture must leave ⟨3,3,3⟩ unassigned");
    let rollouts = table
        .iter()
        .map(|(a, stop, _, _)| Rollout {
            output: GenerationOutput {
                reasoning: Vec::new(),
                answer: a.clone(),
                logprobs: vec![0.0; a.len()],
                sample_logprobs: vec![0.0; a.len()],
                stop: *stop,
            },
            old_logprobs: vec![0.0; a.len()],
            ref_logprobs: vec![0.0; a.len()],
        })
        .collect();
    let mut g = TrajectoryGroup {
        context: vec![3],
        rollouts,
        rewards: Vec::new(),
        advantages: Vec::new(),
        skip: false,
    };
    score_group(&mut g, p, &fx.trie, &truth, 0.1, 1e-6).unwrap();
    for (i, (r, (_, _, total, m))) in g.rewards.iter().zip(&table).enumerate() {
        assert!((r.total - total).abs() < 1e-12, "row {i}: {} vs {total}", r.total);
        assert_eq!(r.m, *m, "row {i}");
    }
    assert!(!g.skip);
}

#[test]
fn one_good_trajectory_gains_probability() {
    let fx = common::fixture(2);
    let mut p = activated(&fx);
    let data = rl_examples(&fx.train, &fx.assignment, &p.vocab).unwrap();
    let cfg = GrpoConfig {
        group_size: 8,
        max_reasoning_tokens: 6,
        learning_rate: 1e-3,
        ..GrpoConfig::default()
    };
    let mut g = rollout_group(&p, &p, &data[0].context, &fx.trie, &cfg, 3).unwrap();
    let rewards: Vec<f64> = (0..8).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
    (g.advantages, g.skip) = group_advantages(&rewards, cfg.adv_eps);
    let good = g.rollouts[0].output.tokens();
    let before: f64 = p.sequence_logprob(&g.context, &good).unwrap().iter().sum();
    let mut opt = Optimizer::new(OptimizerKind::Adamw, cfg.learning_rate, 0.0, Some(1.0));
    let stats = grpo_update(&mut p, &mut opt, std::slice::from_ref(&g), &cfg).unwrap();
    assert_eq!(stats.ratio_max_dev, 0.0, "θ = θ_old at the first update");
    let after: f64 = p.sequence_logprob(&g.context, &good).unwrap().iter().sum();
    assert!(after > before, "{before} → {after}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let fx = common::fixture(2);
    let reference = activated(&fx);
    let ref_bytes: Vec<u64> = reference.params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
    let data = rl_examples(&fx.train, &fx.assignment, &reference.vocab).unwrap();
    let cfg = small_config();

    let state = rl_init(reference.clone(), &cfg).unwrap();
    let (full, metrics) = rl_train(state, &reference, &data, &fx.trie, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(metrics.len(), 100);
    assert!(metrics.iter().enumerate().all(|(i, m)| m.step == i + 1 && m.mean_reward.is_finite() && m.kl.is_finite()));
    assert_eq!(full.policy.stage, Stage::Rl);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("rl-50.ckpt");
    let half = GrpoConfig { max_steps: 50, ..cfg.clone() };
    let state = rl_init(reference.clone(), &cfg).unwrap();
    let (mid, first) = rl_train(state, &reference, &data, &fx.trie, &half, |_, _| Ok(())).unwrap();
    save_policy(&ckpt, &mid.policy, Some(&mid.optimizer)).unwrap();
    let (policy, optimizer) = load_policy(&ckpt).unwrap();
    let resumed = sidrec::grpo::RlState {
        policy,
        optimizer: optimizer.unwrap(),
    };
    let (end, second) = rl_train(resumed, &reference, &data, &fx.trie, &cfg, |_, _| Ok(())).unwrap();
    let joined: Vec<_> = first.into_iter().chain(second).collect();
    assert_eq!(joined, metrics);
    assert_eq!(end.policy.params, full.policy.params);

    let after: Vec<u64> = reference.params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
    assert_eq!(ref_bytes, after, "reference policy must stay frozen");
    assert!(rl_init(full.policy, &cfg).is_err(), "rl starts from an activated checkpoint only");
}
