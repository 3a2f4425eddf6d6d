mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidrec::dataio::SplitExample;
use sidrec::evalharness::{
    best_of_n, eval_examples, evaluate_ranking, mean_metrics, ndcg_at, popularity_baseline, rank_of, reports_csv, EvalConfig, EvalError,
    ReasoningMode,
};
use sidrec::policy::rank_topk;

/// Independent metric definitions: a linear scan over the list.
fn oracle(list: &[u32], target: u32, k: usize) -> (f64, f64) {
    for (i, &x) in list.iter().take(k).enumerate() {
        if x == target {
            return (1.0, 1.0 / (i as f64 + 2.0).log2());
        }
    }
    (0.0, 0.0)
}

#[test]
fn metrics_match_brute_force_on_random_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ranks = Vec::new();
    let mut per = vec![Vec::new(); 3];
    for _ in 0..200 {
        let mut list: Vec<u32> = (0..50).collect();
        list.shuffle(&mut rng);
        list.truncate(rng.random_range(1..=20));
        let target = rng.random_range(0..50);
        ranks.push(rank_of(&list, &target));
        for (j, k) in [1, 5, 10].into_iter().enumerate() {
            per[j].push(oracle(&list, target, k));
        }
    }
    for (j, k) in [1, 5, 10].into_iter().enumerate() {
        let (r, n) = mean_metrics(&ranks, k);
        let want_r = per[j].iter().map(|x| x.0).sum::<f64>() / 200.0;
        let want_n = per[j].iter().map(|x| x.1).sum::<f64>() / 200.0;
        assert_eq!((r, n), (want_r, want_n), "k={k}");
    }
    assert_eq!(ndcg_at(Some(3), 10), 0.5);
}

#[test]
fn ranking_modes_and_best_of_n() {
    let fx = common::fixture(3);
    let p = &fx.policy;
    let examples = eval_examples(&fx.test[..12.min(fx.test.len())], &fx.assignment).unwrap();

    // the beam at full width enumerates the whole catalog
    let all = rank_topk(p, &fx.prompt(&fx.test[0]), &[], &fx.trie, fx.trie.len(), fx.trie.len()).unwrap();
    assert_eq!(all.len(), fx.items.len());

    let cfg = EvalConfig {
        ks: vec![1, 5, 10],
        ns: vec![1, 2, 4, 8],
        beam_width: 10,
        max_reasoning_tokens: 6,
        ..EvalConfig::default()
    };
    for mode in [ReasoningMode::None, ReasoningMode::Greedy, ReasoningMode::Sampled] {
        let (r, t) = evaluate_ranking(p, &examples, &fx.trie, &cfg, mode, "fx").unwrap();
        assert_eq!(r.examples, examples.len());
        assert_eq!(r.recall(1), r.ndcg(1));
        assert!(r.recall(1) <= r.recall(5) && r.recall(5) <= r.recall(10));
        assert!(r.metrics.iter().all(|m| (0.0..=1.0).contains(&m.recall) && (0.0..=1.0).contains(&m.ndcg)));
        assert_eq!(t.len(), if mode == ReasoningMode::None { 0 } else { examples.len() });
        assert_eq!(r, evaluate_ranking(p, &examples, &fx.trie, &cfg, mode, "fx").unwrap().0);
    }

    let bon = best_of_n(p, &examples, &fx.trie, &cfg, "fx").unwrap();
    for rewards in &bon.selected_rewards {
        assert!(rewards.windows(2).all(|w| w[0] <= w[1]), "{rewards:?}");
    }
    let (single, _) = evaluate_ranking(p, &examples, &fx.trie, &cfg, ReasoningMode::Sampled, "fx").unwrap();
    assert_eq!(bon.reports[0].metrics, single.metrics);
    assert_eq!(bon.reports[0].mean_reward, single.mean_reward);
    let csv = reports_csv(&bon.reports);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("label,mode,n,examples,recall@1,ndcg@1,"));

    let narrow = EvalConfig { beam_width: 5, ..cfg };
    assert!(matches!(
        evaluate_ranking(p, &examples, &fx.trie, &narrow, ReasoningMode::None, "fx"),
        Err(EvalError::BeamTooNarrow { beam: 5, k: 10 })
    ));
}

#[test]
fn popularity_on_skewed_fixture() {
    let fx = common::fixture(0);
    let ids: Vec<String> = fx.items.iter().map(|i| i.item_id.clone()).collect();
    let ex = |t: &str| SplitExample {
        user_id: "u".into(),
        history: vec![ids[0].clone()],
        target: t.into(),
        target_timestamp: 0,
    };
    // ids[5] is half the train targets and a third of the test targets
    let train: Vec<SplitExample> = (0..20).map(|i| ex(if i % 2 == 0 { &ids[5] } else { &ids[i % 7 + 8] })).collect();
    let test: Vec<SplitExample> = (0..30).map(|i| ex(if i % 3 == 0 { &ids[5] } else { &ids[i % 11 + 20] })).collect();
    let cfg = EvalConfig {
        ks: vec![1, 5, 10],
        ..EvalConfig::default()
    };
    let r = popularity_baseline(&train, &test, &fx.assignment, &fx.trie, &cfg).unwrap();
    assert!(r.recall(1).unwrap() >= 10.0 / 30.0);
    assert!(r.recall(1) <= r.recall(5) && r.recall(5) <= r.recall(10));
    assert_eq!(r, popularity_baseline(&train, &test, &fx.assignment, &fx.trie, &cfg).unwrap());
}
