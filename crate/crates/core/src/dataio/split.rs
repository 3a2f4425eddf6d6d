use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Interaction};

/// One next-item prediction example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitExample {
    pub user_id: String,
    /// Oldest first, at most `max_len` items.
    pub history: Vec<String>,
    pub target: String,
    pub target_timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<SplitExample>,
    pub val: Vec<SplitExample>,
    pub test: Vec<SplitExample>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub users: usize,
    pub dropped_users: usize,
}

/// `ceil` that ignores representation noise such as `2.0000000000000004`.
fn ceil_share(n: usize, share: f64) -> usize {
    let x = n as f64 * share;
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Sliding-window examples with a per-user temporal split.
///
/// Each user's interactions are ordered by `(timestamp, item_id)`. Position
/// `t ≥ 1` yields `history = previous min(t, max_len) items`. The newest
/// `⌈n·test⌉` examples go to test, the `⌈n·val⌉` before them to val, the rest
/// to train. Users are emitted in `user_id` order.
pub fn build_split_sequences(
    interactions: &[Interaction],
    max_len: usize,
    ratios: [f64; 3],
) -> Result<(SplitDataset, SplitStats), DataError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || max_len == 0 {
        return Err(DataError::InvalidRatios(ratios.to_vec()));
    }
    let total: f64 = ratios.iter().sum();
    let (val_share, test_share) = (ratios[1] / total, ratios[2] / total);

    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for row in interactions {
        by_user.entry(&row.user_id).or_default().push(row);
    }
    let mut out = SplitDataset::default();
    let mut stats = SplitStats::default();
    for (user, mut rows) in by_user {
        stats.users += 1;
        if rows.len() < 2 {
            stats.dropped_users += 1;
            continue;
        }
        rows.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.item_id.cmp(&b.item_id)));
        let examples: Vec<SplitExample> = (1..rows.len())
            .map(|t| SplitExample {
                user_id: user.to_string(),
                history: rows[t.saturating_sub(max_len)..t].iter().map(|r| r.item_id.clone()).collect(),
                target: rows[t].item_id.clone(),
                target_timestamp: rows[t].timestamp,
            })
            .collect();
        let n = examples.len();
        let n_test = ceil_share(n, test_share).min(n);
        let n_val = ceil_share(n, val_share).min(n - n_test);
        let n_train = n - n_test - n_val;
        let mut it = examples.into_iter();
        out.train.extend(it.by_ref().take(n_train));
        out.val.extend(it.by_ref().take(n_val));
        out.test.extend(it);
    }
    if stats.dropped_users > 0 {
        tracing::info!(dropped = stats.dropped_users, "users with fewer than 2 interactions skipped");
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(u: &str, n: usize) -> Vec<Interaction> {
        (0..n)
            .map(|t| Interaction {
                user_id: u.into(),
                item_id: format!("i{t:02}"),
                timestamp: 100 + t as i64,
            })
            .collect()
    }

    #[test]
    fn twenty_interactions_split_15_2_2() {
        let (d, _) = build_split_sequences(&user("a", 20), 10, [8.0, 1.0, 1.0]).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (15, 2, 2));
        assert_eq!(d.test.last().unwrap().target, "i19");
    }

    #[test]
    fn window_caps_history() {
        let (d, _) = build_split_sequences(&user("a", 12), 10, [8.0, 1.0, 1.0]).unwrap();
        let last = d.test.last().unwrap();
        assert_eq!(last.target, "i11");
        assert_eq!(last.history.len(), 10);
        assert_eq!(last.history[0], "i01");
        let all: Vec<_> = d.train.iter().chain(&d.val).chain(&d.test).collect();
        assert!(all.iter().all(|e| (1..=10).contains(&e.history.len())));
    }

    #[test]
    fn short_users_are_counted_and_skipped() {
        let mut rows = user("a", 1);
        rows.extend(user("b", 5));
        let (d, s) = build_split_sequences(&rows, 10, [8.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.dropped_users, 1);
        assert!(d.train.iter().all(|e| e.user_id == "b"));
    }

    #[test]
    fn ties_broken_by_item_id() {
        let rows = vec![
            Interaction { user_id: "a".into(), item_id: "z".into(), timestamp: 1 },
            Interaction { user_id: "a".into(), item_id: "b".into(), timestamp: 1 },
            Interaction { user_id: "a".into(), item_id: "c".into(), timestamp: 2 },
        ];
        let (d, _) = build_split_sequences(&rows, 10, [8.0, 1.0, 1.0]).unwrap();
        assert!(d.train.is_empty());
        assert_eq!(d.val[0].history, vec!["b".to_string()]);
        assert_eq!(d.val[0].target, "z");
        assert_eq!(d.test[0].target, "c");
    }

    #[test]
    fn temporal_order_and_no_leakage() {
        let mut rows = Vec::new();
        for (k, n) in [7usize, 13, 20, 31].iter().enumerate() {
            rows.extend(user(&format!("u{k}"), *n));
        }
        let (d, _) = build_split_sequences(&rows, 10, [8.0, 1.0, 1.0]).unwrap();
        for u in ["u0", "u1", "u2", "u3"] {
            let max_train = d.train.iter().filter(|e| e.user_id == u).map(|e| e.target_timestamp).max().unwrap();
            let val: Vec<_> = d.val.iter().filter(|e| e.user_id == u).collect();
            let test: Vec<_> = d.test.iter().filter(|e| e.user_id == u).collect();
            let min_val = val.iter().map(|e| e.target_timestamp).min().unwrap();
            let max_val = val.iter().map(|e| e.target_timestamp).max().unwrap();
            let min_test = test.iter().map(|e| e.target_timestamp).min().unwrap();
            assert!(max_train <= min_val && max_val <= min_test);
            for e in val.iter().chain(&test) {
                assert!(!d.train.iter().any(|t| t.user_id == u && t.history == e.history && t.target == e.target));
            }
        }
        assert_eq!(build_split_sequences(&rows, 10, [8.0, 1.0, 1.0]).unwrap().0, d);
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(build_split_sequences(&[], 10, [8.0, 0.0, 1.0]).is_err());
    }
}
