use std::collections::HashMap;

use super::Interaction;

/// Keeps the maximal subset of interactions in which every user and every
/// item appears at least `k` times. Input order is preserved.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut alive = vec![true; interactions.len()];
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (row, _) in interactions.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_deg.entry(&row.user_id).or_default() += 1;
            *item_deg.entry(&row.item_id).or_default() += 1;
        }
        let mut changed = false;
        for (row, a) in interactions.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[row.user_id.as_str()] < k || item_deg[row.item_id.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(r, _)| r.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ix(u: usize, i: usize, t: i64) -> Interaction {
        Interaction {
            user_id: format!("u{u}"),
            item_id: format!("i{i}"),
            timestamp: t,
        }
    }

    /// Brute force: the largest subset (by enumeration over user/item
    /// keep-sets) in which all degrees are at least k.
    fn oracle(rows: &[Interaction], k: usize) -> Vec<Interaction> {
        let mut users: Vec<&str> = rows.iter().map(|r| r.user_id.as_str()).collect();
        users.sort();
        users.dedup();
        let mut items: Vec<&str> = rows.iter().map(|r| r.item_id.as_str()).collect();
        items.sort();
        items.dedup();
        let mut best: Vec<Interaction> = Vec::new();
        for um in 0u32..(1 << users.len()) {
            for im in 0u32..(1 << items.len()) {
                let keep: Vec<Interaction> = rows
                    .iter()
                    .filter(|r| {
                        let u = users.iter().position(|x| *x == r.user_id).unwrap();
                        let i = items.iter().position(|x| *x == r.item_id).unwrap();
                        um & (1 << u) != 0 && im & (1 << i) != 0
                    })
                    .cloned()
                    .collect();
                let ok = keep.iter().all(|r| {
                    keep.iter().filter(|x| x.user_id == r.user_id).count() >= k
                        && keep.iter().filter(|x| x.item_id == r.item_id).count() >= k
                });
                if ok && keep.len() > best.len() {
                    best = keep;
                }
            }
        }
        best
    }

    #[test]
    fn cascade_removes_dependent_rows() {
        // u0..u2 each hit items 0..4 (5 each); u3 has only 4 rows, and item 5
        // is only supported by u3, so removing u3 must cascade.
        let mut rows = Vec::new();
        let mut t = 0;
        for u in 0..5 {
            for i in 0..5 {
                rows.push(ix(u, i, t));
                t += 1;
            }
        }
        for i in [0, 1, 2, 5] {
            rows.push(ix(9, i, t));
            t += 1;
        }
        let out = k_core_filter(&rows, 5);
        assert_eq!(out.len(), 25);
        assert!(out.iter().all(|r| r.user_id != "u9" && r.item_id != "i5"));
    }

    #[test]
    fn unchanged_when_all_degrees_sufficient() {
        let rows: Vec<_> = (0..3).flat_map(|u| (0..3).map(move |i| ix(u, i, 0))).collect();
        assert_eq!(k_core_filter(&rows, 3), rows);
    }

    #[test]
    fn empty_when_k_exceeds_degrees() {
        let rows: Vec<_> = (0..3).flat_map(|u| (0..3).map(move |i| ix(u, i, 0))).collect();
        assert!(k_core_filter(&rows, 4).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn matches_brute_force_and_is_idempotent(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 0..24),
            k in 1usize..4,
        ) {
            let mut rows: Vec<Interaction> = pairs.iter().enumerate().map(|(t, &(u, i))| ix(u, i, t as i64)).collect();
            rows.sort_by(|a, b| (&a.user_id, &a.item_id).cmp(&(&b.user_id, &b.item_id)));
            rows.dedup_by(|a, b| a.user_id == b.user_id && a.item_id == b.item_id);
            let once = k_core_filter(&rows, k);
            prop_assert_eq!(once.len(), oracle(&rows, k).len());
            prop_assert_eq!(k_core_filter(&once, k), once);
        }
    }
}
