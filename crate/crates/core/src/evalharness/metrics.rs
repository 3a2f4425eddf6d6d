//! Single-target ranking metrics.

/// 1 when the target sits within the top `k`.
pub fn recall_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(1 + rank)` within the top `k`, else 0.
pub fn ndcg_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0 / ((1 + r) as f64).log2(),
        _ => 0.0,
    }
}

/// 1-based position of `target` in `ranking`.
pub fn rank_of<T: PartialEq>(ranking: &[T], target: &T) -> Option<usize> {
    ranking.iter().position(|x| x == target).map(|p| p + 1)
}

/// Mean (recall@k, ndcg@k) over examples.
pub fn mean_metrics(ranks: &[Option<usize>], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let r = ranks.iter().map(|&x| recall_at(x, k)).sum::<f64>() / n;
    let g = ranks.iter().map(|&x| ndcg_at(x, k)).sum::<f64>() / n;
    (r, g)
}
