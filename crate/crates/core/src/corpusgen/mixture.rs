use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AlignmentExample, CorpusError, TaskTag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: BTreeMap<TaskTag, f64>,
    /// Total number of examples in the mixture.
    pub budget: usize,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        use TaskTag::*;
        let weights = [
            (Title2sid, 1.0),
            (Sid2title, 1.0),
            (Seqsid2title, 1.0),
            (Seqtitle2title, 1.0),
            (Seqsid2sid, 1.0),
            (Seqtitle2sid, 1.0),
            (ItemEnrich, 1.0),
            (UserEnrich, 1.0),
            (General, 1.0),
            (ColdstartReason, 1.0),
        ];
        Self {
            weights: weights.into_iter().collect(),
            budget: 6000,
            seed: 13,
        }
    }
}

/// Largest-remainder apportionment of `budget` by weight; remainder ties go
/// to the earlier tag.
pub fn apportion(weights: &BTreeMap<TaskTag, f64>, budget: usize) -> Result<BTreeMap<TaskTag, usize>, CorpusError> {
    if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(CorpusError::InvalidMixture("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.values().sum();
    if total <= 0.0 {
        return Err(CorpusError::InvalidMixture("at least one weight must be positive".into()));
    }
    let mut counts = BTreeMap::new();
    let mut rema = Vec::new();
    let mut used = 0;
    for (&tag, &w) in weights {
        let exact = budget as f64 * w / total;
        let base = exact.floor() as usize;
        counts.insert(tag, base);
        used += base;
        rema.push((exact - base as f64, tag));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, tag) in rema.into_iter().take(budget - used) {
        *counts.get_mut(&tag).unwrap() += 1;
    }
    Ok(counts)
}

/// Samples each task's share from its source (without replacement while the
/// source lasts, then cycling through a fresh shuffle) and shuffles the
/// result, all driven by `spec.seed`.
pub fn build_mixture(
    sources: &BTreeMap<TaskTag, Vec<AlignmentExample>>,
    spec: &MixtureSpec,
) -> Result<Vec<AlignmentExample>, CorpusError> {
    let counts = apportion(&spec.weights, spec.budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.budget);
    for (tag, n) in counts {
        if spec.weights[&tag] <= 0.0 {
            continue;
        }
        let src = sources.get(&tag).filter(|s| !s.is_empty()).ok_or(CorpusError::EmptySource(tag.as_str()))?;
        let mut taken = 0;
        while taken < n {
            let mut idx: Vec<usize> = (0..src.len()).collect();
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(n - taken) {
                out.push(src[i].clone());
                taken += 1;
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(pairs: &[(TaskTag, f64)]) -> BTreeMap<TaskTag, f64> {
        pairs.iter().copied().collect()
    }

    fn sources() -> BTreeMap<TaskTag, Vec<AlignmentExample>> {
        TaskTag::ALL
            .iter()
            .map(|&t| (t, (0..4).map(|i| AlignmentExample::new(t, format!("p{i}"), format!("t{i}"))).collect()))
            .collect()
    }

    #[test]
    fn equal_and_two_to_one() {
        let c = apportion(&w(&[(TaskTag::General, 1.0), (TaskTag::Title2sid, 1.0)]), 10).unwrap();
        assert_eq!(c.values().copied().collect::<Vec<_>>(), vec![5, 5]);
        let c = apportion(&w(&[(TaskTag::Title2sid, 2.0), (TaskTag::General, 1.0)]), 9).unwrap();
        assert_eq!((c[&TaskTag::Title2sid], c[&TaskTag::General]), (6, 3));
    }

    #[test]
    fn deterministic_and_tagged() {
        let spec = MixtureSpec {
            budget: 37,
            ..MixtureSpec::default()
        };
        let a = build_mixture(&sources(), &spec).unwrap();
        let b = build_mixture(&sources(), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 37);
        let general = a.iter().filter(|e| e.task_tag == TaskTag::General).count();
        assert!((3..=4).contains(&general));
    }

    #[test]
    fn empty_source_with_weight_is_error() {
        let mut s = sources();
        s.insert(TaskTag::General, vec![]);
        assert!(matches!(build_mixture(&s, &MixtureSpec::default()), Err(CorpusError::EmptySource("general"))));
    }

    #[test]
    fn invalid_weights() {
        assert!(apportion(&w(&[(TaskTag::General, 0.0)]), 3).is_err());
        assert!(apportion(&w(&[(TaskTag::General, -1.0)]), 3).is_err());
    }

    proptest! {
        #[test]
        fn counts_within_one_of_proportional(ws in proptest::collection::vec(0.0f64..5.0, 1..10), budget in 0usize..500) {
            prop_assume!(ws.iter().sum::<f64>() > 0.01);
            let weights: BTreeMap<TaskTag, f64> = TaskTag::ALL.iter().copied().zip(ws.iter().copied()).collect();
            let total: f64 = weights.values().sum();
            let c = apportion(&weights, budget).unwrap();
            prop_assert_eq!(c.values().sum::<usize>(), budget);
            for (t, n) in &c {
                let exact = budget as f64 * weights[t] / total;
                prop_assert!((*n as f64 - exact).abs() < 1.0 + 1e-9);
            }
        }
    }
}
