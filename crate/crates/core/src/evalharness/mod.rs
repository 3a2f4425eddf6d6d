//! Full-catalog ranking evaluation, best-of-N reasoning, a popularity
//! baseline and report files.

mod metrics;
mod report;

pub use metrics::{mean_metrics, ndcg_at, rank_of, recall_at};
pub use report::{read_report, reports_csv, write_report, write_transcripts};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpusgen::{coldstart_prompt, sequence_prompt};
use crate::dataio::SplitExample;
use crate::policy::{generate, rank_topk, DecodeOptions, GenerationOutput, Policy, PolicyError, TranscriptRecord};
use crate::quantizer::SidAssignment;
use crate::sidspace::{compute_reward_text, RewardBreakdown, SemanticId, SidError, SidTrie, SidVocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    Empty,
    #[error("beam width {beam} is smaller than the largest cutoff {k}")]
    BeamTooNarrow { beam: usize, k: usize },
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("item `{0}` has no SID")]
    UnknownItem(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: std::path::PathBuf, message: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sid(#[from] SidError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningMode {
    /// Rank directly after the next-item prompt.
    None,
    /// Greedy reasoning, then rank.
    Greedy,
    /// Sampled reasoning, then rank.
    Sampled,
}

impl ReasoningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningMode::None => "none",
            ReasoningMode::Greedy => "greedy",
            ReasoningMode::Sampled => "sampled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Cutoffs for Recall@K and NDCG@K.
    pub ks: Vec<usize>,
    /// Sample counts for best-of-N.
    pub ns: Vec<usize>,
    pub beam_width: usize,
    pub temperature: f64,
    pub max_reasoning_tokens: usize,
    /// Trie-mask the answer that follows generated reasoning.
    pub constrained: bool,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            ns: vec![1, 2, 4, 8],
            beam_width: 20,
            temperature: 1.0,
            max_reasoning_tokens: 64,
            constrained: false,
            lambda: 0.1,
            seed: 41,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(EvalError::InvalidConfig("ks must be non-empty and positive".into()));
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            return Err(EvalError::InvalidConfig("ns must be non-empty and positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(EvalError::InvalidConfig("temperature must be positive".into()));
        }
        let k = self.max_k();
        if self.beam_width < k {
            return Err(EvalError::BeamTooNarrow { beam: self.beam_width, k });
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0)
    }
}

/// A held-out example with both prompt variants.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalExample {
    pub sequence_prompt: String,
    pub reasoning_prompt: String,
    pub target: String,
    pub sid: SemanticId,
}

pub fn eval_examples(split: &[SplitExample], assignment: &SidAssignment) -> Result<Vec<EvalExample>, EvalError> {
    split
        .iter()
        .map(|ex| {
            let history = ex
                .history
                .iter()
                .map(|h| assignment.render(h).ok_or_else(|| EvalError::UnknownItem(h.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let sid = assignment.get(&ex.target).ok_or_else(|| EvalError::UnknownItem(ex.target.clone()))?;
            Ok(EvalExample {
                sequence_prompt: sequence_prompt(&history),
                reasoning_prompt: coldstart_prompt(&history),
                target: ex.target.clone(),
                sid: sid.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mode: String,
    /// Best-of-N sample count, when applicable.
    pub n: Option<usize>,
    pub examples: usize,
    pub catalog: usize,
    pub metrics: Vec<CutoffMetrics>,
    /// Fraction of generated answers that are not catalog items.
    pub invalid_rate: f64,
    pub mean_reward: f64,
    pub reasoning_len_mean: f64,
    pub reasoning_len_median: f64,
    pub config: EvalConfig,
    pub seed: u64,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }
}

/// What one example contributed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub rank: Option<usize>,
    pub reward: RewardBreakdown,
    pub reasoning_len: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Aggregates per-example outcomes in index order.
pub fn summarize(label: &str, mode: &str, n: Option<usize>, outcomes: &[ExampleOutcome], catalog: usize, config: &EvalConfig) -> EvalReport {
    let ranks: Vec<Option<usize>> = outcomes.iter().map(|o| o.rank).collect();
    let count = outcomes.len().max(1) as f64;
    let mut ks = config.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    EvalReport {
        label: label.to_string(),
        mode: mode.to_string(),
        n,
        examples: outcomes.len(),
        catalog,
        metrics: ks
            .iter()
            .map(|&k| {
                let (recall, ndcg) = mean_metrics(&ranks, k);
                CutoffMetrics { k, recall, ndcg }
            })
            .collect(),
        invalid_rate: outcomes.iter().filter(|o| o.reward.r_f == 0.0).count() as f64 / count,
        mean_reward: outcomes.iter().map(|o| o.reward.total).sum::<f64>() / count,
        reasoning_len_mean: outcomes.iter().map(|o| o.reasoning_len as f64).sum::<f64>() / count,
        reasoning_len_median: median(outcomes.iter().map(|o| o.reasoning_len as f64).collect()),
        config: config.clone(),
        seed: config.seed,
    }
}

fn example_seed(seed: u64, example: usize, sample: usize) -> u64 {
    let mut z = seed ^ (example as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= (sample as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn decode_options(config: &EvalConfig, greedy: bool, seed: u64) -> DecodeOptions {
    DecodeOptions {
        temperature: if greedy { 0.0 } else { config.temperature },
        max_reasoning_tokens: config.max_reasoning_tokens,
        constrained: config.constrained,
        seed,
    }
}

/// Reasoning tokens to condition the ranking on: the generated span without
/// a trailing turn marker.
fn ranking_reasoning(policy: &Policy, out: &GenerationOutput) -> Vec<u32> {
    let mut r = out.reasoning.clone();
    if r.last().is_some_and(|&t| policy.vocab.is_control(t)) {
        r.pop();
    }
    r
}

fn rank_target(policy: &Policy, context: &[u32], reasoning: &[u32], trie: &SidTrie, ex: &EvalExample, config: &EvalConfig) -> Result<Option<usize>, EvalError> {
    let ranked = rank_topk(policy, context, reasoning, trie, config.max_k().min(trie.len()), config.beam_width)?;
    Ok(ranked.iter().position(|r| r.item_id == ex.target).map(|p| p + 1))
}

fn transcript(prompt: &str, out: &GenerationOutput, policy: &Policy, ex: &EvalExample, trie: &SidTrie, reward: RewardBreakdown) -> TranscriptRecord {
    let mut t = TranscriptRecord::new(prompt, out, &policy.vocab);
    t.target = Some(trie.vocab().render(&ex.sid));
    t.reward = Some(reward);
    t
}

/// Ranks the full catalog for every example.
///
/// With reasoning, the generated answer is scored for reward and validity
/// and the ranking is conditioned on the generated reasoning; without, the
/// reward is that of the top-ranked item.
pub fn evaluate_ranking(
    policy: &Policy,
    examples: &[EvalExample],
    trie: &SidTrie,
    config: &EvalConfig,
    mode: ReasoningMode,
    label: &str,
) -> Result<(EvalReport, Vec<TranscriptRecord>), EvalError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows: Vec<(ExampleOutcome, Option<TranscriptRecord>)> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<_, EvalError> {
            match mode {
                ReasoningMode::None => {
                    let ctx = policy.vocab.encode(&ex.sequence_prompt);
                    let ranked = rank_topk(policy, &ctx, &[], trie, config.max_k().min(trie.len()), config.beam_width)?;
                    let rank = ranked.iter().position(|r| r.item_id == ex.target).map(|p| p + 1);
                    let top = ranked.first().map(|r| r.path.iter().enumerate().map(|(l, &c)| SidVocab::token(l, c)).collect::<String>());
                    let reward = compute_reward_text(&top.unwrap_or_default(), &ex.sid, trie, config.lambda)?;
                    Ok((ExampleOutcome { rank, reward, reasoning_len: 0 }, None))
                }
                ReasoningMode::Greedy | ReasoningMode::Sampled => {
                    let ctx = policy.vocab.encode(&ex.reasoning_prompt);
                    let opts = decode_options(config, mode == ReasoningMode::Greedy, example_seed(config.seed, i, 0));
                    let out = generate(policy, &ctx, trie, &opts)?;
                    let reward = compute_reward_text(&out.answer_text(&policy.vocab), &ex.sid, trie, config.lambda)?;
                    let rank = rank_target(policy, &ctx, &ranking_reasoning(policy, &out), trie, ex, config)?;
                    let t = transcript(&ex.reasoning_prompt, &out, policy, ex, trie, reward);
                    Ok((
                        ExampleOutcome {
                            rank,
                            reward,
                            reasoning_len: out.reasoning.len(),
                        },
                        Some(t),
                    ))
                }
            }
        })
        .collect::<Result<_, _>>()?;
    let outcomes: Vec<ExampleOutcome> = rows.iter().map(|r| r.0.clone()).collect();
    let transcripts = rows.into_iter().filter_map(|r| r.1).collect();
    Ok((summarize(label, mode.as_str(), None, &outcomes, trie.len(), config), transcripts))
}

/// Best-of-N results: one report per N plus each example's selected reward
/// per N (same order as `config.ns`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfN {
    pub reports: Vec<EvalReport>,
    pub selected_rewards: Vec<Vec<f64>>,
}

/// Samples `max(ns)` reasonings per example once; for each N the first N
/// samples compete on total reward against the ground truth (earliest wins
/// ties) and the winner's reasoning drives the ranking. Sample 0 uses the
/// same seed as a sampled [`evaluate_ranking`] run.
pub fn best_of_n(policy: &Policy, examples: &[EvalExample], trie: &SidTrie, config: &EvalConfig, label: &str) -> Result<BestOfN, EvalError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let max_n = config.ns.iter().copied().max().unwrap_or(1);
    let per_example: Vec<Vec<(ExampleOutcome, f64)>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<_, EvalError> {
            let ctx = policy.vocab.encode(&ex.reasoning_prompt);
            let mut samples = Vec::with_capacity(max_n);
            for s in 0..max_n {
                let out = generate(policy, &ctx, trie, &decode_options(config, false, example_seed(config.seed, i, s)))?;
                let reward = compute_reward_text(&out.answer_text(&policy.vocab), &ex.sid, trie, config.lambda)?;
                samples.push((out, reward));
            }
            let mut ranks: BTreeMap<usize, Option<usize>> = BTreeMap::new();
            let mut rows = Vec::with_capacity(config.ns.len());
            for &n in &config.ns {
                let mut best = 0;
                for s in 1..n {
                    if samples[s].1.total > samples[best].1.total {
                        best = s;
                    }
                }
                let rank = match ranks.get(&best) {
                    Some(r) => *r,
                    None => {
                        let r = rank_target(policy, &ctx, &ranking_reasoning(policy, &samples[best].0), trie, ex, config)?;
                        ranks.insert(best, r);
                        r
                    }
                };
                let (out, reward) = &samples[best];
                rows.push((
                    ExampleOutcome {
                        rank,
                        reward: *reward,
                        reasoning_len: out.reasoning.len(),
                    },
                    reward.total,
                ));
            }
            Ok(rows)
        })
        .collect::<Result<_, _>>()?;
    let reports = config
        .ns
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let outcomes: Vec<ExampleOutcome> = per_example.iter().map(|rows| rows[j].0.clone()).collect();
            summarize(label, "best_of_n", Some(n), &outcomes, trie.len(), config)
        })
        .collect();
    let selected_rewards = per_example.iter().map(|rows| rows.iter().map(|r| r.1).collect()).collect();
    Ok(BestOfN { reports, selected_rewards })
}

/// Items ordered by how often they are a train target, ties by item id.
pub fn popularity_ranking(train: &[SplitExample], catalog: &[String]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = catalog.iter().map(|c| (c.as_str(), 0)).collect();
    for ex in train {
        if let Some(c) = counts.get_mut(ex.target.as_str()) {
            *c += 1;
        }
    }
    let mut items: Vec<(&str, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(i, _)| i.to_string()).collect()
}

/// Scores the popularity ranking on `test`; reward is that of the most
/// popular item.
pub fn popularity_baseline(
    train: &[SplitExample],
    test: &[SplitExample],
    assignment: &SidAssignment,
    trie: &SidTrie,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty);
    }
    let catalog: Vec<String> = assignment.iter().map(|(i, _)| i.to_string()).collect();
    let ranking = popularity_ranking(train, &catalog);
    let top = assignment.render(&ranking[0]).unwrap_or_default();
    let outcomes = test
        .iter()
        .map(|ex| {
            let sid = assignment.get(&ex.target).ok_or_else(|| EvalError::UnknownItem(ex.target.clone()))?;
            Ok(ExampleOutcome {
                rank: rank_of(&ranking, &ex.target),
                reward: compute_reward_text(&top, sid, trie, config.lambda)?,
                reasoning_len: 0,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(summarize("popularity", "popularity", None, &outcomes, catalog.len(), config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(user: &str, target: &str) -> SplitExample {
        SplitExample {
            user_id: user.into(),
            history: vec!["x".into()],
            target: target.into(),
            target_timestamp: 0,
        }
    }

    #[test]
    fn popularity_ties_break_by_id() {
        let train = vec![ex("u", "c"), ex("u", "b"), ex("v", "c"), ex("w", "a")];
        let catalog: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        assert_eq!(popularity_ranking(&train, &catalog), ["c", "a", "b", "d"]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(Vec::new()), 0.0);
    }

    #[test]
    fn narrow_beam_is_rejected() {
        let cfg = EvalConfig {
            ks: vec![5, 10],
            beam_width: 8,
            ..EvalConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(EvalError::BeamTooNarrow { beam: 8, k: 10 })));
    }
}
