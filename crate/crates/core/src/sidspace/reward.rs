use serde::{Deserialize, Serialize};

use super::{parse_sid_text, ParsedSid, SemanticId, SidError, SidTrie};

/// Reward for one generated answer against the ground-truth item.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Longest correct prefix over the semantic levels.
    pub m: usize,
    pub r_sr: f64,
    pub r_f: f64,
    pub lambda: f64,
    pub total: f64,
    pub parsed: bool,
}

/// `2^-(levels - m)`
pub fn stepwise_reward(levels: usize, m: usize) -> f64 {
    0.5f64.powi((levels - m.min(levels)) as i32)
}

/// `total = r_sr + λ·r_f`, or exactly zero when the answer did not parse.
///
/// `m` is measured over the semantic levels only; the format term asks the
/// trie whether the full predicted path (suffix included) names an item.
pub fn compute_reward(
    predicted: &ParsedSid,
    truth: &SemanticId,
    trie: &SidTrie,
    lambda: f64,
) -> Result<RewardBreakdown, SidError> {
    let vocab = trie.vocab();
    let levels = vocab.levels;
    if truth.codes.len() != levels {
        return Err(SidError::WrongLength {
            expected: levels,
            got: truth.codes.len(),
        });
    }
    if trie.lookup(&vocab.path(truth)).is_none() {
        return Err(SidError::UnknownTruth(vocab.path(truth)));
    }
    let ParsedSid::Codes { codes, .. } = predicted else {
        return Ok(RewardBreakdown {
            m: 0,
            r_sr: 0.0,
            r_f: 0.0,
            lambda,
            total: 0.0,
            parsed: false,
        });
    };
    let m = codes.iter().zip(&truth.codes).take_while(|(a, b)| a == b).count();
    let r_sr = stepwise_reward(levels, m);
    let path = predicted.path().unwrap_or_default();
    let r_f = if trie.lookup(&path).is_some() { 1.0 } else { 0.0 };
    Ok(RewardBreakdown {
        m,
        r_sr,
        r_f,
        lambda,
        total: r_sr + lambda * r_f,
        parsed: true,
    })
}

pub fn compute_reward_text(text: &str, truth: &SemanticId, trie: &SidTrie, lambda: f64) -> Result<RewardBreakdown, SidError> {
    compute_reward(&parse_sid_text(text, trie.vocab().levels), truth, trie, lambda)
}
