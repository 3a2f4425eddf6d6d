//! Semantic-ID token surface, catalog trie, output parsing and rewards.
//!
//! Tokens are rendered `<a_i><b_j><c_k>`, one letter per level in order,
//! with an optional trailing `<d_n>` disambiguation token when the catalog
//! contains code collisions.

mod parse;
mod reward;
mod trie;

pub use parse::{parse_sid_text, ParsedSid};
pub use reward::{compute_reward, compute_reward_text, stepwise_reward, RewardBreakdown};
pub use trie::{build_trie, NextCodes, SidTrie};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One item's code tuple plus its disambiguation index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<u32>,
    #[serde(default)]
    pub disambiguation: u32,
}

impl SemanticId {
    pub fn new(codes: Vec<u32>, disambiguation: u32) -> Self {
        Self { codes, disambiguation }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SidError {
    #[error("duplicate SID path {0:?} for items `{1}` and `{2}`")]
    DuplicatePath(Vec<u32>, String, String),
    #[error("ground-truth SID {0:?} is not in the catalog trie")]
    UnknownTruth(Vec<u32>),
    #[error("SID has {got} levels, expected {expected}")]
    WrongLength { expected: usize, got: usize },
}

/// Level letter for a zero-based level index.
pub fn level_letter(level: usize) -> char {
    (b'a' + level as u8) as char
}

/// Token renderer/parser for `levels` semantic levels.
///
/// `suffix_size > 0` adds one disambiguation level after the semantic ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidVocab {
    pub levels: usize,
    pub codebook_size: usize,
    pub suffix_size: usize,
}

impl SidVocab {
    pub fn new(levels: usize, codebook_size: usize, suffix_size: usize) -> Self {
        assert!(levels + usize::from(suffix_size > 0) <= 26);
        Self {
            levels,
            codebook_size,
            suffix_size,
        }
    }

    pub fn has_suffix(&self) -> bool {
        self.suffix_size > 0
    }

    /// Number of tokens in a full rendered SID.
    pub fn path_len(&self) -> usize {
        self.levels + usize::from(self.has_suffix())
    }

    pub fn token(level: usize, code: u32) -> String {
        format!("<{}_{}>", level_letter(level), code)
    }

    /// Every token this vocabulary can emit, level by level.
    pub fn all_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            for k in 0..self.codebook_size {
                out.push(Self::token(l, k as u32));
            }
        }
        for k in 0..self.suffix_size {
            out.push(Self::token(self.levels, k as u32));
        }
        out
    }

    /// Full token path for an item: semantic codes, then the suffix if enabled.
    pub fn path(&self, sid: &SemanticId) -> Vec<u32> {
        let mut p = sid.codes.clone();
        if self.has_suffix() {
            p.push(sid.disambiguation);
        }
        p
    }

    pub fn render(&self, sid: &SemanticId) -> String {
        self.path(sid)
            .iter()
            .enumerate()
            .map(|(l, &c)| Self::token(l, c))
            .collect()
    }

    /// Parses a single token such as `<b_17>` into `(level, code)`.
    pub fn parse_token(tok: &str) -> Option<(usize, u32)> {
        let inner = tok.strip_prefix('<')?.strip_suffix('>')?;
        let mut chars = inner.chars();
        let letter = chars.next()?;
        if !letter.is_ascii_lowercase() || chars.next()? != '_' {
            return None;
        }
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || (digits.len() > 1 && digits.starts_with('0')) {
            return None;
        }
        Some(((letter as u8 - b'a') as usize, digits.parse().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_appendix_style() {
        let v = SidVocab::new(3, 256, 0);
        assert_eq!(v.render(&SemanticId::new(vec![195, 133, 138], 0)), "<a_195><b_133><c_138>");
        let v = SidVocab::new(3, 256, 4);
        assert_eq!(v.render(&SemanticId::new(vec![1, 2, 3], 2)), "<a_1><b_2><c_3><d_2>");
    }

    #[test]
    fn tokens_unique_across_levels() {
        let v = SidVocab::new(3, 16, 3);
        let toks = v.all_tokens();
        let set: std::collections::HashSet<_> = toks.iter().collect();
        assert_eq!(set.len(), toks.len());
        assert_eq!(toks.len(), 3 * 16 + 3);
    }

    #[test]
    fn rejects_malformed_tokens() {
        for bad in ["<a_>", "<a5>", "<A_5>", "a_5", "<a_05>", "<a_-1>", "<ab_1>"] {
            assert_eq!(SidVocab::parse_token(bad), None, "{bad}");
        }
    }

    proptest! {
        #[test]
        fn token_roundtrip(level in 0usize..4, code in 0u32..100_000) {
            prop_assert_eq!(SidVocab::parse_token(&SidVocab::token(level, code)), Some((level, code)));
        }
    }
}
