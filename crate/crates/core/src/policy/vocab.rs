use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpusgen::AlignmentExample;
use crate::sidspace::SidVocab;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";
const ROLES: [&str; 3] = ["system", "user", "assistant"];
const SPECIALS: [&str; 5] = [PAD, UNK, END_OF_TEXT, IM_START, IM_END];

/// Unified vocabulary: specials, role words, every SID token, then language
/// words in lexicographic order.
///
/// Text is tokenized by first cutting out special and SID tokens, then
/// splitting the rest on whitespace and lowercasing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct VocabSpec {
    tokens: Vec<String>,
    sid: SidVocab,
    sid_base: u32,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    sid: SidVocab,
    tokens: Vec<String>,
}

impl From<VocabRepr> for VocabSpec {
    fn from(r: VocabRepr) -> Self {
        Self::from_tokens(r.sid, r.tokens)
    }
}

impl From<VocabSpec> for VocabRepr {
    fn from(v: VocabSpec) -> Self {
        Self { sid: v.sid, tokens: v.tokens }
    }
}

impl PartialEq for VocabSpec {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.sid == other.sid
    }
}

impl VocabSpec {
    /// Builds from specials + SID tokens + the given words (deduplicated).
    pub fn new(sid: SidVocab, words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().chain(ROLES.iter()).map(|s| s.to_string()).collect();
        tokens.extend(sid.all_tokens());
        let fixed: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut extra: Vec<String> = words.into_iter().filter(|w| !fixed.contains(w)).collect();
        extra.sort();
        extra.dedup();
        tokens.extend(extra);
        Self::from_tokens(sid, tokens)
    }

    fn from_tokens(sid: SidVocab, tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            tokens,
            sid,
            sid_base: (SPECIALS.len() + ROLES.len()) as u32,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sid_vocab(&self) -> &SidVocab {
        &self.sid
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn unk(&self) -> u32 {
        1
    }

    pub fn end_of_text(&self) -> u32 {
        2
    }

    pub fn im_start(&self) -> u32 {
        3
    }

    pub fn im_end(&self) -> u32 {
        4
    }

    /// Ids that close or frame a turn.
    pub fn is_control(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len() && id != self.unk()
    }

    /// Token id of `<level_code>`; `level == levels` addresses the suffix.
    pub fn sid_token(&self, level: usize, code: u32) -> Option<u32> {
        let k = self.sid.codebook_size as u32;
        if level < self.sid.levels && code < k {
            Some(self.sid_base + level as u32 * k + code)
        } else if level == self.sid.levels && (code as usize) < self.sid.suffix_size {
            Some(self.sid_base + self.sid.levels as u32 * k + code)
        } else {
            None
        }
    }

    /// Inverse of [`sid_token`](Self::sid_token).
    pub fn sid_of(&self, id: u32) -> Option<(usize, u32)> {
        let k = self.sid.codebook_size as u32;
        let off = id.checked_sub(self.sid_base)?;
        let semantic = self.sid.levels as u32 * k;
        if off < semantic {
            Some(((off / k) as usize, off % k))
        } else if off < semantic + self.sid.suffix_size as u32 {
            Some((self.sid.levels, off - semantic))
        } else {
            None
        }
    }

    /// Splits text into special/SID tokens and lowercased whitespace words.
    pub fn pieces(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut plain = String::new();
        let flush = |plain: &mut String, out: &mut Vec<String>| {
            out.extend(plain.split_whitespace().map(str::to_lowercase));
            plain.clear();
        };
        let mut rest = text;
        while let Some(pos) = rest.find('<') {
            plain.push_str(&rest[..pos]);
            rest = &rest[pos..];
            let special = rest.find('>').map(|j| &rest[..=j]).filter(|cand| {
                SPECIALS.contains(cand) || SidVocab::parse_token(cand).is_some_and(|(l, c)| self.sid_token(l, c).is_some())
            });
            match special {
                Some(tok) => {
                    flush(&mut plain, &mut out);
                    out.push(tok.to_string());
                    rest = &rest[tok.len()..];
                }
                None => {
                    plain.push('<');
                    rest = &rest[1..];
                }
            }
        }
        plain.push_str(rest);
        flush(&mut plain, &mut out);
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.pieces(text).iter().map(|p| self.id(p).unwrap_or(self.unk())).collect()
    }

    /// Space-joined tokens; consecutive SID tokens are written without a gap.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_sid = false;
        for &id in ids {
            let Some(tok) = self.token(id) else { continue };
            let is_sid = self.sid_of(id).is_some();
            if !out.is_empty() && !(prev_sid && is_sid) {
                out.push(' ');
            }
            out.push_str(tok);
            prev_sid = is_sid;
        }
        out
    }
}

/// Vocabulary over a corpus: every SID token and special unconditionally,
/// plus words seen at least `min_freq` times.
pub fn build_vocab(corpus: &[AlignmentExample], sid: SidVocab, min_freq: usize) -> VocabSpec {
    let probe = VocabSpec::new(sid.clone(), std::iter::empty());
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for ex in corpus {
        for text in [&ex.prompt, &ex.target] {
            for p in probe.pieces(text) {
                if probe.id(&p).is_none() {
                    *counts.entry(p).or_default() += 1;
                }
            }
        }
    }
    VocabSpec::new(sid, counts.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).map(|(w, _)| w))
}
