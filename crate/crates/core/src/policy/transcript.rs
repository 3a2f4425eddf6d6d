use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenerationOutput, StopReason, VocabSpec};
use crate::sidspace::RewardBreakdown;

/// First 16 hex digits of the SHA-256 of a context string.
pub fn context_hash(context: &str) -> String {
    let digest = Sha256::digest(context.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// One line of a generation transcript (JSON-lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub context_hash: String,
    pub reasoning: String,
    pub answer: String,
    pub stop: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
}

impl TranscriptRecord {
    pub fn new(context: &str, out: &GenerationOutput, vocab: &VocabSpec) -> Self {
        Self {
            context_hash: context_hash(context),
            reasoning: out.reasoning_text(vocab),
            answer: out.answer_text(vocab),
            stop: out.stop,
            target: None,
            reward: None,
        }
    }
}
