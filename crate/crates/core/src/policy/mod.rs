//! Tiny decoder-only policy over words and SID tokens: supervised training,
//! reason-then-recommend sampling, constrained ranking and scoring.

mod checkpoint;
mod generate;
mod model;
mod sft;
mod transcript;
mod vocab;

pub use checkpoint::{load_policy, save_policy, CHECKPOINT_VERSION};
pub use generate::{generate, generate_from, prefill, rank_topk, DecodeOptions, GenerationOutput, RankedItem, StopReason};
pub use model::{log_softmax, param_shapes, KvCache, Policy};
pub use sft::{encode_example, sft_loss, sid_accuracy, train_sft, EncodedExample, SftEpoch, SftOutcome, SftSchedule, SftStage, SidProbe};
pub use transcript::{context_hash, TranscriptRecord};
pub use vocab::{build_vocab, VocabSpec, END_OF_TEXT, IM_END, IM_START, PAD, UNK};

pub(crate) use model::forward_logits;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 128,
            ff_width: 512,
            context_len: 512,
            seed: 17,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.ff_width == 0 || self.context_len < 2 {
            return bad("layers, heads, width, ff_width must be positive and context_len >= 2");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        Ok(())
    }
}

/// Which training stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Aligned,
    Activated,
    Rl,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Aligned => "aligned",
            Stage::Activated => "activated",
            Stage::Rl => "rl",
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("example {index} needs {len} tokens but the context holds {max}")]
    ContextOverflow { index: usize, len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("scoring needs a non-empty context")]
    EmptyContext,
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("asked for top {k} of a {catalog}-item catalog")]
    TooManyRequested { k: usize, catalog: usize },
    #[error("beam width {beam} is smaller than k = {k}")]
    BeamTooNarrow { beam: usize, k: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
