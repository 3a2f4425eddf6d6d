//! Alignment corpus: templated translation and next-item tasks,
//! enrichment paragraphs (teacher model or offline fallback), general
//! reasoning examples, cold-start reasoning examples and mixture assembly.

mod enrich;
mod general;
mod mixture;
mod sources;
mod teacher;
mod templates;

pub use enrich::{
    coldstart_example, item_enrichment, reasoning_from_narrative, user_enrichment, validate_item_paragraph,
    validate_user_paragraph, EnrichKind, Enricher,
};
pub use general::general_reasoning_examples;
pub use mixture::{apportion, build_mixture, MixtureSpec};
pub use sources::{build_sources, CorpusSources};
pub use teacher::{teacher_chat, ChatMessage, Sleeper, TeacherClient, TeacherConfig};
pub use templates::{
    chat_prompt, coldstart_prompt, quote_title, render_alignment_example, sequence_prompt, CaseInput, SYSTEM_PREAMBLE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Title2sid,
    Sid2title,
    Seqsid2title,
    Seqtitle2title,
    Seqsid2sid,
    Seqtitle2sid,
    ItemEnrich,
    UserEnrich,
    General,
    ColdstartReason,
}

impl TaskTag {
    pub const ALL: [TaskTag; 10] = [
        TaskTag::Title2sid,
        TaskTag::Sid2title,
        TaskTag::Seqsid2title,
        TaskTag::Seqtitle2title,
        TaskTag::Seqsid2sid,
        TaskTag::Seqtitle2sid,
        TaskTag::ItemEnrich,
        TaskTag::UserEnrich,
        TaskTag::General,
        TaskTag::ColdstartReason,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Title2sid => "title2sid",
            TaskTag::Sid2title => "sid2title",
            TaskTag::Seqsid2title => "seqsid2title",
            TaskTag::Seqtitle2title => "seqtitle2title",
            TaskTag::Seqsid2sid => "seqsid2sid",
            TaskTag::Seqtitle2sid => "seqtitle2sid",
            TaskTag::ItemEnrich => "item_enrich",
            TaskTag::UserEnrich => "user_enrich",
            TaskTag::General => "general",
            TaskTag::ColdstartReason => "coldstart_reason",
        }
    }

    /// Template case number for the six templated tasks.
    pub fn case(self) -> Option<u8> {
        Some(match self {
            TaskTag::Title2sid => 1,
            TaskTag::Sid2title => 2,
            TaskTag::Seqsid2title => 3,
            TaskTag::Seqtitle2title => 4,
            TaskTag::Seqsid2sid => 5,
            TaskTag::Seqtitle2sid => 6,
            _ => return None,
        })
    }
}

fn yes() -> bool {
    true
}

/// One supervised example. The loss covers `target` only when
/// `mask_prompt` is set (the default); enrichment paragraphs have an empty
/// prompt and are trained as plain text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentExample {
    pub task_tag: TaskTag,
    pub prompt: String,
    pub target: String,
    #[serde(default = "yes")]
    pub mask_prompt: bool,
}

impl AlignmentExample {
    pub fn new(task_tag: TaskTag, prompt: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            task_tag,
            prompt: prompt.into(),
            target: target.into(),
            mask_prompt: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("item `{0}` has no semantic ID")]
    MissingSid(String),
    #[error("case {0} is not a templated task (expected 1..=6)")]
    UnknownCase(u8),
    #[error("case {case} needs {what}")]
    WrongInput { case: u8, what: &'static str },
    #[error("teacher configuration: {0}")]
    Config(String),
    #[error("teacher request failed after {attempts} attempt(s) (last status {status:?}): {message}")]
    Transport {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("teacher response malformed: {0}")]
    BadResponse(String),
    #[error("task `{0}` has positive weight but no examples")]
    EmptySource(&'static str),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error(transparent)]
    Data(#[from] DataError),
}
