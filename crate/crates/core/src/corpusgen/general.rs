use serde::Deserialize;

use super::templates::{chat_prompt, SYSTEM_PREAMBLE};
use super::{AlignmentExample, TaskTag};

const FIXTURE: &str = include_str!("../../data/general_reasoning.jsonl");

#[derive(Deserialize)]
struct Row {
    question: String,
    answer: String,
}

/// Small committed set of step-by-step arithmetic word problems, mixed in to
/// keep plain-language reasoning in the corpus.
pub fn general_reasoning_examples() -> Vec<AlignmentExample> {
    FIXTURE
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: Row = serde_json::from_str(l).expect("committed fixture is valid");
            AlignmentExample::new(TaskTag::General, chat_prompt(SYSTEM_PREAMBLE, &row.question), row.answer)
        })
        .collect()
}
