use super::{AlignmentExample, CorpusError, TaskTag};
use crate::dataio::Item;
use crate::quantizer::SidAssignment;

pub const SYSTEM_PREAMBLE: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.";

const REASON_SYSTEM: &str = "Think about the user's interests step by step, then recommend the next item.";

/// Chat framing shared by every templated prompt; ends where the assistant
/// turn begins.
pub fn chat_prompt(system: &str, user: &str) -> String {
    format!("<|im_start|>system\n{system}<|im_end|>\n<|im_start|>user\n{user}<|im_end|>\n<|im_start|>assistant\n")
}

pub fn quote_title(title: &str) -> String {
    format!("\"{title}\"")
}

/// Input of a templated case: a single item (cases 1–2) or a history and
/// the next item (cases 3–6).
#[derive(Clone, Copy, Debug)]
pub enum CaseInput<'a> {
    Item(&'a Item),
    Sequence { history: &'a [&'a Item], next: &'a Item },
}

fn sid(assignment: &SidAssignment, item: &Item) -> Result<String, CorpusError> {
    assignment
        .render(&item.item_id)
        .ok_or_else(|| CorpusError::MissingSid(item.item_id.clone()))
}

fn sid_list(assignment: &SidAssignment, items: &[&Item]) -> Result<String, CorpusError> {
    Ok(items.iter().map(|i| sid(assignment, i)).collect::<Result<Vec<_>, _>>()?.join(", "))
}

fn title_list(items: &[&Item]) -> String {
    items.iter().map(|i| quote_title(&i.title)).collect::<Vec<_>>().join(", ")
}

/// Next-SID prompt (case 5 wording) for a history of rendered SIDs.
pub fn sequence_prompt(history_sids: &[String]) -> String {
    let system = format!("{SYSTEM_PREAMBLE} Can you predict the next possible item that the user may expect?");
    let user = format!(
        "The user has interacted with items {} in chronological order. Can you predict the next possible item that the user may expect?\n",
        history_sids.join(", ")
    );
    chat_prompt(&system, &user)
}

/// Compact prompt for reason-then-recommend generation.
pub fn coldstart_prompt(history_sids: &[String]) -> String {
    chat_prompt(REASON_SYSTEM, &history_sids.join(", "))
}

/// Renders templated case 1–6; the target is exactly the answer span.
pub fn render_alignment_example(case: u8, input: CaseInput<'_>, assignment: &SidAssignment) -> Result<AlignmentExample, CorpusError> {
    fn item_case(case: u8, input: CaseInput<'_>) -> Result<&Item, CorpusError> {
        match input {
            CaseInput::Item(i) => Ok(i),
            CaseInput::Sequence { .. } => Err(CorpusError::WrongInput { case, what: "a single item" }),
        }
    }
    fn seq_case<'a>(case: u8, input: CaseInput<'a>) -> Result<(&'a [&'a Item], &'a Item), CorpusError> {
        match input {
            CaseInput::Sequence { history, next } if !history.is_empty() => Ok((history, next)),
            _ => Err(CorpusError::WrongInput {
                case,
                what: "a non-empty history and a next item",
            }),
        }
    }
    let id_system = format!("{SYSTEM_PREAMBLE}\nAnswer the question about item identification.");
    Ok(match case {
        1 => {
            let item = item_case(case, input)?;
            let user = format!("Which item has the title: {}?", quote_title(&item.title));
            AlignmentExample::new(TaskTag::Title2sid, chat_prompt(&id_system, &user), sid(assignment, item)?)
        }
        2 => {
            let item = item_case(case, input)?;
            let user = format!("What is the title of item {}?", sid(assignment, item)?);
            AlignmentExample::new(TaskTag::Sid2title, chat_prompt(&id_system, &user), quote_title(&item.title))
        }
        3 => {
            let (history, next) = seq_case(case, input)?;
            let system = format!("{SYSTEM_PREAMBLE}Can you recommend the next item for the user based on their interaction history?");
            let user = format!(
                "The user has sequentially interacted with items {}. Can you recommend the next item for him? Tell me the title of the item?",
                sid_list(assignment, history)?
            );
            AlignmentExample::new(TaskTag::Seqsid2title, chat_prompt(&system, &user), quote_title(&next.title))
        }
        4 => {
            let (history, next) = seq_case(case, input)?;
            let system = format!(
                "{SYSTEM_PREAMBLE}Given a list of games the user recently enjoy, please write a new game that the user may bought."
            );
            let user = format!("The user has played the following games before:{}?", title_list(history));
            AlignmentExample::new(TaskTag::Seqtitle2title, chat_prompt(&system, &user), quote_title(&next.title))
        }
        5 => {
            let (history, next) = seq_case(case, input)?;
            let sids = history.iter().map(|i| sid(assignment, i)).collect::<Result<Vec<_>, _>>()?;
            AlignmentExample::new(TaskTag::Seqsid2sid, sequence_prompt(&sids), sid(assignment, next)?)
        }
        6 => {
            let (history, next) = seq_case(case, input)?;
            let system = format!(
                "{SYSTEM_PREAMBLE} Based on the user's historical interaction with item titles, predict the semantic ID of the next item they may expect."
            );
            let user = format!(
                "The user has interacted with the following games items in chronological order: {}. Can you predict the next item the user may expect?\n",
                title_list(history)
            );
            AlignmentExample::new(TaskTag::Seqtitle2sid, chat_prompt(&system, &user), sid(assignment, next)?)
        }
        other => return Err(CorpusError::UnknownCase(other)),
    })
}
