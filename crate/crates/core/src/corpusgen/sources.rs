use std::collections::{BTreeMap, HashMap};

use super::{
    coldstart_example, general_reasoning_examples, item_enrichment, render_alignment_example, user_enrichment,
    AlignmentExample, CaseInput, CorpusError, Enricher, TaskTag,
};
use crate::dataio::{Item, SplitExample};
use crate::quantizer::SidAssignment;

/// Per-task example pools plus the cold-start set used for activation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSources {
    pub by_tag: BTreeMap<TaskTag, Vec<AlignmentExample>>,
    pub coldstart: Vec<AlignmentExample>,
}

fn example_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Index-ordered map with at most `limit` calls in flight.
fn map_limited<T: Send>(n: usize, limit: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if limit <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(limit) {
        let end = (start + limit).min(n);
        let chunk: Vec<T> = std::thread::scope(|s| {
            let handles: Vec<_> = (start..end).map(|i| {
                let f = &f;
                s.spawn(move || f(i))
            }).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        out.extend(chunk);
    }
    out
}

/// Builds every task pool from the catalog and training sequences.
///
/// Translation and enrichment tasks use one example per item; sequence
/// tasks and user narratives use one per training example. Cold-start
/// examples reuse each user narrative's reasoning sentences.
pub fn build_sources(
    items: &[Item],
    train: &[SplitExample],
    assignment: &SidAssignment,
    enricher: &Enricher,
    seed: u64,
) -> Result<CorpusSources, CorpusError> {
    let by_id: HashMap<&str, &Item> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let lookup = |id: &str| by_id.get(id).copied().ok_or_else(|| CorpusError::MissingSid(id.to_string()));
    let mut by_tag: BTreeMap<TaskTag, Vec<AlignmentExample>> = BTreeMap::new();
    let mut push = |ex: AlignmentExample| by_tag.entry(ex.task_tag).or_default().push(ex);

    for item in items {
        push(render_alignment_example(1, CaseInput::Item(item), assignment)?);
        push(render_alignment_example(2, CaseInput::Item(item), assignment)?);
    }
    let mut seqs: Vec<(Vec<&Item>, &Item)> = Vec::with_capacity(train.len());
    for ex in train.iter().filter(|e| !e.history.is_empty()) {
        let hist = ex.history.iter().map(|h| lookup(h)).collect::<Result<Vec<_>, _>>()?;
        seqs.push((hist, lookup(&ex.target)?));
    }
    for (hist, next) in &seqs {
        for case in 3..=6 {
            push(render_alignment_example(case, CaseInput::Sequence { history: hist, next }, assignment)?);
        }
    }
    let limit = match enricher {
        Enricher::Teacher(c) => c.config().max_in_flight.max(1),
        Enricher::Fallback => 1,
    };
    let item_ex = map_limited(items.len(), limit, |i| item_enrichment(&items[i], assignment, enricher, example_seed(seed, i)));
    for ex in item_ex {
        push(ex?);
    }
    let user_ex = map_limited(seqs.len(), limit, |i| {
        user_enrichment(&seqs[i].0, seqs[i].1, assignment, enricher, example_seed(seed ^ 0xA5A5, i))
    });
    let mut coldstart = Vec::with_capacity(seqs.len());
    for (ex, (hist, next)) in user_ex.into_iter().zip(&seqs) {
        let ex = ex?;
        coldstart.push(coldstart_example(hist, next, assignment, &ex.target)?);
        push(ex);
    }
    for ex in general_reasoning_examples() {
        push(ex);
    }
    for ex in &coldstart {
        push(ex.clone());
    }
    Ok(CorpusSources { by_tag, coldstart })
}
