use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::warn;

use super::templates::coldstart_prompt;
use super::{AlignmentExample, ChatMessage, CorpusError, TaskTag, TeacherClient};
use crate::dataio::Item;
use crate::quantizer::SidAssignment;
use crate::sidspace::SidVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnrichKind {
    Item,
    User,
}

/// Where enrichment paragraphs come from.
pub enum Enricher {
    /// Deterministic template paragraphs; no network.
    Fallback,
    Teacher(TeacherClient),
}

const ANALYST: &str = "You are an expert recommendation system analyst analyzing user behavior patterns.\n\nYour goal is to reason through the user's  history and predict what the item the user would be interested in, explaining your reasoning process from your analytical perspective in first person.";

fn metadata(item: &Item) -> String {
    format!(
        "Title: {}\nBrand: unknown\nCategory: {}\nDescription: {}\nFeatures: none listed",
        item.title, item.category, item.description
    )
}

fn item_stage1(item: &Item) -> String {
    format!(
        "{ANALYST}\n\nBased on the following product information, generate a comprehensive analysis:\n\n{}\n\nPlease provide:\n\n1. A detailed 2-3 sentence description\n\n2. 2-3 main use cases\n\n3. Target audience\n\n4. 3-5 key features summary\n\n5. 5-8 related keywords",
        metadata(item)
    )
}

fn item_stage2(item: &Item, sid: &str, stage1: &str) -> String {
    format!(
        "You are a senior copywriter preparing an in-depth narrative for a product dossier.\n\n- Source Meta Information: {meta}\n\n- Product Semantic Identifier (use this exact string whenever you mention the product): {sid}\n\n- Enrichment from Stage 1: {stage1}\n\nTask:\n\n1. Combine ALL of the information above into a single rich and coherent narrative of at least 10 sentences. Include every important fact,Detailed Description,scenario,Target Audience,audience insight, feature highlight, and keyword context that appears in the sources.\n\n2. Every reference to the product must use the identifier {sid}. Do NOT use the title or any other alias.\n\n3. Ensure the result reads like a rich, flowing paragraph (no bullet points, headings, or enumerations). Maintain a professional and descriptive tone suitable for a product catalog.\n\n4. Highlight how {sid} fits different use cases, why its features matter, and draw from both original data and first-stage enhancements without omitting details.",
        meta = metadata(item).replace('\n', ", ")
    )
}

fn user_stage1(history: &[&Item], next: &Item) -> String {
    let titles: Vec<String> = history.iter().map(|i| i.title.clone()).collect();
    let descs: Vec<String> = history.iter().map(|i| format!("{}: {}", i.title, i.description)).collect();
    format!(
        "{ANALYST}\n\nGiven user interaction history, item descriptions, and reference next item, produce a concise first-person reasoning from an analyst's perspective to predict what kind of item the user may like in the next interactions. The reference item is only for internal guidance—reason entirely based on interaction history and item descriptions. Never mention or discuss the reference item in your reasoning. Write as a genuine real-time prediction analyzing user behavior patterns.\n\nUser Interaction history: {}\n\nReference next item: {}\n\nItem Descriptions:{}\n\nOUTPUT REQUIREMENTS:\n\n1. Output ONLY reasoning monologue in first person (I) as an analyst. Keep concise but detailed.Vary sentence structures to avoid repetition.\n\n2. Analyze general user preferences (genres, themes, attributes, motivations) and engagement patterns based on history.\n\n3. Express potential interests or tendencies rather than deterministic conclusions or single outcomes.\n\n4. Adapt depth to history length: brief key observations for short histories; step-by-step tracing of interest shifts for longer ones. Base predictions on observed patterns.\n\n5. CRITICAL: Always use ONLY the SID format when referring to items. Never use titles, names, or 'Item SID:' prefixes.\n\n6. Never mention 'reference item' or imply knowledge of the target. Reason as if predicting blindly.\n\n7. Start directly with reasoning. Do NOT predict a specific next item. End with a non-deterministic summary of likely interests (e.g., 'may enjoy', 'tends to prefer').\n\nYour Reasoning:",
        titles.join(", "),
        next.title,
        descs.join("; ")
    )
}

fn user_stage2(history: &[(&Item, String)], next: (&Item, &str), reasoning: &str) -> String {
    let hist: Vec<String> = history.iter().map(|(i, s)| format!("{} {}", i.title, s)).collect();
    format!(
        "Integrate the following information into a single, coherent, natural narrative paragraph:\n\nUser interaction history: {}\n\nReference next item: {} {}\n\nReasoning path from stage 1 {}\n\nOUTPUT REQUIREMENTS:\n\n1. Start your narrative by explicitly reciting the full 'User Interaction history (chronological item SIDs)' sequence EXACTLY as provided, but use varied and natural opening phrases. Ensure the full sequence is included to establish context.\n\n2. Write in a natural, flowing style—avoid mechanical or formulaic language in the subsequent analysis. Make it read like a genuine narrative.\n\n3. Preserve the essential reasoning insights from the reasoning path—don't just summarize, but naturally incorporate the key analytical points and logic.\n\n4. When mentioning any item, ALWAYS use its SID (format: <a_XXX><b_YYY><c_ZZZ>)—never use item titles or names.\n\n5. Keep the narrative natural and engaging.\n\nIntegrated Narrative:",
        hist.join(", "),
        next.0.title,
        next.1,
        reasoning
    )
}

/// Item paragraphs must name the product by SID at least twice and never
/// by title.
pub fn validate_item_paragraph(text: &str, sid: &str, title: &str) -> bool {
    let t = title.trim().to_lowercase();
    text.matches(sid).count() >= 2 && (t.is_empty() || !text.to_lowercase().contains(&t))
}

/// User paragraphs must contain every history SID.
pub fn validate_user_paragraph(text: &str, history_sids: &[String]) -> bool {
    history_sids.iter().all(|s| text.contains(s.as_str()))
}

fn sid_of(assignment: &SidAssignment, item: &Item) -> Result<String, CorpusError> {
    assignment
        .render(&item.item_id)
        .ok_or_else(|| CorpusError::MissingSid(item.item_id.clone()))
}

fn remove_ci(text: &str, needle: &str, with: &str) -> String {
    let n = needle.trim();
    if n.is_empty() {
        return text.to_string();
    }
    let lower = text.to_lowercase();
    let nl = n.to_lowercase();
    if lower.len() != text.len() {
        // non-ASCII case folding changed byte offsets; fall back to exact match
        return text.replace(n, with);
    }
    let mut out = String::new();
    let mut pos = 0;
    while let Some(i) = lower[pos..].find(&nl) {
        out.push_str(&text[pos..pos + i]);
        out.push_str(with);
        pos += i + nl.len();
    }
    out.push_str(&text[pos..]);
    out
}

fn fallback_item(item: &Item, sid: &str, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let desc = remove_ci(&item.description, &item.title, sid);
    let open = [
        format!("Introducing {sid}, a {} item.", item.category),
        format!("{sid} is an item from the {} category.", item.category),
        format!("Meet {sid}, part of the {} range.", item.category),
    ];
    let close = [
        format!("People who enjoy {} items may well like {sid}.", item.category),
        format!("For fans of {}, {sid} is a natural pick.", item.category),
        format!("{sid} suits anyone exploring {} items.", item.category),
    ];
    format!(
        "{} It is described as {}. {}",
        open.choose(&mut rng).unwrap(),
        desc.trim_end_matches('.'),
        close.choose(&mut rng).unwrap()
    )
}

fn most_common<'a>(cats: &[&'a str]) -> &'a str {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in cats {
        *counts.entry(c).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    // latest category among the most frequent ones
    cats.iter().rev().find(|c| counts[*c] == max).copied().unwrap_or("")
}

/// SID-free reasoning about a history, built from item categories only.
fn fallback_reasoning(history: &[&Item], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats: Vec<&str> = history.iter().map(|i| i.category.as_str()).collect();
    let last = cats[cats.len() - 1];
    let mut parts = vec![[
        format!("I notice the latest item is a {last} item."),
        format!("The most recent interaction is with a {last} item."),
    ]
    .choose(&mut rng)
    .unwrap()
    .clone()];
    if cats.len() >= 2 {
        parts.push(format!("Before that the user chose a {} item.", cats[cats.len() - 2]));
    }
    parts.push(format!("Overall the history leans toward {} items.", most_common(&cats)));
    parts.push(
        [
            format!("The user tends to move on from {last} to related items and may enjoy what usually follows {last}."),
            format!("Next the user may enjoy an item that often comes after {last}."),
        ]
        .choose(&mut rng)
        .unwrap()
        .clone(),
    );
    parts.join(" ")
}

fn fallback_user(history: &[&Item], sids: &[String], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let list = sids.join(", ");
    let open = [
        format!("The user has engaged with {list} in this order."),
        format!("Over time the user interacted with {list}."),
        format!("The history reads {list}."),
    ];
    format!("{} {}", open.choose(&mut rng).unwrap(), fallback_reasoning(history, seed))
}

fn has_sid_token(s: &str) -> bool {
    s.match_indices('<').any(|(i, _)| {
        s[i..]
            .find('>')
            .is_some_and(|j| SidVocab::parse_token(&s[i..i + j + 1]).is_some())
    })
}

/// Keeps the sentences of a narrative that mention no SID; used to turn a
/// user paragraph into a reasoning span that precedes the answer.
pub fn reasoning_from_narrative(text: &str) -> String {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        cur.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            out.push(std::mem::take(&mut cur));
        }
    }
    out.push(cur);
    let kept: Vec<String> = out
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty() && !has_sid_token(s))
        .map(str::to_string)
        .collect();
    kept.join(" ")
}

impl Enricher {
    fn teacher_two_stage(&self, first: String, second: impl Fn(&str) -> String, valid: impl Fn(&str) -> bool) -> Option<String> {
        let Enricher::Teacher(client) = self else { return None };
        for attempt in 0..2 {
            let result = client
                .chat(&[ChatMessage::user(first.clone())])
                .and_then(|s1| client.chat(&[ChatMessage::user(second(&s1))]));
            match result {
                Ok(text) if valid(&text) => return Some(text.trim().to_string()),
                Ok(_) => warn!(attempt, "teacher paragraph failed validation"),
                Err(e) => warn!(attempt, error = %e, "teacher request failed"),
            }
        }
        warn!("falling back to template paragraph");
        None
    }
}

/// Item-centric paragraph that refers to the item only through its SID.
pub fn item_enrichment(item: &Item, assignment: &SidAssignment, enricher: &Enricher, seed: u64) -> Result<AlignmentExample, CorpusError> {
    let sid = sid_of(assignment, item)?;
    let valid = |t: &str| validate_item_paragraph(t, &sid, &item.title);
    let text = enricher
        .teacher_two_stage(item_stage1(item), |s1| item_stage2(item, &sid, s1), valid)
        .unwrap_or_else(|| fallback_item(item, &sid, seed));
    debug_assert!(valid(&text));
    let mut ex = AlignmentExample::new(TaskTag::ItemEnrich, "", text);
    ex.mask_prompt = false;
    Ok(ex)
}

/// User-centric narrative that opens by reciting the history SIDs.
pub fn user_enrichment(
    history: &[&Item],
    next: &Item,
    assignment: &SidAssignment,
    enricher: &Enricher,
    seed: u64,
) -> Result<AlignmentExample, CorpusError> {
    if history.is_empty() {
        return Err(CorpusError::WrongInput {
            case: 8,
            what: "a non-empty history",
        });
    }
    let sids = history.iter().map(|i| sid_of(assignment, i)).collect::<Result<Vec<_>, _>>()?;
    let next_sid = sid_of(assignment, next)?;
    let pairs: Vec<(&Item, String)> = history.iter().copied().zip(sids.iter().cloned()).collect();
    let valid = |t: &str| validate_user_paragraph(t, &sids);
    let text = enricher
        .teacher_two_stage(user_stage1(history, next), |s1| user_stage2(&pairs, (next, &next_sid), s1), valid)
        .unwrap_or_else(|| fallback_user(history, &sids, seed));
    let mut ex = AlignmentExample::new(TaskTag::UserEnrich, "", text);
    ex.mask_prompt = false;
    Ok(ex)
}

/// Reason-then-recommend example: compact history prompt, target =
/// SID-free reasoning followed by the next item's SID.
pub fn coldstart_example(
    history: &[&Item],
    next: &Item,
    assignment: &SidAssignment,
    narrative: &str,
) -> Result<AlignmentExample, CorpusError> {
    let sids = history.iter().map(|i| sid_of(assignment, i)).collect::<Result<Vec<_>, _>>()?;
    let next_sid = sid_of(assignment, next)?;
    let mut reasoning = reasoning_from_narrative(narrative);
    if reasoning.is_empty() {
        reasoning = fallback_reasoning(history, 0);
    }
    Ok(AlignmentExample::new(
        TaskTag::ColdstartReason,
        coldstart_prompt(&sids),
        format!("{reasoning} {next_sid}"),
    ))
}
