use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::residual::quantize_residual;
use super::{QuantizerError, QuantizerState};
use crate::dataio::{read_jsonl, write_jsonl, Item};
use crate::sidspace::{SemanticId, SidVocab};

/// Item id → semantic ID, with every `(codes, disambiguation)` pair unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SidAssignment {
    levels: usize,
    codebook_size: usize,
    entries: BTreeMap<String, SemanticId>,
}

/// One line of the SID export file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidRow {
    pub item_id: String,
    pub codes: Vec<u32>,
    pub disambiguation: u32,
}

impl SidAssignment {
    /// Builds an assignment as given, without uniqueness checks; see
    /// [`SidAssignment::validate`].
    pub fn from_entries(levels: usize, codebook_size: usize, entries: impl IntoIterator<Item = (String, SemanticId)>) -> Self {
        Self {
            levels,
            codebook_size,
            entries: entries.into_iter().collect(),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    /// Vocabulary for this catalog: a suffix level exists only if some code
    /// tuple is shared, and then every SID carries it.
    pub fn vocab(&self) -> SidVocab {
        let max = self.entries.values().map(|s| s.disambiguation).max().unwrap_or(0);
        let suffix = if max > 0 { max as usize + 1 } else { 0 };
        SidVocab::new(self.levels, self.codebook_size, suffix)
    }

    pub fn get(&self, item_id: &str) -> Option<&SemanticId> {
        self.entries.get(item_id)
    }

    /// Rendered token string for an item.
    pub fn render(&self, item_id: &str) -> Option<String> {
        let v = self.vocab();
        self.get(item_id).map(|s| v.render(s))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SemanticId)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of items whose code tuple is shared with another item.
    pub fn collided_items(&self) -> usize {
        let mut counts: HashMap<&[u32], usize> = HashMap::new();
        for s in self.entries.values() {
            *counts.entry(&s.codes).or_default() += 1;
        }
        counts.values().filter(|c| **c > 1).sum()
    }

    /// Checks code ranges, pair uniqueness and (optionally) catalog coverage.
    pub fn validate(&self, catalog: Option<&[Item]>) -> Result<(), QuantizerError> {
        let bad = |m: String| Err(QuantizerError::InvalidSidMap(m));
        let mut seen: HashMap<(&[u32], u32), &str> = HashMap::new();
        for (id, s) in &self.entries {
            if s.codes.len() != self.levels {
                return bad(format!("`{id}` has {} codes, expected {}", s.codes.len(), self.levels));
            }
            if s.codes.iter().any(|&c| c as usize >= self.codebook_size) {
                return bad(format!("`{id}` has a code outside 0..{}", self.codebook_size));
            }
            if let Some(other) = seen.insert((&s.codes, s.disambiguation), id) {
                return bad(format!("`{other}` and `{id}` share a semantic ID"));
            }
        }
        if let Some(items) = catalog {
            if let Some(it) = items.iter().find(|it| !self.entries.contains_key(&it.item_id)) {
                return bad(format!("catalog item `{}` has no semantic ID", it.item_id));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<SidRow> {
        self.entries
            .iter()
            .map(|(id, s)| SidRow {
                item_id: id.clone(),
                codes: s.codes.clone(),
                disambiguation: s.disambiguation,
            })
            .collect()
    }
}

/// Quantizes every item and resolves shared code tuples by giving the
/// sharing items suffixes 0, 1, 2, … in `item_id` order.
pub fn assign_sids(state: &QuantizerState, items: &[Item], embeddings: &[Vec<f64>]) -> Result<SidAssignment, QuantizerError> {
    if items.len() != embeddings.len() {
        return Err(QuantizerError::InvalidSidMap(format!(
            "{} items but {} embeddings",
            items.len(),
            embeddings.len()
        )));
    }
    let z = state.encode(embeddings)?;
    let codes: Vec<Vec<u32>> = z.par_iter().map(|zi| quantize_residual(&state.codebooks, zi).codes).collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].item_id.cmp(&items[b].item_id));
    let mut next: HashMap<&[u32], u32> = HashMap::new();
    let mut entries = BTreeMap::new();
    for i in order {
        let n = next.entry(&codes[i]).or_default();
        entries.insert(items[i].item_id.clone(), SemanticId::new(codes[i].clone(), *n));
        *n += 1;
    }
    let a = SidAssignment {
        levels: state.config.levels,
        codebook_size: state.config.codebook_size,
        entries,
    };
    a.validate(Some(items))?;
    Ok(a)
}

pub fn write_sid_map(path: &Path, assignment: &SidAssignment) -> Result<(), QuantizerError> {
    Ok(write_jsonl(path, &assignment.rows())?)
}

/// Reads a SID export file and validates it.
pub fn load_sid_map(path: &Path, levels: usize, codebook_size: usize) -> Result<SidAssignment, QuantizerError> {
    let rows: Vec<SidRow> = read_jsonl(path)?;
    let mut entries = BTreeMap::new();
    for r in rows {
        let id = r.item_id.clone();
        if entries.insert(r.item_id, SemanticId::new(r.codes, r.disambiguation)).is_some() {
            return Err(QuantizerError::InvalidSidMap(format!("item `{id}` listed twice")));
        }
    }
    let a = SidAssignment::from_entries(levels, codebook_size, entries);
    a.validate(None)?;
    Ok(a)
}
