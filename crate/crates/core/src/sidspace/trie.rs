use std::collections::BTreeMap;

use super::{SidError, SidVocab};
use crate::quantizer::SidAssignment;

#[derive(Clone, Debug, Default)]
struct Node {
    children: BTreeMap<u32, usize>,
    item: Option<String>,
}

/// Level-layered prefix tree over every catalog SID path. Immutable after
/// construction.
#[derive(Clone, Debug)]
pub struct SidTrie {
    vocab: SidVocab,
    nodes: Vec<Node>,
    items: usize,
}

/// Result of a prefix query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NextCodes {
    /// Codes that extend the prefix toward at least one catalog item.
    Allowed(Vec<u32>),
    /// The prefix is a complete SID of this item.
    Terminal(String),
    /// No catalog SID starts with the prefix.
    Empty,
}

pub fn build_trie(assignment: &SidAssignment) -> Result<SidTrie, SidError> {
    let vocab = assignment.vocab();
    let mut nodes = vec![Node::default()];
    for (item, sid) in assignment.iter() {
        let path = vocab.path(sid);
        let mut cur = 0;
        for code in path.iter() {
            cur = match nodes[cur].children.get(code) {
                Some(&n) => n,
                None => {
                    nodes.push(Node::default());
                    let n = nodes.len() - 1;
                    nodes[cur].children.insert(*code, n);
                    n
                }
            };
        }
        if let Some(prev) = &nodes[cur].item {
            return Err(SidError::DuplicatePath(path, prev.clone(), item.to_string()));
        }
        nodes[cur].item = Some(item.to_string());
    }
    Ok(SidTrie {
        vocab,
        nodes,
        items: assignment.len(),
    })
}

impl SidTrie {
    pub fn vocab(&self) -> &SidVocab {
        &self.vocab
    }

    pub fn depth(&self) -> usize {
        self.vocab.path_len()
    }

    pub fn len(&self) -> usize {
        self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    fn walk(&self, prefix: &[u32]) -> Option<usize> {
        let mut cur = 0;
        for c in prefix {
            cur = *self.nodes[cur].children.get(c)?;
        }
        Some(cur)
    }

    /// Item for a complete path, if the catalog contains it.
    pub fn lookup(&self, path: &[u32]) -> Option<&str> {
        if path.len() != self.depth() {
            return None;
        }
        self.walk(path).and_then(|n| self.nodes[n].item.as_deref())
    }

    pub fn constrained_next(&self, prefix: &[u32]) -> NextCodes {
        match self.walk(prefix) {
            None => NextCodes::Empty,
            Some(n) => match &self.nodes[n].item {
                Some(item) => NextCodes::Terminal(item.clone()),
                None if self.nodes[n].children.is_empty() => NextCodes::Empty,
                None => NextCodes::Allowed(self.nodes[n].children.keys().copied().collect()),
            },
        }
    }

    /// Allowed codes after `prefix`, empty for terminal or unknown prefixes.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        match self.constrained_next(prefix) {
            NextCodes::Allowed(v) => v,
            _ => Vec::new(),
        }
    }

    /// Every `(path, item)` pair in lexicographic path order.
    pub fn paths(&self) -> Vec<(Vec<u32>, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            if let Some(item) = &self.nodes[n].item {
                out.push((path.clone(), item.clone()));
            }
            for (&c, &child) in self.nodes[n].children.iter().rev() {
                let mut p = path.clone();
                p.push(c);
                stack.push((child, p));
            }
        }
        out
    }
}
