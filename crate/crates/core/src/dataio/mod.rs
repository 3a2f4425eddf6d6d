//! Catalog and interaction ingestion, k-core filtering, windowed temporal
//! splits, and a synthetic Markov dataset generator.

mod io;
mod kcore;
mod split;
mod synth;

pub use io::{load_catalog, load_interactions, read_jsonl, write_catalog, write_interactions, write_jsonl};
pub use kcore::k_core_filter;
pub use split::{build_split_sequences, SplitDataset, SplitExample, SplitStats};
pub use synth::{synth_dataset, SynthConfig};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate item_id `{id}` on lines {first} and {second}")]
    DuplicateItem { id: String, first: usize, second: usize },
    #[error("interaction references unknown item `{0}`")]
    UnknownItem(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid split ratios {0:?}: need three positive numbers")]
    InvalidRatios(Vec<f64>),
}
