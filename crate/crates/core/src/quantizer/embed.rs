use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::QuantizerError;
use crate::dataio::{read_jsonl, Item};

const BUCKETS: u64 = 1 << 14;

/// One line of an embedding import file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub item_id: String,
    pub vector: Vec<f64>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn words(item: &Item) -> Vec<String> {
    [&item.title, &item.description, &item.category]
        .iter()
        .flat_map(|s| s.split(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic text embedding: word unigrams and bigrams are hashed into
/// signed buckets, each bucket owns a fixed Gaussian direction (seeded per
/// bucket), and the weighted sum is scaled to unit length.
pub fn embed_items(items: &[Item], d: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(d >= 8, "embedding dimension must be at least 8");
    let mut directions: HashMap<u64, Vec<f64>> = HashMap::new();
    items
        .iter()
        .map(|item| {
            let w = words(item);
            let mut feats: Vec<String> = w.clone();
            feats.extend(w.windows(2).map(|p| format!("{} {}", p[0], p[1])));
            let mut v = vec![0.0; d];
            for f in &feats {
                let h = fnv1a(f);
                let bucket = h % BUCKETS;
                let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
                let dir = directions.entry(bucket).or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(bucket);
                    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
                });
                for (x, y) in v.iter_mut().zip(dir.iter()) {
                    *x += sign * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            } else {
                v[0] = 1.0;
            }
            v
        })
        .collect()
}

/// Reads an embedding import file (`{"item_id", "vector"}` per line).
pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>, QuantizerError> {
    Ok(read_jsonl(path)?)
}

/// Orders imported vectors to match `items`; every item must have a finite
/// vector of a common dimension.
pub fn align_embeddings(items: &[Item], rows: &[EmbeddingRow]) -> Result<Vec<Vec<f64>>, QuantizerError> {
    let map: HashMap<&str, &Vec<f64>> = rows.iter().map(|r| (r.item_id.as_str(), &r.vector)).collect();
    let mut dim = None;
    items
        .iter()
        .map(|it| {
            let v = map.get(it.item_id.as_str()).ok_or_else(|| QuantizerError::MissingEmbedding(it.item_id.clone()))?;
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected || v.is_empty() {
                return Err(QuantizerError::DimensionMismatch {
                    item: it.item_id.clone(),
                    expected,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(QuantizerError::NonFiniteEmbedding(it.item_id.clone()));
            }
            Ok((*v).clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_dataset, SynthConfig};

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let (items, _) = synth_dataset(&SynthConfig::default()).unwrap();
        let a = embed_items(&items, 32, 4);
        let b = embed_items(&items[..10], 32, 4);
        assert_eq!(&a[..10], &b[..]);
        for v in &a {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_category_is_more_similar() {
        let (items, _) = synth_dataset(&SynthConfig::default()).unwrap();
        let e = embed_items(&items, 64, 4);
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                let c = cos(&e[i], &e[j]);
                if items[i].category == items[j].category {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / nx as f64);
        assert!(intra > inter + 0.1, "intra {intra} inter {inter}");
    }

    #[test]
    fn alignment_reports_missing_and_ragged() {
        let (items, _) = synth_dataset(&SynthConfig::default()).unwrap();
        let items = &items[..2];
        let rows = vec![EmbeddingRow {
            item_id: items[0].item_id.clone(),
            vector: vec![1.0, 2.0],
        }];
        assert!(matches!(align_embeddings(items, &rows), Err(QuantizerError::MissingEmbedding(_))));
        let mut rows = rows;
        rows.push(EmbeddingRow {
            item_id: items[1].item_id.clone(),
            vector: vec![1.0],
        });
        assert!(matches!(align_embeddings(items, &rows), Err(QuantizerError::DimensionMismatch { .. })));
    }
}
