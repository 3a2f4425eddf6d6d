use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Interaction, Item};

/// Synthetic catalog and Markov-chain user sequences.
///
/// When `transition_matrix` is absent the chain is built from
/// `self_transition` (stay in the category) and `next_transition` (move to
/// category `c + 1 mod C`); leftover mass is spread uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_categories: usize,
    #[serde(default)]
    pub transition_matrix: Option<Vec<Vec<f64>>>,
    pub self_transition: f64,
    pub next_transition: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 300,
            n_users: 240,
            n_categories: 8,
            transition_matrix: None,
            self_transition: 0.1,
            next_transition: 0.75,
            seq_len_min: 8,
            seq_len_max: 16,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn transitions(&self) -> Result<Vec<Vec<f64>>, DataError> {
        let c = self.n_categories;
        let m = match &self.transition_matrix {
            Some(m) => m.clone(),
            None => {
                let rest = 1.0 - self.self_transition - self.next_transition;
                if self.self_transition < 0.0 || self.next_transition < 0.0 || rest < -1e-12 {
                    return Err(DataError::InvalidConfig("self_transition + next_transition must lie in [0, 1]".into()));
                }
                (0..c)
                    .map(|i| {
                        let mut row = vec![rest.max(0.0) / c as f64; c];
                        row[i] += self.self_transition;
                        row[(i + 1) % c] += self.next_transition;
                        row
                    })
                    .collect()
            }
        };
        if m.len() != c || m.iter().any(|r| r.len() != c) {
            return Err(DataError::InvalidConfig(format!("transition matrix must be {c}x{c}")));
        }
        for (i, row) in m.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(DataError::InvalidConfig(format!("row {i} is not a probability distribution (sum {s})")));
            }
        }
        Ok(m)
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_categories == 0 || self.n_items < self.n_categories {
            return Err(DataError::InvalidConfig("need n_items >= n_categories >= 1".into()));
        }
        if self.seq_len_min < 2 || self.seq_len_max < self.seq_len_min {
            return Err(DataError::InvalidConfig("need 2 <= seq_len_min <= seq_len_max".into()));
        }
        Ok(())
    }
}

const ONSETS: &[&str] = &["b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "or"];
const SHARED: &[&str] = &[
    "edition", "set", "classic", "bundle", "pack", "collection", "deluxe", "series", "kit", "pro",
];
const FILLER: &[&str] = &["with", "for", "and", "the", "a", "of", "in", "new", "great", "quality"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

struct Category {
    name: String,
    pool: Vec<String>,
}

fn make_categories(n: usize, rng: &mut ChaCha8Rng) -> Vec<Category> {
    let mut used = std::collections::HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    (0..n)
        .map(|_| {
            let name = fresh(rng);
            let pool = (0..10).map(|_| fresh(rng)).collect();
            Category { name, pool }
        })
        .collect()
}

/// Deterministic synthetic dataset: `(catalog, interactions)`.
///
/// The first `n_categories` items cover every category once so no category is
/// empty; the remaining categories are drawn uniformly.
pub fn synth_dataset(config: &SynthConfig) -> Result<(Vec<Item>, Vec<Interaction>), DataError> {
    config.validate()?;
    let transitions = config.transitions()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cats = make_categories(config.n_categories, &mut rng);
    let width = config.n_items.to_string().len().max(4);

    let mut items = Vec::with_capacity(config.n_items);
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); cats.len()];
    for i in 0..config.n_items {
        let c = if i < cats.len() { i } else { rng.random_range(0..cats.len()) };
        let cat = &cats[c];
        let title = format!(
            "{} {} {}",
            cat.pool.choose(&mut rng).unwrap(),
            cat.pool.choose(&mut rng).unwrap(),
            SHARED.choose(&mut rng).unwrap()
        );
        let mut words: Vec<&str> = Vec::new();
        for _ in 0..5 {
            words.push(cat.pool.choose(&mut rng).unwrap());
        }
        for _ in 0..3 {
            words.push(FILLER.choose(&mut rng).unwrap());
        }
        let description = format!("a {} item {}", cat.name, words.join(" "));
        by_cat[c].push(i);
        items.push(Item {
            item_id: format!("i{:0width$}", i, width = width),
            title,
            description,
            category: cat.name.clone(),
        });
    }

    let uwidth = config.n_users.to_string().len().max(4);
    let mut interactions = Vec::new();
    for u in 0..config.n_users {
        let len = rng.random_range(config.seq_len_min..=config.seq_len_max);
        let mut c = rng.random_range(0..cats.len());
        let mut ts: i64 = 1_600_000_000 + rng.random_range(0..1_000_000);
        for step in 0..len {
            if step > 0 {
                c = sample_row(&transitions[c], &mut rng);
                ts += rng.random_range(60..86_400);
            }
            let item = *by_cat[c].choose(&mut rng).unwrap();
            interactions.push(Interaction {
                user_id: format!("u{:0width$}", u, width = uwidth),
                item_id: items[item].item_id.clone(),
                timestamp: ts,
            });
        }
    }
    Ok((items, interactions))
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    row.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.0.len(), 300);
    }

    #[test]
    fn empirical_self_transition_matches() {
        let cfg = SynthConfig {
            n_categories: 4,
            transition_matrix: Some((0..4).map(|i| (0..4).map(|j| if i == j { 0.8 } else { 0.2 / 3.0 }).collect()).collect()),
            n_users: 700,
            seq_len_min: 15,
            seq_len_max: 15,
            ..SynthConfig::default()
        };
        let (items, rows) = synth_dataset(&cfg).unwrap();
        let cat: HashMap<_, _> = items.iter().map(|i| (i.item_id.clone(), i.category.clone())).collect();
        let (mut stay, mut total) = (0usize, 0usize);
        for w in rows.windows(2) {
            if w[0].user_id == w[1].user_id {
                total += 1;
                stay += usize::from(cat[&w[0].item_id] == cat[&w[1].item_id]);
            }
        }
        assert!(total >= 9_800);
        let freq = stay as f64 / total as f64;
        assert!((freq - 0.8).abs() < 0.03, "{freq}");
    }

    #[test]
    fn explicit_matrix_validated() {
        let cfg = SynthConfig {
            n_categories: 2,
            transition_matrix: Some(vec![vec![0.5, 0.6], vec![0.5, 0.5]]),
            ..SynthConfig::default()
        };
        assert!(synth_dataset(&cfg).is_err());
        let cfg = SynthConfig {
            n_categories: 2,
            transition_matrix: Some(vec![vec![0.8, 0.2], vec![0.2, 0.8]]),
            ..SynthConfig::default()
        };
        assert!(synth_dataset(&cfg).is_ok());
    }
}
