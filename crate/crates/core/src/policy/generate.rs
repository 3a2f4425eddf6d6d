use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::log_softmax;
use super::{KvCache, Policy, PolicyError, VocabSpec};
use crate::sidspace::SidTrie;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOptions {
    /// 0 means greedy argmax with lowest-index ties.
    pub temperature: f64,
    pub max_reasoning_tokens: usize,
    /// Trie-mask the answer (and keep the reasoning free of SID fragments
    /// and turn markers).
    pub constrained: bool,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_reasoning_tokens: 64,
            constrained: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// A full SID was emitted.
    Answered,
    /// A turn marker appeared before any SID.
    EndedWithoutAnswer,
    ContextFull,
}

/// One sampled trajectory: reasoning span τ followed by answer span y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub reasoning: Vec<u32>,
    pub answer: Vec<u32>,
    /// Policy log-probability of every emitted token (τ then y), full
    /// vocabulary, temperature 1.
    pub logprobs: Vec<f64>,
    /// Log-probability under the distribution actually sampled from (after
    /// temperature and masking).
    pub sample_logprobs: Vec<f64>,
    pub stop: StopReason,
}

impl GenerationOutput {
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.reasoning.clone();
        t.extend_from_slice(&self.answer);
        t
    }

    pub fn reasoning_text(&self, vocab: &VocabSpec) -> String {
        vocab.decode(&self.reasoning)
    }

    pub fn answer_text(&self, vocab: &VocabSpec) -> String {
        vocab.decode(&self.answer)
    }

    /// Answer codes if the answer is a complete, level-ordered SID.
    pub fn answer_path(&self, vocab: &VocabSpec) -> Option<Vec<u32>> {
        if self.stop != StopReason::Answered || self.answer.len() != vocab.sid_vocab().path_len() {
            return None;
        }
        self.answer
            .iter()
            .enumerate()
            .map(|(l, &t)| vocab.sid_of(t).filter(|(lv, _)| *lv == l).map(|(_, c)| c))
            .collect()
    }
}

struct Pick {
    token: u32,
    logprob: f64,
    sample_logprob: f64,
}

fn pick(logits: &[f64], allowed: Option<&[u32]>, temperature: f64, rng: &mut ChaCha8Rng) -> Option<Pick> {
    let full = log_softmax(logits);
    let support: Vec<u32> = match allowed {
        Some(a) => a.to_vec(),
        None => (0..logits.len() as u32).collect(),
    };
    if support.is_empty() {
        return None;
    }
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let scaled: Vec<f64> = support.iter().map(|&i| logits[i as usize] / t).collect();
    let masked = log_softmax(&scaled);
    let k = if temperature <= 0.0 {
        let mut best = 0;
        for (j, &i) in support.iter().enumerate() {
            if logits[i as usize] > logits[support[best] as usize] {
                best = j;
            }
        }
        best
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = support.len() - 1;
        for (j, lp) in masked.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                chosen = j;
                break;
            }
        }
        chosen
    };
    Some(Pick {
        token: support[k],
        logprob: full[support[k] as usize],
        sample_logprob: masked[k],
    })
}

/// Token ids allowed while reasoning in constrained mode.
fn reasoning_support(vocab: &VocabSpec, trie: &SidTrie) -> Vec<u32> {
    let roots: Vec<u32> = trie.children(&[]).into_iter().filter_map(|c| vocab.sid_token(0, c)).collect();
    (0..vocab.len() as u32)
        .filter(|&i| !vocab.is_control(i) && (vocab.sid_of(i).is_none() || roots.contains(&i)))
        .collect()
}

fn answer_support(vocab: &VocabSpec, trie: &SidTrie, answer: &[u32], constrained: bool) -> Vec<u32> {
    let level = answer.len();
    if constrained {
        let prefix: Vec<u32> = answer.iter().filter_map(|&t| vocab.sid_of(t).map(|(_, c)| c)).collect();
        trie.children(&prefix).into_iter().filter_map(|c| vocab.sid_token(level, c)).collect()
    } else {
        let size = if level < vocab.sid_vocab().levels {
            vocab.sid_vocab().codebook_size
        } else {
            vocab.sid_vocab().suffix_size
        };
        (0..size as u32).filter_map(|c| vocab.sid_token(level, c)).collect()
    }
}

/// Feeds the context and returns the cache plus next-token logits.
pub fn prefill(policy: &Policy, context: &[u32]) -> Result<(KvCache, Vec<f64>), PolicyError> {
    if context.is_empty() {
        return Err(PolicyError::EmptyContext);
    }
    let mut cache = policy.cache();
    let logits = policy.feed(&mut cache, context)?;
    Ok((cache, logits))
}

/// Samples a reason-then-recommend continuation of `context`.
///
/// Reasoning ends at the first level-one SID token or after
/// `max_reasoning_tokens`; the answer phase then emits exactly one SID,
/// restricted to SID tokens of the expected level and, when constrained, to
/// trie-valid continuations.
pub fn generate(policy: &Policy, context: &[u32], trie: &SidTrie, opts: &DecodeOptions) -> Result<GenerationOutput, PolicyError> {
    let (cache, logits) = prefill(policy, context)?;
    generate_from(policy, cache, logits, trie, opts)
}

/// Like [`generate`] but starting from an already-filled cache.
pub fn generate_from(
    policy: &Policy,
    mut cache: KvCache,
    mut logits: Vec<f64>,
    trie: &SidTrie,
    opts: &DecodeOptions,
) -> Result<GenerationOutput, PolicyError> {
    let vocab = &policy.vocab;
    let path_len = vocab.sid_vocab().path_len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = GenerationOutput {
        reasoning: Vec::new(),
        answer: Vec::new(),
        logprobs: Vec::new(),
        sample_logprobs: Vec::new(),
        stop: StopReason::Answered,
    };
    let room = |cache: &KvCache| cache.len() < policy.config.context_len;
    let reason_mask = opts.constrained.then(|| reasoning_support(vocab, trie));
    while out.reasoning.len() < opts.max_reasoning_tokens {
        let Some(p) = pick(&logits, reason_mask.as_deref(), opts.temperature, &mut rng) else { break };
        out.logprobs.push(p.logprob);
        out.sample_logprobs.push(p.sample_logprob);
        if matches!(vocab.sid_of(p.token), Some((0, _))) {
            out.answer.push(p.token);
            break;
        }
        if vocab.is_control(p.token) {
            out.reasoning.push(p.token);
            out.stop = StopReason::EndedWithoutAnswer;
            return Ok(out);
        }
        out.reasoning.push(p.token);
        if !room(&cache) {
            out.stop = StopReason::ContextFull;
            return Ok(out);
        }
        logits = policy.feed(&mut cache, &[p.token])?;
    }
    while out.answer.len() < path_len {
        if let Some(&last) = out.answer.last() {
            if !room(&cache) {
                out.stop = StopReason::ContextFull;
                return Ok(out);
            }
            logits = policy.feed(&mut cache, &[last])?;
        }
        let support = answer_support(vocab, trie, &out.answer, opts.constrained);
        let Some(p) = pick(&logits, Some(&support), opts.temperature, &mut rng) else {
            out.stop = StopReason::EndedWithoutAnswer;
            return Ok(out);
        };
        out.logprobs.push(p.logprob);
        out.sample_logprobs.push(p.sample_logprob);
        out.answer.push(p.token);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: String,
    pub path: Vec<u32>,
    /// Sum of token log-probabilities of the SID.
    pub score: f64,
}

struct Beam {
    path: Vec<u32>,
    score: f64,
    cache: KvCache,
    logits: Vec<f64>,
}

/// Top-`k` catalog items by SID log-probability after `context` + `reasoning`,
/// via beam search over the trie. Ties are broken by item id.
pub fn rank_topk(
    policy: &Policy,
    context: &[u32],
    reasoning: &[u32],
    trie: &SidTrie,
    k: usize,
    beam_width: usize,
) -> Result<Vec<RankedItem>, PolicyError> {
    if k > trie.len() {
        return Err(PolicyError::TooManyRequested { k, catalog: trie.len() });
    }
    if beam_width < k {
        return Err(PolicyError::BeamTooNarrow { beam: beam_width, k });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let vocab = &policy.vocab;
    let mut full = context.to_vec();
    full.extend_from_slice(reasoning);
    let (cache, logits) = prefill(policy, &full)?;
    let depth = trie.depth();
    let mut beams = vec![Beam {
        path: Vec::new(),
        score: 0.0,
        cache,
        logits,
    }];
    for level in 0..depth {
        let mut cands: Vec<(usize, u32, f64)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            let lp = log_softmax(&b.logits);
            for code in trie.children(&b.path) {
                let tok = vocab.sid_token(level, code).ok_or(PolicyError::UnknownToken(code))?;
                cands.push((bi, code, b.score + lp[tok as usize]));
            }
        }
        let key = |c: &(usize, u32, f64)| {
            let mut p = beams[c.0].path.clone();
            p.push(c.1);
            p
        };
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| key(a).cmp(&key(b))));
        if level + 1 == depth {
            let mut done: Vec<RankedItem> = cands
                .iter()
                .map(|c| {
                    let path = key(c);
                    let item_id = trie.lookup(&path).unwrap_or_default().to_string();
                    RankedItem { item_id, path, score: c.2 }
                })
                .collect();
            done.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item_id.cmp(&b.item_id)));
            done.truncate(k);
            return Ok(done);
        }
        cands.truncate(beam_width);
        let mut next = Vec::with_capacity(cands.len());
        for c in &cands {
            let parent = &beams[c.0];
            let mut cache = parent.cache.clone();
            let tok = vocab.sid_token(level, c.1).ok_or(PolicyError::UnknownToken(c.1))?;
            let logits = policy.feed(&mut cache, &[tok])?;
            next.push(Beam {
                path: key(c),
                score: c.2,
                cache,
                logits,
            });
        }
        beams = next;
    }
    Ok(Vec::new())
}
