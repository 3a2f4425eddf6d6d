//! Pre-LayerNorm decoder-only transformer with a tied output head.
//!
//! Two evaluation paths share the same kernels: a tape forward used for
//! training and teacher-forced scoring, and an incremental key/value cache
//! used for decoding. Both perform the same floating-point operations row by
//! row, so cached log-probabilities match tape scores exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PolicyConfig, PolicyError, Stage, VocabSpec};
use crate::numerics::{log_softmax_parts, matmul_acc, matmul_nt_acc, mean_var, softmax_into, NumericsError, Tape, Tensor, Unary, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
const PER_LAYER: usize = 12;

/// Policy parameters together with the vocabulary and architecture they
/// belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub vocab: VocabSpec,
    pub stage: Stage,
    pub params: Vec<Tensor>,
}

/// Parameter shapes in storage order: token embedding, position embedding,
/// per-layer blocks, final norm.
pub fn param_shapes(config: &PolicyConfig, vocab_len: usize) -> Vec<[usize; 2]> {
    let (d, f) = (config.width, config.ff_width);
    let mut s = vec![[vocab_len, d], [config.context_len, d]];
    for _ in 0..config.layers {
        s.extend([[1, d], [1, d], [d, d], [d, d], [d, d], [d, d], [1, d], [1, d], [d, f], [1, f], [f, d], [1, d]]);
    }
    s.extend([[1, d], [1, d]]);
    s
}

impl Policy {
    /// Random initialization; SID embeddings use the same scale as words.
    pub fn init(config: PolicyConfig, vocab: VocabSpec) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.width as f64, config.ff_width as f64);
        let resid = 1.0 / (2.0 * config.layers as f64).sqrt();
        let shapes = param_shapes(&config, vocab.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (i, [r, c]) in shapes.into_iter().enumerate() {
            let std = match i {
                0 | 1 => 0.1,
                _ if i >= 2 + config.layers * PER_LAYER => -1.0,
                _ => match (i - 2) % PER_LAYER {
                    0 | 6 => -1.0,
                    1 | 7 | 9 | 11 => 0.0,
                    2..=4 => 1.0 / d.sqrt(),
                    5 => resid / d.sqrt(),
                    8 => 1.0 / d.sqrt(),
                    _ => resid / f.sqrt(),
                },
            };
            let data: Vec<f64> = if std < 0.0 {
                vec![1.0; r * c]
            } else if std == 0.0 {
                vec![0.0; r * c]
            } else {
                let n = Normal::new(0.0, std).expect("positive std");
                (0..r * c).map(|_| n.sample(&mut rng)).collect()
            };
            params.push(Tensor::matrix(r, c, data)?);
        }
        Ok(Self {
            config,
            vocab,
            stage: Stage::Initial,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn check_shapes(&self) -> Result<(), PolicyError> {
        let want = param_shapes(&self.config, self.vocab.len());
        if want.len() != self.params.len() || want.iter().zip(&self.params).any(|(w, p)| p.shape() != w) {
            return Err(PolicyError::Checkpoint("parameter shapes do not match the configuration".into()));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), PolicyError> {
        if ids.len() > self.config.context_len {
            return Err(PolicyError::ContextOverflow {
                index: 0,
                len: ids.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab.len()) {
            return Err(PolicyError::UnknownToken(bad));
        }
        Ok(())
    }

    /// Teacher-forced log-probabilities of `tokens` following `context`.
    pub fn sequence_logprob(&self, context: &[u32], tokens: &[u32]) -> Result<Vec<f64>, PolicyError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        if context.is_empty() {
            return Err(PolicyError::EmptyContext);
        }
        let mut ids = context.to_vec();
        ids.extend_from_slice(tokens);
        self.check_ids(&ids)?;
        let mut tape = Tape::new();
        let pv: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
        let n = ids.len();
        let logits = forward_logits(&mut tape, &pv, &self.config, &ids[..n - 1])?;
        let rows: Vec<usize> = (context.len() - 1..n - 1).collect();
        let rows = tape.gather_rows(logits, &rows)?;
        let targets: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let lp = tape.pick_log_prob(rows, &targets)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Fresh decoding cache.
    pub fn cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            len: 0,
        }
    }

    /// Feeds `ids` through the cache; returns the next-token logits.
    pub fn feed(&self, cache: &mut KvCache, ids: &[u32]) -> Result<Vec<f64>, PolicyError> {
        if cache.len + ids.len() > self.config.context_len {
            return Err(PolicyError::ContextOverflow {
                index: 0,
                len: cache.len + ids.len(),
                max: self.config.context_len,
            });
        }
        let mut logits = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab.len() {
                return Err(PolicyError::UnknownToken(id));
            }
            logits = self.step(cache, id);
        }
        Ok(logits)
    }

    fn step(&self, cache: &mut KvCache, id: u32) -> Vec<f64> {
        let cfg = &self.config;
        let (d, f, h) = (cfg.width, cfg.ff_width, cfg.heads);
        let dh = d / h;
        let p = &self.params;
        let pos = cache.len;
        let mut x: Vec<f64> = p[0].row_slice(id as usize).iter().zip(p[1].row_slice(pos)).map(|(a, b)| a + b).collect();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let hn = ln_row(&x, w[0].data(), w[1].data());
            let q = row_matmul(&hn, w[2].data(), d, d);
            let k = row_matmul(&hn, w[3].data(), d, d);
            let v = row_matmul(&hn, w[4].data(), d, d);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let t = pos + 1;
            let mut concat = vec![0.0; d];
            let mut kh = vec![0.0; t * dh];
            let mut vh = vec![0.0; t * dh];
            for head in 0..h {
                let off = head * dh;
                for j in 0..t {
                    kh[j * dh..(j + 1) * dh].copy_from_slice(&cache.keys[l][j * d + off..j * d + off + dh]);
                    vh[j * dh..(j + 1) * dh].copy_from_slice(&cache.values[l][j * d + off..j * d + off + dh]);
                }
                let mut scores = vec![0.0; t];
                matmul_nt_acc(&q[off..off + dh], &kh, 1, dh, t, &mut scores);
                let scores: Vec<f64> = scores.iter().map(|s| scale * s + 0.0).collect();
                let mut att = vec![0.0; t];
                softmax_into(&scores, &mut att);
                let mut o = vec![0.0; dh];
                matmul_acc(&att, &vh, 1, t, dh, &mut o);
                concat[off..off + dh].copy_from_slice(&o);
            }
            let o = row_matmul(&concat, w[5].data(), d, d);
            let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let h2 = ln_row(&x1, w[6].data(), w[7].data());
            let mut a = row_matmul(&h2, w[8].data(), d, f);
            a.iter_mut().zip(w[9].data()).for_each(|(v, b)| *v += b);
            let a: Vec<f64> = a.iter().map(|&v| Unary::Gelu.apply(v)).collect();
            let mut m = row_matmul(&a, w[10].data(), f, d);
            m.iter_mut().zip(w[11].data()).for_each(|(v, b)| *v += b);
            x = x1.iter().zip(&m).map(|(a, b)| a + b).collect();
        }
        let nf = p.len();
        let hf = ln_row(&x, p[nf - 2].data(), p[nf - 1].data());
        let mut logits = vec![0.0; self.vocab.len()];
        matmul_nt_acc(&hf, p[0].data(), 1, d, self.vocab.len(), &mut logits);
        cache.len += 1;
        logits
    }
}

/// Decoding state: per-layer keys and values of every fed position.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn row_matmul(x: &[f64], w: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    matmul_acc(x, w, 1, k, n, &mut out);
    out
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let (mu, var) = mean_var(x);
    let is = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| g * ((v - mu) * is) + b).collect()
}

/// Full-vocabulary log-softmax of one logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut scratch = vec![0.0; logits.len()];
    let lse = log_softmax_parts(logits, &mut scratch);
    logits.iter().map(|x| x - lse).collect()
}

/// Builds the forward pass for one sequence on `tape`; returns `[T, V]` logits.
pub(crate) fn forward_logits(tape: &mut Tape<'_>, pv: &[Var], cfg: &PolicyConfig, ids: &[u32]) -> Result<Var, NumericsError> {
    let (d, h) = (cfg.width, cfg.heads);
    let dh = d / h;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let pos: Vec<usize> = (0..ids.len()).collect();
    let te = tape.gather_rows(pv[0], &idx)?;
    let pe = tape.gather_rows(pv[1], &pos)?;
    let mut x = tape.add(te, pe)?;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let w = &pv[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        let hn = tape.layer_norm(x, w[0], w[1], LN_EPS)?;
        let q = tape.matmul(hn, w[2])?;
        let k = tape.matmul(hn, w[3])?;
        let v = tape.matmul(hn, w[4])?;
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let a = tape.causal_softmax(s)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(cat, w[5])?;
        x = tape.add(x, o)?;
        let h2 = tape.layer_norm(x, w[6], w[7], LN_EPS)?;
        let a = tape.matmul(h2, w[8])?;
        let a = tape.add_row(a, w[9])?;
        let a = tape.map(a, Unary::Gelu)?;
        let m = tape.matmul(a, w[10])?;
        let m = tape.add_row(m, w[11])?;
        x = tape.add(x, m)?;
    }
    let n = pv.len();
    let hf = tape.layer_norm(x, pv[n - 2], pv[n - 1], LN_EPS)?;
    tape.matmul_nt(hf, pv[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidspace::SidVocab;

    pub(crate) fn tiny() -> Policy {
        let vocab = VocabSpec::new(SidVocab::new(2, 3, 0), ["hello", "world", "red", "blue"].map(String::from));
        let cfg = PolicyConfig {
            layers: 2,
            heads: 2,
            width: 8,
            ff_width: 12,
            context_len: 32,
            seed: 5,
        };
        Policy::init(cfg, vocab).unwrap()
    }

    #[test]
    fn cache_matches_tape_bitwise() {
        let p = tiny();
        let ctx = vec![3, 5, 13, 14];
        let toks = vec![8, 9, 13, 4];
        let scored = p.sequence_logprob(&ctx, &toks).unwrap();
        let mut cache = p.cache();
        let mut logits = p.feed(&mut cache, &ctx).unwrap();
        for (i, &t) in toks.iter().enumerate() {
            let lp = log_softmax(&logits);
            assert_eq!(lp[t as usize], scored[i], "position {i}");
            logits = p.feed(&mut cache, &[t]).unwrap();
        }
        assert!(scored.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn forced_sequence_total_is_sum_of_steps() {
        let p = tiny();
        let two = p.sequence_logprob(&[3, 5], &[13, 14]).unwrap();
        let first = p.sequence_logprob(&[3, 5], &[13]).unwrap();
        let second = p.sequence_logprob(&[3, 5, 13], &[14]).unwrap();
        assert!((two.iter().sum::<f64>() - (first[0] + second[0])).abs() < 1e-12);
    }

    #[test]
    fn context_overflow_is_reported() {
        let p = tiny();
        let ctx = vec![5; 40];
        assert!(matches!(p.sequence_logprob(&ctx, &[5]), Err(PolicyError::ContextOverflow { .. })));
    }
}
