use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::generate::rank_topk;
use super::{forward_logits, Policy, PolicyError, Stage, VocabSpec};
use crate::corpusgen::AlignmentExample;
use crate::numerics::{NumericsError, Optimizer, OptimizerKind, Tape, Var};
use crate::sidspace::SidTrie;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftStage {
    /// Multi-epoch, early-stopped on validation SID accuracy.
    Alignment,
    /// Exactly one epoch over the reason-then-recommend set.
    Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSchedule {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Upper bound for the alignment stage; activation always runs one epoch.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for SftSchedule {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            weight_decay: 0.0,
            batch_size: 16,
            max_epochs: 4,
            patience: 1,
            max_grad_norm: 1.0,
            seed: 23,
        }
    }
}

/// Token ids of prompt + target + `<|im_end|>`; loss covers positions at or
/// after `prompt_len` (or every position when `mask_prompt` is false).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub prompt_len: usize,
    pub mask_prompt: bool,
}

impl EncodedExample {
    /// `(row, target)` pairs contributing to the loss.
    pub fn loss_positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let start = if self.mask_prompt { self.prompt_len.max(1) } else { 1 };
        (start..self.ids.len()).map(|j| (j - 1, self.ids[j] as usize))
    }
}

pub fn encode_example(vocab: &VocabSpec, ex: &AlignmentExample) -> EncodedExample {
    let mut ids = vocab.encode(&ex.prompt);
    let prompt_len = ids.len();
    ids.extend(vocab.encode(&ex.target));
    ids.push(vocab.im_end());
    EncodedExample {
        ids,
        prompt_len,
        mask_prompt: ex.mask_prompt,
    }
}

/// Held-out prompt with the token path of its correct SID.
#[derive(Clone, Debug, PartialEq)]
pub struct SidProbe {
    pub context: Vec<u32>,
    pub target: Vec<u32>,
}

/// Fraction of probes whose constrained greedy answer is exactly the target.
pub fn sid_accuracy(policy: &Policy, probes: &[SidProbe], trie: &SidTrie) -> Result<f64, PolicyError> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for p in probes {
        let best = rank_topk(policy, &p.context, &[], trie, 1, 1)?;
        if best[0].path == p.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Mean token cross-entropy over the loss positions of `batch`, built on `tape`.
pub fn sft_loss(tape: &mut Tape<'_>, pv: &[Var], policy_config: &super::PolicyConfig, batch: &[&EncodedExample]) -> Result<Var, NumericsError> {
    let total: usize = batch.iter().map(|e| e.loss_positions().count()).sum();
    let w = 1.0 / total.max(1) as f64;
    let mut acc: Option<Var> = None;
    for ex in batch {
        let targets: Vec<(usize, usize, f64)> = ex.loss_positions().map(|(r, t)| (r, t, w)).collect();
        if targets.is_empty() {
            continue;
        }
        let logits = forward_logits(tape, pv, policy_config, &ex.ids[..ex.ids.len() - 1])?;
        let l = tape.cross_entropy(logits, &targets)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let z = tape.constant(crate::numerics::Tensor::scalar(0.0));
            Ok(z)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub policy: Policy,
    pub epochs: Vec<SftEpoch>,
    pub total_steps: usize,
    /// Epoch whose parameters were kept (early stopping restores the best).
    pub best_epoch: usize,
}

fn train_epoch(
    policy: &mut Policy,
    data: &[EncodedExample],
    opt: &mut Optimizer,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64), PolicyError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut steps = 0;
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, mut grads) = {
            let mut tape = Tape::new();
            let pv: Vec<Var> = policy.params.iter().map(|p| tape.param(p)).collect();
            let out = sft_loss(&mut tape, &pv, &policy.config, &batch)?;
            let mut g = tape.backward(out)?;
            let grads: Vec<Vec<f64>> = pv
                .iter()
                .zip(&policy.params)
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![0.0; p.len()]))
                .collect();
            (tape.value(out).item(), grads)
        };
        opt.step(&mut policy.params, &mut grads);
        loss_sum += loss;
        steps += 1;
    }
    Ok((steps, loss_sum / steps.max(1) as f64))
}

/// Supervised fine-tuning with prompt-masked next-token cross-entropy.
///
/// Alignment evaluates `probes` after every epoch and keeps the best
/// parameters; activation runs exactly one epoch (`⌈N / batch⌉` steps).
pub fn train_sft(
    mut policy: Policy,
    corpus: &[AlignmentExample],
    stage: SftStage,
    schedule: &SftSchedule,
    probes: &[SidProbe],
    trie: Option<&SidTrie>,
) -> Result<SftOutcome, PolicyError> {
    if corpus.is_empty() {
        return Err(PolicyError::EmptyCorpus);
    }
    if schedule.batch_size == 0 || !(schedule.learning_rate > 0.0) {
        return Err(PolicyError::InvalidConfig("batch_size and learning_rate must be positive".into()));
    }
    let data: Vec<EncodedExample> = corpus.iter().map(|e| encode_example(&policy.vocab, e)).collect();
    if let Some((index, e)) = data.iter().enumerate().find(|(_, e)| e.ids.len() > policy.config.context_len) {
        return Err(PolicyError::ContextOverflow {
            index,
            len: e.ids.len(),
            max: policy.config.context_len,
        });
    }
    let mut opt = Optimizer::new(OptimizerKind::Adamw, schedule.learning_rate, schedule.weight_decay, Some(schedule.max_grad_norm));
    let max_epochs = match stage {
        SftStage::Alignment => schedule.max_epochs.max(1),
        SftStage::Activation => 1,
    };
    let use_probes = stage == SftStage::Alignment && !probes.is_empty() && trie.is_some();
    let mut epochs = Vec::new();
    let mut total_steps = 0;
    let mut best: Option<(f64, usize, Vec<crate::numerics::Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
        let (steps, mean_loss) = train_epoch(&mut policy, &data, &mut opt, schedule.batch_size, &mut rng)?;
        total_steps += steps;
        let val_accuracy = match (use_probes, trie) {
            (true, Some(t)) => Some(sid_accuracy(&policy, probes, t)?),
            _ => None,
        };
        info!(epoch, steps, mean_loss, ?val_accuracy, stage = ?stage, "sft epoch");
        epochs.push(SftEpoch {
            epoch,
            steps,
            mean_loss,
            val_accuracy,
        });
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, policy.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= schedule.patience.max(1) {
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            policy.params = params;
            e
        }
        None => epochs.len(),
    };
    policy.stage = match stage {
        SftStage::Alignment => Stage::Aligned,
        SftStage::Activation => Stage::Activated,
    };
    Ok(SftOutcome {
        policy,
        epochs,
        total_steps,
        best_epoch,
    })
}
