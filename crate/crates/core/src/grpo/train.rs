use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::{grpo_update, rollout_group, score_group, GrpoConfig, GrpoError, TrajectoryGroup};
use crate::corpusgen::coldstart_prompt;
use crate::dataio::SplitExample;
use crate::numerics::Optimizer;
use crate::policy::{generate, DecodeOptions, Policy, Stage, VocabSpec};
use crate::quantizer::SidAssignment;
use crate::sidspace::{compute_reward_text, SemanticId, SidTrie};

/// A reasoning prompt with its ground-truth next item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlExample {
    pub context: Vec<u32>,
    pub target: String,
    pub sid: SemanticId,
}

/// Cold-start prompts (history SIDs only) for every example of a split.
pub fn rl_examples(split: &[SplitExample], assignment: &SidAssignment, vocab: &VocabSpec) -> Result<Vec<RlExample>, GrpoError> {
    split
        .iter()
        .map(|ex| {
            let history = ex
                .history
                .iter()
                .map(|h| assignment.render(h).ok_or_else(|| GrpoError::UnknownTarget(h.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let sid = assignment.get(&ex.target).ok_or_else(|| GrpoError::UnknownTarget(ex.target.clone()))?;
            Ok(RlExample {
                context: vocab.encode(&coldstart_prompt(&history)),
                target: ex.target.clone(),
                sid: sid.clone(),
            })
        })
        .collect()
}

/// Acting policy plus optimizer; the optimizer's step count is the RL step.
#[derive(Clone, Debug)]
pub struct RlState {
    pub policy: Policy,
    pub optimizer: Optimizer,
}

impl RlState {
    pub fn step(&self) -> usize {
        self.optimizer.state.step as usize
    }
}

/// Starts RL from an activated checkpoint.
pub fn rl_init(activated: Policy, config: &GrpoConfig) -> Result<RlState, GrpoError> {
    config.validate()?;
    if activated.stage != Stage::Activated {
        return Err(GrpoError::WrongStage(activated.stage.as_str()));
    }
    let optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay, Some(config.max_grad_norm));
    Ok(RlState {
        policy: activated,
        optimizer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_sr: f64,
    /// Fraction of trajectories whose answer is not a catalog item.
    pub invalid_rate: f64,
    pub mean_reasoning_len: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

fn mix(seed: u64, a: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One RL step: sample a batch, roll out a group per context, score,
/// update once. Everything random derives from `(config.seed, step)`, so
/// a run restored from a checkpoint continues exactly.
pub fn rl_step(
    state: &mut RlState,
    reference: &Policy,
    data: &[RlExample],
    trie: &SidTrie,
    config: &GrpoConfig,
) -> Result<StepMetrics, GrpoError> {
    if data.is_empty() {
        return Err(GrpoError::NoData);
    }
    let step = state.step() + 1;
    let step_seed = mix(config.seed, step as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let batch = sample(&mut rng, data.len(), config.batch_size.min(data.len())).into_vec();
    let old = &state.policy;
    let groups: Vec<TrajectoryGroup> = batch
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let ex = &data[i];
            let mut g = rollout_group(old, reference, &ex.context, trie, config, mix(step_seed, pos as u64 + 1))?;
            score_group(&mut g, old, trie, &ex.sid, config.lambda, config.adv_eps)?;
            Ok(g)
        })
        .collect::<Result<_, GrpoError>>()?;

    let n = groups.iter().map(|g| g.rewards.len()).sum::<usize>().max(1) as f64;
    let rewards = groups.iter().flat_map(|g| &g.rewards);
    let mean_reward = rewards.clone().map(|r| r.total).sum::<f64>() / n;
    let mean_r_sr = rewards.clone().map(|r| r.r_sr).sum::<f64>() / n;
    let invalid_rate = rewards.filter(|r| r.r_f == 0.0).count() as f64 / n;
    let mean_reasoning_len = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .map(|r| r.output.reasoning.len() as f64)
        .sum::<f64>()
        / n;

    let stats = grpo_update(&mut state.policy, &mut state.optimizer, &groups, config)?;
    state.policy.stage = Stage::Rl;
    let m = StepMetrics {
        step,
        mean_reward,
        mean_r_sr,
        invalid_rate,
        mean_reasoning_len,
        kl: stats.kl,
        grad_norm: stats.grad_norm,
    };
    info!(step, mean_reward, invalid_rate, mean_reasoning_len, kl = stats.kl, "rl step");
    Ok(m)
}

/// Runs steps until `config.max_steps`, calling `hook` after each one (for
/// metric logging and periodic checkpoints).
pub fn rl_train<F>(
    mut state: RlState,
    reference: &Policy,
    data: &[RlExample],
    trie: &SidTrie,
    config: &GrpoConfig,
    mut hook: F,
) -> Result<(RlState, Vec<StepMetrics>), GrpoError>
where
    F: FnMut(&RlState, &StepMetrics) -> Result<(), GrpoError>,
{
    config.validate()?;
    let mut metrics = Vec::new();
    while state.step() < config.max_steps {
        let m = rl_step(&mut state, reference, data, trie, config)?;
        hook(&state, &m)?;
        metrics.push(m);
    }
    Ok((state, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub examples: usize,
    pub samples: usize,
    pub mean_reward: f64,
    pub mean_r_sr: f64,
    pub invalid_rate: f64,
    pub mean_reasoning_len: f64,
}

/// Mean reward of `samples` rollouts per example, decoded with `opts`
/// (its seed is mixed with the example and sample index).
pub fn evaluate_rewards(
    policy: &Policy,
    data: &[RlExample],
    trie: &SidTrie,
    opts: &DecodeOptions,
    samples: usize,
    lambda: f64,
) -> Result<RewardSummary, GrpoError> {
    if data.is_empty() || samples == 0 {
        return Err(GrpoError::NoData);
    }
    let per: Vec<(f64, f64, f64, f64)> = data
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut acc = (0.0, 0.0, 0.0, 0.0);
            for s in 0..samples {
                let o = DecodeOptions {
                    seed: mix(mix(opts.seed, i as u64 + 1), s as u64 + 1),
                    ..*opts
                };
                let out = generate(policy, &ex.context, trie, &o)?;
                let r = compute_reward_text(&out.answer_text(&policy.vocab), &ex.sid, trie, lambda)?;
                acc.0 += r.total;
                acc.1 += r.r_sr;
                acc.2 += f64::from(u8::from(r.r_f == 0.0));
                acc.3 += out.reasoning.len() as f64;
            }
            Ok(acc)
        })
        .collect::<Result<_, GrpoError>>()?;
    let n = (data.len() * samples) as f64;
    let sum = |f: fn(&(f64, f64, f64, f64)) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(RewardSummary {
        examples: data.len(),
        samples,
        mean_reward: sum(|p| p.0),
        mean_r_sr: sum(|p| p.1),
        invalid_rate: sum(|p| p.2),
        mean_reasoning_len: sum(|p| p.3),
    })
}
