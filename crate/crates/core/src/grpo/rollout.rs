use serde::{Deserialize, Serialize};

use super::{GrpoConfig, GrpoError};
use crate::policy::{generate_from, log_softmax, prefill, DecodeOptions, GenerationOutput, Policy};
use crate::sidspace::{compute_reward_text, RewardBreakdown, SemanticId, SidTrie};

/// One sampled trajectory with its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub output: GenerationOutput,
    /// Acting-policy log-probabilities recorded while sampling.
    pub old_logprobs: Vec<f64>,
    /// Frozen reference policy's log-probabilities of the same tokens.
    pub ref_logprobs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub context: Vec<u32>,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    /// All rewards equal: no policy-gradient signal.
    pub skip: bool,
}

/// Seed of rollout `k` in a group seeded with `seed`.
fn rollout_seed(seed: u64, k: usize) -> u64 {
    let mut z = seed ^ (k as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 31)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 29)
}

fn score_tokens(policy: &Policy, context: &[u32], tokens: &[u32]) -> Result<Vec<f64>, GrpoError> {
    let (mut cache, mut logits) = prefill(policy, context)?;
    let mut out = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        out.push(log_softmax(&logits)[t as usize]);
        if i + 1 < tokens.len() {
            logits = policy.feed(&mut cache, &[t])?;
        }
    }
    Ok(out)
}

/// Samples `group_size` trajectories for one context from the acting policy
/// and scores them under the reference policy. The context is prefilled once
/// and shared by every rollout.
pub fn rollout_group(
    old: &Policy,
    reference: &Policy,
    context: &[u32],
    trie: &SidTrie,
    config: &GrpoConfig,
    seed: u64,
) -> Result<TrajectoryGroup, GrpoError> {
    let (cache, logits) = prefill(old, context)?;
    let mut rollouts = Vec::with_capacity(config.group_size);
    for k in 0..config.group_size {
        let opts = DecodeOptions {
            temperature: config.temperature,
            max_reasoning_tokens: config.max_reasoning_tokens,
            constrained: config.constrained,
            seed: rollout_seed(seed, k),
        };
        let output = generate_from(old, cache.clone(), logits.clone(), trie, &opts)?;
        let ref_logprobs = score_tokens(reference, context, &output.tokens())?;
        rollouts.push(Rollout {
            old_logprobs: output.logprobs.clone(),
            ref_logprobs,
            output,
        });
    }
    Ok(TrajectoryGroup {
        context: context.to_vec(),
        rollouts,
        rewards: Vec::new(),
        advantages: Vec::new(),
        skip: false,
    })
}

/// Fills in rewards (answer span against the ground truth) and advantages.
pub fn score_group(
    group: &mut TrajectoryGroup,
    policy: &Policy,
    trie: &SidTrie,
    truth: &SemanticId,
    lambda: f64,
    adv_eps: f64,
) -> Result<(), GrpoError> {
    group.rewards = group
        .rollouts
        .iter()
        .map(|r| compute_reward_text(&r.output.answer_text(&policy.vocab), truth, trie, lambda))
        .collect::<Result<_, _>>()?;
    let totals: Vec<f64> = group.rewards.iter().map(|r| r.total).collect();
    let (adv, skip) = group_advantages(&totals, adv_eps);
    group.advantages = adv;
    group.skip = skip;
    Ok(())
}

/// `(R − mean) / (std + ε)` with the population standard deviation. A group
/// whose rewards are all equal gets exactly zero advantages and `skip = true`.
pub fn group_advantages(rewards: &[f64], eps: f64) -> (Vec<f64>, bool) {
    if rewards.is_empty() || rewards.iter().all(|&r| r == rewards[0]) {
        return (vec![0.0; rewards.len()], true);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    (rewards.iter().map(|r| (r - mean) / (std + eps)).collect(), false)
}

/// Non-negative KL estimator `exp(Δ) − Δ − 1` with `Δ = logp_ref − logp`.
pub fn kl_estimate(logp: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp;
    (d.exp() - d - 1.0).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_rewards_skip() {
        let (a, skip) = group_advantages(&[0.5; 4], 1e-6);
        assert!(skip);
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_group() {
        let (a, skip) = group_advantages(&[0.0, 1.0], 1e-6);
        assert!(!skip);
        assert!((a[0] + 1.0).abs() < 1e-5 && (a[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn kl_zero_only_at_equality() {
        assert_eq!(kl_estimate(-1.3, -1.3), 0.0);
        assert!(kl_estimate(-1.0, -2.0) > 0.0);
        assert!(kl_estimate(-2.0, -1.0) > 0.0);
    }

    /// Every total reward reachable with three levels and λ = 0.1.
    const REWARDS: [f64; 9] = [0.0, 0.125, 0.225, 0.25, 0.35, 0.5, 0.6, 1.0, 1.1];

    proptest! {
        #[test]
        fn advantage_identities(r in proptest::collection::vec(prop::sample::select(REWARDS.to_vec()), 2..16), c in -5.0f64..5.0, s in 0.1f64..10.0) {
            let (a, skip) = group_advantages(&r, 1e-6);
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            if !skip {
                let std = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
                prop_assume!(std > 0.0);
                prop_assert!((1.0 - 1e-3..=1.0).contains(&std), "std {std}");
                let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
                let (b, _) = group_advantages(&shifted, 1e-6);
                for i in 0..a.len() {
                    prop_assert!((a[i] - b[i]).abs() < 1e-9);
                }
                // scaling moves ε relative to the spread: the identity is exact
                // as ε → 0 and off by at most |Â|·ε·|1 − 1/s| / std otherwise
                let scaled: Vec<f64> = r.iter().map(|v| v * s).collect();
                let (a0, _) = group_advantages(&r, 1e-12);
                let (d0, _) = group_advantages(&scaled, 1e-12);
                let (d, _) = group_advantages(&scaled, 1e-6);
                let n = r.len() as f64;
                let m = r.iter().sum::<f64>() / n;
                let sd = (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                for i in 0..a.len() {
                    prop_assert!((a0[i] - d0[i]).abs() < 1e-9);
                    prop_assert!((a[i] - d[i]).abs() <= a[i].abs() * 1e-6 * (1.0 - 1.0 / s).abs() / sd + 1e-12);
                }
            }
        }

        #[test]
        fn kl_non_negative(lp in -30.0f64..0.0, lr in -30.0f64..0.0) {
            prop_assert!(kl_estimate(lp, lr) >= 0.0);
        }
    }
}
