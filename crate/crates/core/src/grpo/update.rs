use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kl_estimate, GrpoConfig, GrpoError, RatioMode, TrajectoryGroup};
use crate::numerics::{Optimizer, Tape, Var};
use crate::policy::{forward_logits, Policy};

/// Clamp applied to summed log-ratios in trajectory mode.
const TRAJECTORY_LOG_RATIO_CLAMP: f64 = 5.0;

/// Clipped surrogate `min(ρÂ, clip(ρ, 1−η, 1+η)Â)`.
pub fn surrogate(rho: f64, adv: f64, clip: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Whether the unclipped branch carries the gradient (ties go to it).
fn unclipped_active(rho: f64, adv: f64, clip: f64) -> bool {
    rho * adv <= rho.clamp(1.0 - clip, 1.0 + clip) * adv
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Minimized loss: −(surrogate − β·KL).
    pub loss: f64,
    pub policy_objective: f64,
    /// Mean per-token KL estimate to the reference.
    pub kl: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub ratio_mean: f64,
    /// Largest |ρ − 1| over all ratios.
    pub ratio_max_dev: f64,
    /// Fraction of ratios whose gradient was cut by the clip.
    pub clip_frac: f64,
    pub trajectories: usize,
    pub tokens: usize,
}

/// Per-trajectory contribution: gradient plus the scalar terms it adds.
struct Piece {
    grads: Vec<Vec<f64>>,
    objective: f64,
    kl: f64,
    ratios: Vec<f64>,
    clipped: usize,
}

/// Gradient of `Σ_t c_t · logp_t` plus the surrogate and KL terms for one
/// trajectory. The per-token coefficients are the derivatives of the
/// objective with respect to each log-probability, so this single weighted
/// sum reproduces the full gradient.
fn trajectory_piece(
    policy: &Policy,
    context: &[u32],
    rollout: &super::Rollout,
    adv: f64,
    weight_traj: f64,
    weight_tok: f64,
    config: &GrpoConfig,
) -> Result<Piece, GrpoError> {
    let tokens = rollout.output.tokens();
    let n = tokens.len();
    let mut ids = context.to_vec();
    ids.extend_from_slice(&tokens);
    let mut tape = Tape::new();
    let pv: Vec<Var> = policy.params.iter().map(|p| tape.param(p)).collect();
    let logits = forward_logits(&mut tape, &pv, &policy.config, &ids[..ids.len() - 1])?;
    let rows: Vec<usize> = (context.len() - 1..ids.len() - 1).collect();
    let rows = tape.gather_rows(logits, &rows)?;
    let targets: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let lp_var = tape.pick_log_prob(rows, &targets)?;
    let lp = tape.value(lp_var).data().to_vec();

    let beta = config.kl_coef;
    let mut coef = vec![0.0; n];
    let mut kl = 0.0;
    for t in 0..n {
        let delta = rollout.ref_logprobs[t] - lp[t];
        kl += kl_estimate(lp[t], rollout.ref_logprobs[t]);
        // d/dlogp of −β·KL is β(exp(Δ) − 1); the loss carries the opposite sign
        coef[t] = beta * weight_tok * (1.0 - delta.exp());
    }
    let mut objective = 0.0;
    let mut ratios = Vec::new();
    let mut clipped = 0;
    match config.ratio_mode {
        RatioMode::Token => {
            for t in 0..n {
                let rho = (lp[t] - rollout.old_logprobs[t]).exp();
                objective += weight_tok * surrogate(rho, adv, config.clip);
                if adv != 0.0 {
                    if unclipped_active(rho, adv, config.clip) {
                        coef[t] -= weight_tok * rho * adv;
                    } else {
                        clipped += 1;
                    }
                }
                ratios.push(rho);
            }
        }
        RatioMode::Trajectory => {
            let log_ratio: f64 = (0..n).map(|t| lp[t] - rollout.old_logprobs[t]).sum();
            let clamped = log_ratio.clamp(-TRAJECTORY_LOG_RATIO_CLAMP, TRAJECTORY_LOG_RATIO_CLAMP);
            let rho = clamped.exp();
            objective += weight_traj * surrogate(rho, adv, config.clip);
            if adv != 0.0 {
                if unclipped_active(rho, adv, config.clip) && clamped == log_ratio {
                    coef.iter_mut().for_each(|c| *c -= weight_traj * rho * adv);
                } else {
                    clipped += 1;
                }
            }
            ratios.push(rho);
        }
    }
    let out = tape.weighted_sum(lp_var, &coef)?;
    let mut g = tape.backward(out)?;
    let grads = pv
        .iter()
        .zip(&policy.params)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok(Piece {
        grads,
        objective,
        kl: kl * weight_tok,
        ratios,
        clipped,
    })
}

/// One optimizer step on the clipped, KL-regularized surrogate.
///
/// Each trajectory's terms are averaged over its tokens, then over all
/// trajectories in the batch. Trajectories with no tokens contribute
/// nothing. Old log-probabilities are the ones recorded at sampling time.
pub fn grpo_update(
    policy: &mut Policy,
    optimizer: &mut Optimizer,
    groups: &[TrajectoryGroup],
    config: &GrpoConfig,
) -> Result<UpdateStats, GrpoError> {
    let (mut stats, mut grads) = loss_and_grads(policy, groups, config)?;
    stats.grad_norm = optimizer.step(&mut policy.params, &mut grads);
    Ok(stats)
}

/// Loss statistics and the loss gradient at the current parameters.
pub(crate) fn loss_and_grads(
    policy: &Policy,
    groups: &[TrajectoryGroup],
    config: &GrpoConfig,
) -> Result<(UpdateStats, Vec<Vec<f64>>), GrpoError> {
    let jobs: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.rollouts.len()).map(move |k| (gi, k)))
        .filter(|&(gi, k)| !groups[gi].rollouts[k].output.tokens().is_empty())
        .collect();
    if jobs.is_empty() {
        return Err(GrpoError::NoData);
    }
    let total = jobs.len() as f64;
    let pieces: Vec<Piece> = jobs
        .par_iter()
        .map(|&(gi, k)| {
            let g = &groups[gi];
            let r = &g.rollouts[k];
            let adv = if g.skip { 0.0 } else { g.advantages.get(k).copied().unwrap_or(0.0) };
            let n = r.output.tokens().len() as f64;
            trajectory_piece(policy, &g.context, r, adv, 1.0 / total, 1.0 / (total * n), config)
        })
        .collect::<Result<_, _>>()?;

    let mut grads: Vec<Vec<f64>> = policy.params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut stats = UpdateStats {
        trajectories: jobs.len(),
        ..UpdateStats::default()
    };
    let mut ratio_count = 0usize;
    for p in &pieces {
        for (acc, g) in grads.iter_mut().zip(&p.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        stats.policy_objective += p.objective;
        stats.kl += p.kl;
        for &r in &p.ratios {
            stats.ratio_mean += r;
            stats.ratio_max_dev = stats.ratio_max_dev.max((r - 1.0).abs());
        }
        ratio_count += p.ratios.len();
        stats.clip_frac += p.clipped as f64;
    }
    stats.tokens = jobs.iter().map(|&(gi, k)| groups[gi].rollouts[k].output.tokens().len()).sum();
    stats.ratio_mean /= ratio_count.max(1) as f64;
    stats.clip_frac /= ratio_count.max(1) as f64;
    stats.loss = -(stats.policy_objective - config.kl_coef * stats.kl);
    Ok((stats, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::{rollout_group, RatioMode};
    use crate::numerics::OptimizerKind;
    use crate::policy::{PolicyConfig, VocabSpec};
    use crate::quantizer::SidAssignment;
    use crate::sidspace::{build_trie, SemanticId, SidTrie, SidVocab};

    fn setup() -> (Policy, Policy, SidTrie) {
        let vocab = VocabSpec::new(SidVocab::new(2, 3, 0), ["hello", "world", "red", "blue"].map(String::from));
        let cfg = PolicyConfig {
            layers: 2,
            heads: 2,
            width: 8,
            ff_width: 12,
            context_len: 32,
            seed: 5,
        };
        let policy = Policy::init(cfg.clone(), vocab.clone()).unwrap();
        let reference = Policy::init(PolicyConfig { seed: 6, ..cfg }, vocab).unwrap();
        let a = SidAssignment::from_entries(
            2,
            3,
            [(0, 1), (0, 2), (1, 0), (2, 2)].map(|(x, y)| (format!("i{x}{y}"), SemanticId::new(vec![x, y], 0))),
        );
        (policy, reference, build_trie(&a).unwrap())
    }

    fn groups(policy: &Policy, reference: &Policy, trie: &SidTrie, config: &GrpoConfig) -> Vec<TrajectoryGroup> {
        (0..2)
            .map(|i| {
                let mut g = rollout_group(policy, reference, &[3, 13 + i, 14], trie, config, 40 + i as u64).unwrap();
                g.advantages = (0..g.rollouts.len()).map(|k| k as f64 - 1.5 + 0.3 * i as f64).collect();
                g
            })
            .collect()
    }

    fn config(mode: RatioMode) -> GrpoConfig {
        GrpoConfig {
            group_size: 4,
            max_reasoning_tokens: 5,
            kl_coef: 0.3,
            ratio_mode: mode,
            ..GrpoConfig::default()
        }
    }

    #[test]
    fn first_update_has_unit_ratios() {
        let (p, r, trie) = setup();
        for mode in [RatioMode::Token, RatioMode::Trajectory] {
            let cfg = config(mode);
            let (stats, _) = loss_and_grads(&p, &groups(&p, &r, &trie, &cfg), &cfg).unwrap();
            assert_eq!(stats.ratio_max_dev, 0.0);
            assert_eq!(stats.ratio_mean, 1.0);
            assert_eq!(stats.clip_frac, 0.0);
        }
    }

    /// The coefficient-weighted gradient matches a central difference of the
    /// loss value along a random direction, away from θ_old so ρ ≠ 1.
    #[test]
    fn gradient_matches_loss_difference() {
        let (p, r, trie) = setup();
        for mode in [RatioMode::Token, RatioMode::Trajectory] {
            let cfg = config(mode);
            let gs = groups(&p, &r, &trie, &cfg);
            let mut moved = p.clone();
            let mut k = 0.0f64;
            for t in &mut moved.params {
                for v in t.data_mut() {
                    k += 1.0;
                    *v += 0.01 * (k * 0.37).sin();
                }
            }
            let (_, g) = loss_and_grads(&moved, &gs, &cfg).unwrap();
            let dir: Vec<Vec<f64>> = g.iter().enumerate().map(|(i, gi)| gi.iter().enumerate().map(|(j, _)| ((i * 31 + j) as f64 * 0.71).cos()).collect()).collect();
            let h = 1e-5;
            let at = |s: f64| {
                let mut q = moved.clone();
                for (t, d) in q.params.iter_mut().zip(&dir) {
                    t.data_mut().iter_mut().zip(d).for_each(|(v, dv)| *v += s * dv);
                }
                loss_and_grads(&q, &gs, &cfg).unwrap().0.loss
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let analytic: f64 = g.iter().flatten().zip(dir.iter().flatten()).map(|(a, b)| a * b).sum();
            assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3), "{mode:?}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn zero_advantage_without_kl_is_a_no_op() {
        let (mut p, r, trie) = setup();
        let mut cfg = config(RatioMode::Token);
        cfg.kl_coef = 0.0;
        let mut gs = groups(&p, &r, &trie, &cfg);
        for g in &mut gs {
            g.advantages.iter_mut().for_each(|a| *a = 0.0);
        }
        gs[1].skip = true;
        let before = p.params.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 1e-2, 0.0, Some(1.0));
        let stats = grpo_update(&mut p, &mut opt, &gs, &cfg).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(p.params, before);
    }

    #[test]
    fn clip_arithmetic() {
        assert!((surrogate(1.5, 2.0, 0.2) - 1.2 * 2.0).abs() < 1e-15);
        assert_eq!(surrogate(1.5, -2.0, 0.2), -3.0);
        assert_eq!(surrogate(0.5, -2.0, 0.2), -1.6);
        assert_eq!(surrogate(1.0, 0.7, 0.2), 0.7);
        assert!(!unclipped_active(1.5, 2.0, 0.2));
        assert!(unclipped_active(1.0, 2.0, 0.2));
    }
}
