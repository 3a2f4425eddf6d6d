//! Group-relative policy optimization over reason-then-recommend rollouts.

mod rollout;
mod train;
mod update;

pub use rollout::{group_advantages, kl_estimate, rollout_group, score_group, Rollout, TrajectoryGroup};
pub use train::{evaluate_rewards, rl_examples, rl_init, rl_step, rl_train, RewardSummary, RlExample, RlState, StepMetrics};
pub use update::{grpo_update, surrogate, UpdateStats};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, OptimizerKind};
use crate::policy::PolicyError;
use crate::sidspace::SidError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// One importance ratio per token.
    Token,
    /// One ratio per trajectory from the summed log-ratio, clamped to [−5, 5].
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    /// Rollouts per context.
    pub group_size: usize,
    pub kl_coef: f64,
    /// Clip half-width η of the surrogate.
    pub clip: f64,
    /// Format reward λ for catalog-valid answers.
    pub lambda: f64,
    /// Contexts per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub adv_eps: f64,
    pub ratio_mode: RatioMode,
    pub max_steps: usize,
    pub max_reasoning_tokens: usize,
    /// Trie-mask answers during rollouts.
    pub constrained: bool,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_coef: 1e-3,
            clip: 0.2,
            lambda: 0.1,
            batch_size: 32,
            learning_rate: 1e-4,
            temperature: 1.0,
            adv_eps: 1e-6,
            ratio_mode: RatioMode::Token,
            max_steps: 100,
            max_reasoning_tokens: 64,
            constrained: false,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            checkpoint_every: 25,
            seed: 31,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.temperature > 0.0 && self.adv_eps > 0.0) {
            return bad("learning_rate, temperature and adv_eps must be positive");
        }
        if !(self.kl_coef >= 0.0 && self.lambda >= 0.0 && self.weight_decay >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("kl_coef, lambda, weight_decay must be non-negative and max_grad_norm positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid rl config: {0}")]
    InvalidConfig(String),
    #[error("rl training starts from an activated checkpoint, got stage `{0}`")]
    WrongStage(&'static str),
    #[error("no training contexts")]
    NoData,
    #[error("target item `{0}` has no SID")]
    UnknownTarget(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sid(#[from] SidError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
