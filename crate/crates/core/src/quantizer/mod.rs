//! Residual-quantized autoencoder that turns item embeddings into
//! fixed-length code tuples.
//!
//! Pipeline: [`embed_items`] (or [`load_embeddings`]) → [`train_rqvae`] →
//! [`assign_sids`]. The encoder maps an item embedding `x` to a latent `z`;
//! `z` is quantized level by level against `L` codebooks, and the decoder
//! reconstructs `x` from the summed codewords.

mod assign;
mod embed;
mod model;
mod residual;

pub use assign::{assign_sids, load_sid_map, write_sid_map, SidAssignment, SidRow};
pub use embed::{align_embeddings, embed_items, load_embeddings, EmbeddingRow};
pub use model::{
    load_quantizer, rqvae_loss_and_grads, rqvae_losses, save_quantizer, train_rqvae, EpochStats, Mlp, QuantizerState,
    RqLosses, TrainReport,
};
pub use residual::{kmeans, quantize_residual, Quantized};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DataError;
use crate::numerics::NumericsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RqVaeConfig {
    /// Number of codebooks `L`.
    pub levels: usize,
    /// Codewords per level `K`.
    pub codebook_size: usize,
    /// Latent dimension `d` of the quantized space.
    pub latent_dim: usize,
    /// Commitment weight β.
    pub beta_commit: f64,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Dimension of the hashed text embedding fed to the encoder.
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 16,
            latent_dim: 16,
            beta_commit: 0.25,
            encoder_hidden: 64,
            decoder_hidden: 64,
            embedding_dim: 64,
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 64,
            kmeans_iters: 20,
            seed: 11,
        }
    }
}

impl RqVaeConfig {
    pub fn validate(&self) -> Result<(), QuantizerError> {
        let bad = |m: &str| Err(QuantizerError::InvalidConfig(m.to_string()));
        if self.levels == 0 || self.levels > 25 {
            return bad("levels must be in 1..=25");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.latent_dim == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 || self.batch_size == 0 {
            return bad("latent_dim, hidden widths and batch_size must be positive");
        }
        if self.embedding_dim < 8 {
            return bad("embedding_dim must be at least 8");
        }
        if !(self.beta_commit >= 0.0 && self.beta_commit.is_finite()) {
            return bad("beta_commit must be a finite non-negative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("invalid quantizer config: {0}")]
    InvalidConfig(String),
    #[error("need at least {k} embeddings to fill a codebook, got {n}")]
    TooFewEmbeddings { n: usize, k: usize },
    #[error("embedding for `{item}` has dimension {got}, expected {expected}")]
    DimensionMismatch { item: String, expected: usize, got: usize },
    #[error("no embedding for item `{0}`")]
    MissingEmbedding(String),
    #[error("non-finite embedding for item `{0}`")]
    NonFiniteEmbedding(String),
    #[error("SID map: {0}")]
    InvalidSidMap(String),
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}
