use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::residual::{kmeans, quantize_residual};
use super::{QuantizerError, RqVaeConfig};
use crate::numerics::{Optimizer, OptimizerKind, Tape, Tensor, Unary, Var};

const FORMAT: &str = "sidrec-quantizer";
const VERSION: u32 = 1;

/// Perceptron with tanh hidden layers and a linear output layer. Weights
/// are `[in, out]`, biases `[1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let v: Vec<f64> = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Tensor::from_parts(w[0], w[1], v));
            biases.push(Tensor::zeros(&[1, w[1]]));
        }
        Self { weights, biases }
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, vars: &mut Vec<Var>) -> Result<Var, QuantizerError> {
        let mut h = x;
        let n = self.weights.len();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (wv, bv) = (tape.param(w), tape.param(b));
            vars.push(wv);
            vars.push(bv);
            let lin = tape.matmul(h, wv)?;
            h = tape.add_row(lin, bv)?;
            if i + 1 < n {
                h = tape.map(h, Unary::Tanh)?;
            }
        }
        Ok(h)
    }

    /// Plain forward pass on rows.
    pub fn apply(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, QuantizerError> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_rows(x)?);
        let out = self.forward(&mut tape, xv, &mut Vec::new())?;
        let t = tape.value(out);
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }
}

/// Encoder, decoder and the `L` codebooks (`[K, d]` each).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub config: RqVaeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: Vec<Tensor>,
}

impl QuantizerState {
    /// Fresh networks; codebooks start at zero until k-means fills them.
    pub fn init(config: &RqVaeConfig, input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, QuantizerError> {
        config.validate()?;
        let (h, hd, d) = (config.encoder_hidden, config.decoder_hidden, config.latent_dim);
        Ok(Self {
            config: config.clone(),
            encoder: Mlp::init(&[input_dim, h, h, d], rng),
            decoder: Mlp::init(&[d, hd, hd, input_dim], rng),
            codebooks: (0..config.levels).map(|_| Tensor::zeros(&[config.codebook_size, d])).collect(),
        })
    }

    pub fn encode(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, QuantizerError> {
        self.encoder.apply(x)
    }

    /// Code tuple of every row of `x`.
    pub fn codes(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<u32>>, QuantizerError> {
        Ok(self.encode(x)?.iter().map(|z| quantize_residual(&self.codebooks, z).codes).collect())
    }

    fn validate(&self) -> Result<(), String> {
        let c = &self.config;
        c.validate().map_err(|e| e.to_string())?;
        if self.codebooks.len() != c.levels {
            return Err(format!("expected {} codebooks, found {}", c.levels, self.codebooks.len()));
        }
        for cb in &self.codebooks {
            if cb.shape() != [c.codebook_size, c.latent_dim] {
                return Err(format!("codebook shape {:?}", cb.shape()));
            }
        }
        let mut all = self.encoder.params().chain(self.decoder.params()).chain(&self.codebooks);
        if all.any(|t| !t.is_finite()) {
            return Err("non-finite parameter".into());
        }
        let nets_ok = self.encoder.output_dim() == c.latent_dim
            && self.decoder.input_dim() == c.latent_dim
            && self.decoder.output_dim() == self.encoder.input_dim()
            && self.encoder.weights.len() == self.encoder.biases.len()
            && self.decoder.weights.len() == self.decoder.biases.len();
        if !nets_ok {
            return Err("encoder/decoder shapes disagree with config".into());
        }
        Ok(())
    }

    fn take_params(&mut self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = Vec::new();
        for p in self.encoder.params_mut().into_iter().chain(self.decoder.params_mut()) {
            out.push(std::mem::replace(p, Tensor::scalar(0.0)));
        }
        out.append(&mut self.codebooks);
        out
    }

    fn put_params(&mut self, mut all: Vec<Tensor>) {
        self.codebooks = all.split_off(all.len() - self.config.levels);
        let mut it = all.into_iter();
        for p in self.encoder.params_mut().into_iter().chain(self.decoder.params_mut()) {
            *p = it.next().expect("parameter count");
        }
    }
}

/// Batch-mean loss values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqLosses {
    pub recon: f64,
    pub rq: f64,
    pub total: f64,
}

struct Built {
    recon: Var,
    rq: Var,
    total: Var,
    params: Vec<Var>,
    codes: Vec<Vec<u32>>,
    /// Per level, the residual entering that level for every row.
    level_inputs: Vec<Vec<Vec<f64>>>,
}

fn build<'a>(tape: &mut Tape<'a>, state: &'a QuantizerState, batch: &[Vec<f64>]) -> Result<Built, QuantizerError> {
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let beta = state.config.beta_commit;
    let x = tape.constant(Tensor::from_rows(batch)?);
    let mut params = Vec::new();
    let z = state.encoder.forward(tape, x, &mut params)?;
    let zval = tape.value(z).clone();
    let d = zval.cols();
    let quant: Vec<_> = (0..b).map(|r| quantize_residual(&state.codebooks, zval.row_slice(r))).collect();
    let qsum: Vec<f64> = quant.iter().flat_map(|q| q.sum.iter().copied()).collect();

    // straight-through: forward value is the quantized sum, gradient goes to z
    let shift: Vec<f64> = qsum.iter().zip(zval.data()).map(|(q, z)| q - z).collect();
    let shift = tape.constant(Tensor::from_parts(b, d, shift));
    let dec_in = tape.add(z, shift)?;
    let mut dec_params = Vec::new();
    let xhat = state.decoder.forward(tape, dec_in, &mut dec_params)?;
    let diff = tape.sub(xhat, x)?;
    let sq = tape.map(diff, Unary::Square)?;
    let s = tape.sum(sq)?;
    let recon = tape.scale(s, inv_b)?;

    let mut rq: Option<Var> = None;
    let mut prefix = vec![0.0; b * d];
    let mut level_inputs = Vec::with_capacity(state.codebooks.len());
    let mut cb_vars = Vec::new();
    for (l, cb) in state.codebooks.iter().enumerate() {
        let codes: Vec<usize> = quant.iter().map(|q| q.codes[l] as usize).collect();
        let cbv = tape.param(cb);
        cb_vars.push(cbv);
        let e = tape.gather_rows(cbv, &codes)?;
        let r_prev: Vec<f64> = zval.data().iter().zip(&prefix).map(|(z, p)| z - p).collect();
        level_inputs.push(r_prev.chunks(d).map(<[f64]>::to_vec).collect());
        // codebook term: sg[r] − e
        let r_const = tape.constant(Tensor::from_parts(b, d, r_prev));
        let t1 = tape.sub(r_const, e)?;
        let t1 = tape.map(t1, Unary::Square)?;
        let mut term = tape.sum(t1)?;
        // commitment term: r − sg[e], with r built from z minus fixed earlier codewords
        if beta > 0.0 {
            let p_const = tape.constant(Tensor::from_parts(b, d, prefix.clone()));
            let r = tape.sub(z, p_const)?;
            let e_val = tape.value(e).clone();
            let e_const = tape.constant(e_val);
            let t2 = tape.sub(r, e_const)?;
            let t2 = tape.map(t2, Unary::Square)?;
            let t2 = tape.sum(t2)?;
            let t2 = tape.scale(t2, beta)?;
            term = tape.add(term, t2)?;
        }
        rq = Some(match rq {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        let e_val = tape.value(e).data();
        for (p, v) in prefix.iter_mut().zip(e_val) {
            *p += v;
        }
    }
    let rq = tape.scale(rq.expect("at least one level"), inv_b)?;
    let total = tape.add(recon, rq)?;
    params.extend(dec_params);
    params.extend(cb_vars);
    Ok(Built {
        recon,
        rq,
        total,
        params,
        codes: quant.into_iter().map(|q| q.codes).collect(),
        level_inputs,
    })
}

/// Reconstruction, residual-quantization and total loss on a batch.
pub fn rqvae_losses(state: &QuantizerState, batch: &[Vec<f64>]) -> Result<RqLosses, QuantizerError> {
    let mut tape = Tape::new();
    let b = build(&mut tape, state, batch)?;
    Ok(RqLosses {
        recon: tape.value(b.recon).item(),
        rq: tape.value(b.rq).item(),
        total: tape.value(b.total).item(),
    })
}

/// Losses plus gradients of `which` (0 = total, 1 = recon, 2 = rq) for
/// encoder, decoder and codebook parameters, in that order.
pub fn rqvae_loss_and_grads(
    state: &QuantizerState,
    batch: &[Vec<f64>],
    which: usize,
) -> Result<(RqLosses, Vec<Vec<f64>>), QuantizerError> {
    let (l, g, _, _) = loss_grads_full(state, batch, which)?;
    Ok((l, g))
}

type Full = (RqLosses, Vec<Vec<f64>>, Vec<Vec<u32>>, Vec<Vec<Vec<f64>>>);

fn loss_grads_full(state: &QuantizerState, batch: &[Vec<f64>], which: usize) -> Result<Full, QuantizerError> {
    let mut tape = Tape::new();
    let b = build(&mut tape, state, batch)?;
    let out = [b.total, b.recon, b.rq][which];
    let mut grads = tape.backward(out)?;
    let g = b
        .params
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    let losses = RqLosses {
        recon: tape.value(b.recon).item(),
        rq: tape.value(b.rq).item(),
        total: tape.value(b.total).item(),
    };
    Ok((losses, g, b.codes, b.level_inputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub rq: f64,
    pub reseeded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-data losses right after codebook initialization.
    pub initial: RqLosses,
    pub epochs: Vec<EpochStats>,
    /// Full-data losses after the last epoch.
    pub final_losses: RqLosses,
    /// Fraction of codewords used per level on the full data.
    pub utilization: Vec<f64>,
}

/// Trains encoder, decoder and codebooks on `embeddings` with Adam.
///
/// Codebooks are initialized by k-means on each level's residuals of the
/// initial encoder outputs. After every epoch, codewords that no batch
/// selected are re-seeded to a random residual from the epoch's last batch.
pub fn train_rqvae(config: &RqVaeConfig, embeddings: &[Vec<f64>]) -> Result<(QuantizerState, TrainReport), QuantizerError> {
    config.validate()?;
    let n = embeddings.len();
    if n < config.codebook_size {
        return Err(QuantizerError::TooFewEmbeddings {
            n,
            k: config.codebook_size,
        });
    }
    let dim = embeddings[0].len();
    if let Some((i, v)) = embeddings.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(QuantizerError::DimensionMismatch {
            item: format!("row {i}"),
            expected: dim,
            got: v.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = QuantizerState::init(config, dim, &mut rng)?;

    let mut residual = state.encode(embeddings)?;
    for l in 0..config.levels {
        let cb = kmeans(&residual, config.codebook_size, config.kmeans_iters, rng.random());
        for r in residual.iter_mut() {
            let k = super::residual::nearest(&cb, r);
            for (x, e) in r.iter_mut().zip(cb.row_slice(k)) {
                *x -= e;
            }
        }
        state.codebooks[l] = cb;
    }
    let initial = rqvae_losses(&state, embeddings)?;

    let mut opt = Optimizer::new(OptimizerKind::Adamw, config.learning_rate, 0.0, None);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![vec![0usize; config.codebook_size]; config.levels];
        let (mut recon, mut rq, mut batches) = (0.0, 0.0, 0usize);
        let mut last_inputs = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| embeddings[i].clone()).collect();
            let (losses, mut grads, codes, inputs) = loss_grads_full(&state, &batch, 0)?;
            for c in &codes {
                for (l, &k) in c.iter().enumerate() {
                    usage[l][k as usize] += 1;
                }
            }
            let mut params = state.take_params();
            opt.step(&mut params, &mut grads);
            state.put_params(params);
            recon += losses.recon;
            rq += losses.rq;
            batches += 1;
            last_inputs = inputs;
        }
        let mut reseeded = 0;
        for l in 0..config.levels {
            for k in 0..config.codebook_size {
                if usage[l][k] == 0 {
                    let pick = &last_inputs[l][rng.random_range(0..last_inputs[l].len())];
                    let d = config.latent_dim;
                    state.codebooks[l].data_mut()[k * d..(k + 1) * d].copy_from_slice(pick);
                    reseeded += 1;
                }
            }
        }
        let stats = EpochStats {
            epoch,
            recon: recon / batches as f64,
            rq: rq / batches as f64,
            reseeded,
        };
        debug!(?stats, "rqvae epoch");
        epochs.push(stats);
    }

    let final_losses = rqvae_losses(&state, embeddings)?;
    let codes = state.codes(embeddings)?;
    let utilization = (0..config.levels)
        .map(|l| {
            let mut used = vec![false; config.codebook_size];
            codes.iter().for_each(|c| used[c[l] as usize] = true);
            used.iter().filter(|u| **u).count() as f64 / config.codebook_size as f64
        })
        .collect();
    Ok((
        state,
        TrainReport {
            initial,
            epochs,
            final_losses,
            utilization,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    state: QuantizerState,
}

pub fn save_quantizer(path: &Path, state: &QuantizerState) -> Result<(), QuantizerError> {
    let err = |message: String| QuantizerError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        state: state.clone(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    }
    let text = serde_json::to_string(&env).map_err(|e| err(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| err(e.to_string()))
}

pub fn load_quantizer(path: &Path) -> Result<QuantizerState, QuantizerError> {
    let err = |message: String| QuantizerError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let env: Envelope = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(err(format!("unrecognized format {} v{}", env.format, env.version)));
    }
    env.state.validate().map_err(err)?;
    Ok(env.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RqVaeConfig {
        RqVaeConfig {
            levels: 2,
            codebook_size: 4,
            latent_dim: 3,
            encoder_hidden: 5,
            decoder_hidden: 5,
            embedding_dim: 8,
            batch_size: 4,
            epochs: 2,
            ..RqVaeConfig::default()
        }
    }

    fn points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn beta_zero_keeps_only_codebook_term() {
        let x = points(6, 8, 1);
        let cfg = small_config();
        let (mut state, _) = train_rqvae(&cfg, &x).unwrap();
        state.config.beta_commit = 0.0;
        let l = rqvae_losses(&state, &x).unwrap();
        let z = state.encode(&x).unwrap();
        let mut want = 0.0;
        for zi in &z {
            let q = quantize_residual(&state.codebooks, zi);
            for r in &q.residuals {
                // ‖r^{l-1} − e‖² = ‖r^l‖²
                want += r.iter().map(|v| v * v).sum::<f64>();
            }
        }
        want /= x.len() as f64;
        assert!((l.rq - want).abs() < 1e-12, "{} vs {}", l.rq, want);
        assert!((l.total - l.recon - l.rq).abs() < 1e-12);
    }

    #[test]
    fn rq_loss_has_zero_decoder_gradient() {
        let x = points(6, 8, 2);
        let (state, _) = train_rqvae(&small_config(), &x).unwrap();
        let (_, g) = rqvae_loss_and_grads(&state, &x, 2).unwrap();
        let n_enc = state.encoder.weights.len() * 2;
        let n_dec = state.decoder.weights.len() * 2;
        assert!(g[n_enc..n_enc + n_dec].iter().flatten().all(|v| *v == 0.0));
        assert!(g[..n_enc].iter().flatten().any(|v| *v != 0.0));
        assert!(g[n_enc + n_dec..].iter().flatten().any(|v| *v != 0.0));
    }

    #[test]
    fn recon_gradient_skips_codebooks_and_reaches_encoder() {
        let x = points(6, 8, 3);
        let (state, _) = train_rqvae(&small_config(), &x).unwrap();
        let (_, g) = rqvae_loss_and_grads(&state, &x, 1).unwrap();
        let n_nets = (state.encoder.weights.len() + state.decoder.weights.len()) * 2;
        assert!(g[n_nets..].iter().flatten().all(|v| *v == 0.0));
        assert!(g[0].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn decoder_perturbation_leaves_rq_unchanged() {
        let x = points(6, 8, 4);
        let (state, _) = train_rqvae(&small_config(), &x).unwrap();
        let mut other = state.clone();
        other.decoder.weights[0].data_mut()[0] += 0.5;
        let (a, b) = (rqvae_losses(&state, &x).unwrap(), rqvae_losses(&other, &x).unwrap());
        assert_eq!(a.rq, b.rq);
        assert_ne!(a.recon, b.recon);
    }

    #[test]
    fn codebook_gradient_matches_closed_form() {
        // d/de_k of mean_b Σ_l ‖sg r^{l-1} − e‖² is −2/B · Σ_{rows picking k} (r^{l-1} − e_k);
        // the commitment term contributes nothing to codewords.
        let x = points(5, 8, 5);
        let (state, _) = train_rqvae(&small_config(), &x).unwrap();
        let z = state.encode(&x).unwrap();
        let (_, got) = rqvae_loss_and_grads(&state, &x, 2).unwrap();
        let n_nets = (state.encoder.weights.len() + state.decoder.weights.len()) * 2;
        let d = state.config.latent_dim;
        for (l, cb) in state.codebooks.iter().enumerate() {
            let mut want = vec![0.0; cb.len()];
            for zi in &z {
                let q = quantize_residual(&state.codebooks, zi);
                let prev = if l == 0 { zi.clone() } else { q.residuals[l - 1].clone() };
                let k = q.codes[l] as usize;
                for i in 0..d {
                    want[k * d + i] += -2.0 * (prev[i] - cb.get(k, i)) / x.len() as f64;
                }
            }
            for (u, v) in got[n_nets + l].iter().zip(&want) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn overfits_single_point() {
        let x = points(1, 16, 6);
        let cfg = RqVaeConfig {
            levels: 3,
            codebook_size: 2,
            latent_dim: 4,
            encoder_hidden: 16,
            decoder_hidden: 16,
            embedding_dim: 16,
            learning_rate: 1e-2,
            epochs: 500,
            batch_size: 1,
            ..RqVaeConfig::default()
        };
        // two copies so the codebook size precondition holds
        let data = vec![x[0].clone(), x[0].clone()];
        let (state, report) = train_rqvae(&cfg, &data).unwrap();
        assert!(report.final_losses.recon < 1e-3, "{:?}", report.final_losses);
        let l = rqvae_losses(&state, &x).unwrap();
        assert!(l.recon < 1e-3);
    }

    #[test]
    fn too_few_embeddings_is_an_error() {
        let err = train_rqvae(&small_config(), &points(3, 8, 7));
        assert!(matches!(err, Err(QuantizerError::TooFewEmbeddings { n: 3, k: 4 })));
    }

    #[test]
    fn checkpoint_roundtrip_and_version_check() {
        let x = points(8, 8, 8);
        let (state, _) = train_rqvae(&small_config(), &x).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.json");
        save_quantizer(&path, &state).unwrap();
        assert_eq!(load_quantizer(&path).unwrap(), state);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_quantizer(&path), Err(QuantizerError::Checkpoint { .. })));
    }
}
