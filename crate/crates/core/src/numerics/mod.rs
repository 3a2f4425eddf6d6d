//! Dense `f64` arrays with a reverse-mode gradient tape.
//!
//! This is the computation substrate for the quantizer networks and the
//! policy model. See [`tape`] for the closed list of supported primitives.

mod check;
mod optim;
pub mod tape;
mod tensor;

pub use check::{central_difference, grad_check};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind, OptimizerState};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

pub(crate) use tape::{log_softmax_parts, mean_var, softmax_into};
pub(crate) use tensor::{matmul_acc, matmul_nt_acc};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("gradient requested for non-scalar output of shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("function returned no outputs")]
    NoOutputs,
}

/// Builds a tape with `build`, then differentiates its first output.
///
/// `build` receives the tape, parameter handles and input handles (inputs
/// are constants). The first returned output must hold a single value;
/// returned gradients line up with `params`, and are exactly zero for
/// parameters the output does not depend on.
pub fn forward_backward<F>(
    build: F,
    params: &[Tensor],
    inputs: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<Tensor>), NumericsError>
where
    F: FnOnce(&mut Tape<'_>, &[Var], &[Var]) -> Result<Vec<Var>, NumericsError>,
{
    let mut tape = Tape::new();
    let pv: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let iv: Vec<Var> = inputs.iter().map(|x| tape.constant_ref(x)).collect();
    let outs = build(&mut tape, &pv, &iv)?;
    let first = *outs.first().ok_or(NumericsError::NoOutputs)?;
    let grads = tape.backward(first)?;
    let outputs: Vec<Tensor> = outs.iter().map(|&o| tape.value(o).clone()).collect();
    if let Some(bad) = outputs.iter().position(|t| !t.is_finite()) {
        return Err(NumericsError::NonFinite {
            context: format!("output {bad}"),
        });
    }
    let gradients = pv.iter().map(|&v| grads.wrt(v)).collect();
    Ok((outputs, gradients))
}

/// Numerically stable `−log softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::IndexOutOfRange {
            op: "softmax_cross_entropy",
            index: target,
            bound: logits.len(),
        });
    }
    let mut scratch = vec![0.0; logits.len()];
    let lse = log_softmax_parts(logits, &mut scratch);
    Ok((lse - logits[target]).max(0.0))
}

/// Row layer normalization outside the tape.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let (mu, var) = mean_var(x);
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * (v - mu) * inv + b)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_fb<F>(f: F, params: &[Tensor]) -> (f64, Vec<Tensor>)
    where
        F: FnOnce(&mut Tape<'_>, &[Var]) -> Result<Var, NumericsError>,
    {
        let (o, g) = forward_backward(|t, p, _| Ok(vec![f(t, p)?]), params, &[]).unwrap();
        (o[0].item(), g)
    }

    #[test]
    fn identity_has_unit_gradient() {
        let (v, g) = scalar_fb(|_, p| Ok(p[0]), &[Tensor::scalar(5.0)]);
        assert_eq!(v, 5.0);
        assert_eq!(g[0].data(), &[1.0]);
    }

    #[test]
    fn product_rule() {
        let (v, g) = scalar_fb(|t, p| t.mul(p[0], p[1]), &[Tensor::scalar(2.0), Tensor::scalar(3.0)]);
        assert_eq!(v, 6.0);
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(g[1].data(), &[2.0]);
    }

    #[test]
    fn unused_parameter_gradient_is_exactly_zero() {
        let (_, g) = scalar_fb(
            |t, p| {
                let s = t.map(p[0], Unary::Square)?;
                t.sum(s)
            },
            &[Tensor::row(vec![1.0, 2.0]).unwrap(), Tensor::row(vec![3.0]).unwrap()],
        );
        assert_eq!(g[1].data(), &[0.0]);
        assert_eq!(g[1].shape(), &[1, 1]);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let err = forward_backward(
            |t, p, _| Ok(vec![t.matmul(p[0], p[1])?]),
            &[Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])],
            &[],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_and_range() {
        assert!((softmax_cross_entropy(&[0.0; 4], 0).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((softmax_cross_entropy(&[0.0; 2], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&[0.0; 2], 2).is_err());
        // no overflow with large logits
        let big = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((big - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(-10.0..10.0);
            let t = rng.random_range(0..7);
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let a = softmax_cross_entropy(&logits, t).unwrap();
            let b = softmax_cross_entropy(&shifted, t).unwrap();
            assert!(a >= 0.0);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_basic_properties() {
        let out = layer_norm(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3], 1e-5);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
        let out = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-5);
        assert!((out.iter().sum::<f64>() / 3.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..9).map(|_| rng.random_range(0.5..1.5)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let want: Vec<f64> = (0..9).map(|i| g[i] * (x[i] - mu) / (var + 1e-5).sqrt() + b[i]).collect();
        let got = layer_norm(&x, &g, &b, 1e-5);
        for (a, w) in got.iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
        // tape version agrees with the plain one
        let xt = Tensor::row(x.clone()).unwrap();
        let gt = Tensor::row(g.clone()).unwrap();
        let bt = Tensor::row(b.clone()).unwrap();
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.param(&xt), tape.param(&gt), tape.param(&bt));
        let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
        for (a, w) in tape.value(y).data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::matrix(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let run = || {
            forward_backward(
                |t, p, i| {
                    let h = t.matmul(i[0], p[0])?;
                    let h = t.map(h, Unary::Gelu)?;
                    let s = t.causal_softmax(h)?;
                    Ok(vec![t.sum(s)?, h])
                },
                std::slice::from_ref(&w),
                std::slice::from_ref(&x),
            )
            .unwrap()
        };
        let (o1, g1) = run();
        let (o2, g2) = run();
        assert_eq!(o1, o2);
        assert_eq!(g1, g2);
    }
}
