use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// First-order optimizer with decoupled weight decay and optional global
/// gradient-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    pub state: OptimizerState,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64, max_grad_norm: Option<f64>) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm,
            state: OptimizerState::default(),
        }
    }

    /// Applies one update. Returns the gradient norm measured before clipping.
    pub fn step(&mut self, params: &mut [Tensor], grads: &mut [Vec<f64>]) -> f64 {
        let norm = match self.max_grad_norm {
            Some(max) => clip_grad_norm(grads, max),
            None => global_norm(grads),
        };
        if self.state.m.len() != params.len() {
            self.state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.state.step += 1;
        let t = self.state.step as f64;
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (pi, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in data.iter_mut().zip(g) {
                        *w = *w * decay - lr * gv;
                    }
                }
                OptimizerKind::Adamw => {
                    let m = &mut self.state.m[pi];
                    let v = &mut self.state.v[pi];
                    for i in 0..data.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        data[i] = data[i] * decay - lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        norm
    }
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
