use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// Output of residual quantization for one latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub codes: Vec<u32>,
    /// `r¹..r^L`; the input itself is `r⁰`.
    pub residuals: Vec<Vec<f64>>,
    /// Sum of the selected codewords.
    pub sum: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row of `codebook` to `r`, lowest index on ties.
pub(crate) fn nearest(codebook: &Tensor, r: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.rows() {
        let d = sq_dist(codebook.row_slice(k), r);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Greedy residual quantization: at each level pick the nearest codeword to
/// the running residual, then subtract it.
pub fn quantize_residual(codebooks: &[Tensor], z: &[f64]) -> Quantized {
    let mut r = z.to_vec();
    let mut sum = vec![0.0; z.len()];
    let mut codes = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let k = nearest(cb, &r);
        let e = cb.row_slice(k);
        for i in 0..r.len() {
            r[i] -= e[i];
            sum[i] += e[i];
        }
        codes.push(k as u32);
        residuals.push(r.clone());
    }
    Quantized { codes, residuals, sum }
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters keep their
/// previous centroid. Returns a `[k, d]` matrix.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Tensor {
    assert!(!points.is_empty() && k > 0);
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let mut x = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in dist.iter().enumerate() {
                if x < *w {
                    pick = i;
                    break;
                }
                x -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (dv, p) in dist.iter_mut().zip(points) {
            *dv = dv.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        let cb = to_tensor(&centers, d);
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let n = nearest(&cb, p);
            changed |= *a != n;
            *a = n;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(points) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    to_tensor(&centers, d)
}

fn to_tensor(rows: &[Vec<f64>], d: usize) -> Tensor {
    Tensor::from_parts(rows.len(), d, rows.concat())
}
