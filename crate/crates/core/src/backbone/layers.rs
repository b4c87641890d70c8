//! Dense kernels shared by the transformer forward and backward passes.
//! Activations are row-major `(rows, features)` buffers.

use crate::linalg::{gemm, matmul_wt, View};

pub const LN_EPS: f64 = 1e-6;

/// Saved statistics from a layer-norm forward pass.
#[derive(Clone, Debug, Default)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], rows: usize, d: usize, w: &[f64], b: &[f64]) -> (Vec<f64>, NormCache) {
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * w[j] + b[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx` and parameter gradients into
/// `dw`/`db`.
pub fn layer_norm_backward(
    dout: &[f64],
    cache: &NormCache,
    w: &[f64],
    rows: usize,
    d: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let mut g = vec![0.0; d];
    for r in 0..rows {
        let dy = &dout[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            dw[j] += dy[j] * xh[j];
            db[j] += dy[j];
            g[j] = dy[j] * w[j];
            mean_g += g[j];
            mean_gx += g[j] * xh[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] += rs * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `x @ w^T + b` for `x: (rows, k)`, `w: (n, k)`.
pub fn linear(x: &[f64], rows: usize, k: usize, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    matmul_wt(x, rows, k, w, n, &mut out, true);
    out
}

/// Backward of [`linear`]. Parameter gradients accumulate; returns `dx` when
/// requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dout: &[f64],
    x: &[f64],
    rows: usize,
    k: usize,
    w: &[f64],
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    // dW (n x k) += dout^T (n x rows) @ x (rows x k)
    gemm(
        1.0,
        dout,
        View::dense(rows, n).t(),
        x,
        View::dense(rows, k),
        1.0,
        dw,
        k,
    );
    for r in 0..rows {
        for (j, acc) in db.iter_mut().enumerate() {
            *acc += dout[r * n + j];
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * k];
        gemm(1.0, dout, View::dense(rows, n), w, View::dense(n, k), 0.0, &mut dx, k);
        dx
    })
}

/// Multi-head self-attention core on a packed `(batch*seq, 3*d)` q/k/v buffer.
/// Returns the attention probabilities `(batch, heads, seq, seq)` and the
/// concatenated head outputs `(batch*seq, d)`.
pub fn attention(qkv: &[f64], batch: usize, seq: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ld = 3 * d;
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut ctx = vec![0.0; batch * seq * d];
    for b in 0..batch {
        let base = b * seq * ld;
        for h in 0..heads {
            let q = &qkv[base + h * dh..];
            let k = &qkv[base + d + h * dh..];
            let v = &qkv[base + 2 * d + h * dh..];
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            gemm(
                scale,
                q,
                View::strided(seq, dh, ld),
                k,
                View::strided(seq, dh, ld).t(),
                0.0,
                p,
                seq,
            );
            for row in p.chunks_mut(seq) {
                softmax_in_place(row);
            }
            gemm(
                1.0,
                p,
                View::dense(seq, seq),
                v,
                View::strided(seq, dh, ld),
                0.0,
                &mut ctx[b * seq * d + h * dh..],
                d,
            );
        }
    }
    (probs, ctx)
}

pub fn attention_backward(
    dctx: &[f64],
    qkv: &[f64],
    probs: &[f64],
    batch: usize,
    seq: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ld = 3 * d;
    let mut dqkv = vec![0.0; batch * seq * ld];
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        let base = b * seq * ld;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let dout = &dctx[b * seq * d + h * dh..];
            let dout_v = View::strided(seq, dh, d);
            // dV = P^T dO
            gemm(
                1.0,
                p,
                View::dense(seq, seq).t(),
                dout,
                dout_v,
                0.0,
                &mut dqkv[base + 2 * d + h * dh..],
                ld,
            );
            // dP = dO V^T
            gemm(
                1.0,
                dout,
                dout_v,
                &qkv[base + 2 * d + h * dh..],
                View::strided(seq, dh, ld).t(),
                0.0,
                &mut dp,
                seq,
            );
            // dS = P * (dP - rowsum(dP * P))
            for r in 0..seq {
                let pr = &p[r * seq..(r + 1) * seq];
                let dr = &mut dp[r * seq..(r + 1) * seq];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            // dQ = scale * dS K ; dK = scale * dS^T Q
            gemm(
                scale,
                &dp,
                View::dense(seq, seq),
                &qkv[base + d + h * dh..],
                View::strided(seq, dh, ld),
                0.0,
                &mut dqkv[base + h * dh..],
                ld,
            );
            gemm(
                scale,
                &dp,
                View::dense(seq, seq).t(),
                &qkv[base + h * dh..],
                View::strided(seq, dh, ld),
                0.0,
                &mut dqkv[base + d + h * dh..],
                ld,
            );
        }
    }
    dqkv
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.5, 9.0];
        let (out, _) = layer_norm(&x, 2, 4, &[1.0; 4], &[0.0; 4]);
        for row in out.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
