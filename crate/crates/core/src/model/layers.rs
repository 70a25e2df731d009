//! Backbone pieces shared by every model kind: sinusoidal positions and
//! pre-norm causal self-attention, each with its backward pass.

use crate::tensor::{self, Tensor};

pub const NORM_EPS: f64 = 1e-6;

pub type Rows = Vec<Vec<f64>>;

/// Deterministic sinusoidal position code for position `t` in width `d`.
pub fn positional(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let pair = (i / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(pair / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Token embedding plus position code for every position.
pub fn embed(embeddings: &Tensor, ids: &[u32]) -> Rows {
    let d = embeddings.cols();
    ids.iter()
        .enumerate()
        .map(|(t, &id)| {
            let mut x = embeddings.row(id as usize).to_vec();
            tensor::axpy(&mut x, 1.0, &positional(t, d));
            x
        })
        .collect()
}

/// Final norm followed by the tied output head.
pub fn head(embeddings: &Tensor, final_norm: &Tensor, rows: &[Vec<f64>]) -> Rows {
    rows.iter()
        .map(|x| {
            let n = tensor::rms_norm(x, final_norm.data(), NORM_EPS);
            (0..embeddings.rows())
                .map(|v| tensor::dot(embeddings.row(v), &n))
                .collect()
        })
        .collect()
}

/// Gradient of the head with respect to its input rows.
pub fn head_backward(
    embeddings: &Tensor,
    final_norm: &Tensor,
    rows: &[Vec<f64>],
    dlogits: &[Vec<f64>],
) -> Rows {
    rows.iter()
        .zip(dlogits)
        .map(|(x, dl)| {
            let dn = tensor::vec_mat(dl, embeddings);
            tensor::rms_norm_backward(x, final_norm.data(), NORM_EPS, &dn)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub norm: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    x: Rows,
    q: Rows,
    k: Rows,
    v: Rows,
    /// `probs[h][t]` holds the causal attention row over positions `0..=t`.
    probs: Vec<Vec<Vec<f64>>>,
}

impl Attention {
    /// Returns `x + attn(norm(x))` for every position.
    pub(crate) fn forward(&self, x: &[Vec<f64>], n_heads: usize) -> (Rows, AttnCache) {
        let d = self.q.rows();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let normed: Rows = x
            .iter()
            .map(|r| tensor::rms_norm(r, self.norm.data(), NORM_EPS))
            .collect();
        let q: Rows = normed.iter().map(|a| tensor::vec_mat(a, &self.q)).collect();
        let k: Rows = normed.iter().map(|a| tensor::vec_mat(a, &self.k)).collect();
        let v: Rows = normed.iter().map(|a| tensor::vec_mat(a, &self.v)).collect();
        let t_len = x.len();

        let mut ctx = vec![vec![0.0; d]; t_len];
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let span = h * dh..(h + 1) * dh;
            let mut head_probs = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| tensor::dot(&q[t][span.clone()], &k[j][span.clone()]) * scale)
                    .collect();
                let p = tensor::softmax(&scores).expect("causal row is non-empty");
                for (j, &pj) in p.iter().enumerate() {
                    tensor::axpy(&mut ctx[t][span.clone()], pj, &v[j][span.clone()]);
                }
                head_probs.push(p);
            }
            probs.push(head_probs);
        }

        let out = x
            .iter()
            .zip(&ctx)
            .map(|(xr, c)| {
                let mut y = xr.clone();
                tensor::axpy(&mut y, 1.0, &tensor::vec_mat(c, &self.o));
                y
            })
            .collect();
        let cache = AttnCache {
            x: x.to_vec(),
            q,
            k,
            v,
            probs,
        };
        (out, cache)
    }

    /// Pulls `dy` back through `forward`, residual path included.
    pub(crate) fn backward(&self, cache: &AttnCache, dy: &[Vec<f64>], n_heads: usize) -> Rows {
        let d = self.q.rows();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = dy.len();
        let dctx: Rows = dy.iter().map(|g| tensor::vec_mat_t(g, &self.o)).collect();
        let mut dq = vec![vec![0.0; d]; t_len];
        let mut dk = vec![vec![0.0; d]; t_len];
        let mut dv = vec![vec![0.0; d]; t_len];

        for h in 0..n_heads {
            let span = h * dh..(h + 1) * dh;
            for t in 0..t_len {
                let p = &cache.probs[h][t];
                let dc = &dctx[t][span.clone()];
                let dp: Vec<f64> = (0..=t)
                    .map(|j| tensor::dot(dc, &cache.v[j][span.clone()]))
                    .collect();
                let inner = tensor::dot(p, &dp);
                for j in 0..=t {
                    tensor::axpy(&mut dv[j][span.clone()], p[j], dc);
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds != 0.0 {
                        let kj = cache.k[j][span.clone()].to_vec();
                        tensor::axpy(&mut dq[t][span.clone()], ds, &kj);
                        let qt = cache.q[t][span.clone()].to_vec();
                        tensor::axpy(&mut dk[j][span.clone()], ds, &qt);
                    }
                }
            }
        }

        (0..t_len)
            .map(|t| {
                let mut da = tensor::vec_mat_t(&dq[t], &self.q);
                tensor::axpy(&mut da, 1.0, &tensor::vec_mat_t(&dk[t], &self.k));
                tensor::axpy(&mut da, 1.0, &tensor::vec_mat_t(&dv[t], &self.v));
                let mut dx =
                    tensor::rms_norm_backward(&cache.x[t], self.norm.data(), NORM_EPS, &da);
                tensor::axpy(&mut dx, 1.0, &dy[t]);
                dx
            })
            .collect()
    }
}
