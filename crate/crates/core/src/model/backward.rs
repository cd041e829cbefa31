//! Reverse pass from a loss on the final-position logits back to the input
//! token embeddings, specialised to the GPT-2 block structure.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::forward::{LayerTrace, Trace};
use super::ops::{gelu_grad, layer_norm_backward, normalize_rows};
use super::params::ModelParams;
use super::scalar::Real;
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// A scalar loss of the final-position logits, restricted to the vocabulary
/// columns it reads.
pub trait LogitLoss: Sync {
    fn tokens(&self) -> &[TokenId];
    /// Loss value and `∂loss/∂logit` for each entry of [`tokens`](Self::tokens).
    fn value_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone)]
pub struct EmbeddingGrad<T> {
    pub loss: f64,
    /// Final-position logits of [`LogitLoss::tokens`], in order.
    pub logits: Vec<f64>,
    /// `∂loss/∂P`, `[N, d]`.
    pub grad: Array2<T>,
}

impl<T: Real> ModelParams<T> {
    /// Exact gradient of `loss` with respect to the token-embedding matrix `P`
    /// (positional embeddings are added internally and held fixed).
    pub fn grad_wrt_embeddings(&self, embeddings: ArrayView2<T>, loss: &dyn LogitLoss) -> Result<EmbeddingGrad<T>> {
        let tokens = loss.tokens();
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidToken {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let trace = self.trace(embeddings, None)?;
        let n = embeddings.nrows();
        let d = self.config.d_model;

        let last = trace.resid_final.slice(s![n - 1..n, ..]);
        let lnf = normalize_rows(last, self.config.layer_norm_eps);
        let y: Vec<f64> = lnf
            .xhat
            .row(0)
            .iter()
            .zip(self.lnf_w.iter().zip(self.lnf_b.iter()))
            .map(|(x, (w, b))| (*x * *w + *b).f64())
            .collect();
        let logits: Vec<f64> = tokens
            .iter()
            .map(|&t| self.wte.row(t as usize).iter().zip(&y).map(|(e, y)| e.f64() * y).sum())
            .collect();
        let (value, dlogits) = loss.value_and_grad(&logits);
        if !value.is_finite() || dlogits.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("loss"));
        }

        let mut dy = vec![0.0f64; d];
        for (&t, &g) in tokens.iter().zip(&dlogits) {
            if g != 0.0 {
                for (acc, e) in dy.iter_mut().zip(self.wte.row(t as usize)) {
                    *acc += g * e.f64();
                }
            }
        }
        let dy = Array2::from_shape_fn((1, d), |(_, k)| T::of(dy[k]));
        let dlast = layer_norm_backward(dy.view(), &self.lnf_w, &lnf);

        let mut dx = Array2::zeros((n, d));
        dx.row_mut(n - 1).assign(&dlast.row(0));
        let Trace { layers, .. } = trace;
        for (l, lt) in layers.iter().enumerate().rev() {
            dx = self.block_backward(l, lt, dx);
        }
        if !dx.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("embedding gradient"));
        }
        Ok(EmbeddingGrad {
            loss: value,
            logits,
            grad: dx,
        })
    }

    fn block_backward(&self, l: usize, lt: &LayerTrace<T>, d_out: Array2<T>) -> Array2<T> {
        let lp = &self.layers[l];
        let cfg = &self.config;
        let (n, d, dh) = (d_out.nrows(), cfg.d_model, cfg.d_head());

        // x_out = x_mid + W_proj·gelu(W_fc·ln2(x_mid))
        let d_post = d_out.dot(&lp.w_proj.t());
        let mut d_pre = d_post;
        d_pre.zip_mut_with(&lt.mlp.pre, |g, &p| *g *= gelu_grad(p));
        let d_ln2 = d_pre.dot(&lp.w_fc.t());
        let d_mid = &d_out + &layer_norm_backward(d_ln2.view(), &lp.ln2_w, &lt.mlp.ln2);

        // x_mid = x_in + Σ_h softmax(q_h k_hᵀ/√dh) v_h W_O[h] + b_O
        let dz = d_mid.dot(&lp.w_out.t());
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qkv = &lt.attn.qkv;
        let mut dqkv = Array2::<T>::zeros((n, 3 * d));
        for h in 0..cfg.n_heads {
            let cols = |base: usize| base + h * dh..base + (h + 1) * dh;
            let q = qkv.slice(s![.., cols(0)]);
            let k = qkv.slice(s![.., cols(d)]);
            let v = qkv.slice(s![.., cols(2 * d)]);
            let a = lt.attn.pattern.index_axis(Axis(0), h);
            let dz_h = dz.slice(s![.., cols(0)]);

            let da = dz_h.dot(&v.t());
            let dv = a.t().dot(&dz_h);
            let mut ds = Array2::<T>::zeros((n, n));
            for i in 0..n {
                let row_dot: f64 = (0..=i).map(|j| a[[i, j]].f64() * da[[i, j]].f64()).sum();
                for j in 0..=i {
                    ds[[i, j]] = T::of(a[[i, j]].f64() * (da[[i, j]].f64() - row_dot));
                }
            }
            let dq = ds.dot(&k) * scale;
            let dk = ds.t().dot(&q) * scale;
            dqkv.slice_mut(s![.., cols(0)]).assign(&dq);
            dqkv.slice_mut(s![.., cols(d)]).assign(&dk);
            dqkv.slice_mut(s![.., cols(2 * d)]).assign(&dv);
        }
        let d_ln1 = dqkv.dot(&lp.w_qkv.t());
        &d_mid + &layer_norm_backward(d_ln1.view(), &lp.ln1_w, &lt.attn.ln1)
    }
}

/// Loss reading fixed logit coefficients: `Σ c_i · logit[t_i]`.
#[derive(Debug, Clone)]
pub struct LinearLogitLoss {
    pub tokens: Vec<TokenId>,
    pub coefficients: Array1<f64>,
}

impl LogitLoss for LinearLogitLoss {
    fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    fn value_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let value = logits.iter().zip(self.coefficients.iter()).map(|(l, c)| l * c).sum();
        (value, self.coefficients.to_vec())
    }
}
