//! Cached, patchable forward pass.
//!
//! Head outputs are kept separately (each head's `z_h · W_O[h]` slice, before
//! the output bias), so the residual stream decomposes exactly as
//! `embed + Σ head_out + Σ b_O + Σ mlp_out`.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{affine, causal_softmax, gelu, normalize_rows, Normalized};
use super::params::ModelParams;
use super::scalar::Real;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSeq};

/// Activations of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerActivations<T> {
    /// Residual stream entering the block, `[N, d]`.
    pub resid_pre: Array2<T>,
    /// Per-head outputs after the head's output-projection slice, `[H, N, d]`.
    pub head_out: Array3<T>,
    /// Attention probabilities, `[H, N, N]`.
    pub attn_pattern: Array3<T>,
    /// MLP output including its output bias, `[N, d]`.
    pub mlp_out: Array2<T>,
}

/// Per-component outputs of one forward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct ActivationCache<T = f32> {
    /// Token plus positional embedding, `[N, d]`.
    pub embed: Array2<T>,
    pub layers: Vec<LayerActivations<T>>,
    /// Residual stream before the final LayerNorm, `[N, d]`.
    pub resid_final: Array2<T>,
}

impl<T: Real> ActivationCache<T> {
    pub fn seq_len(&self) -> usize {
        self.embed.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchTarget {
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    /// Every head of a layer at once (the output bias is left untouched).
    AttnLayer { layer: usize },
}

impl PatchTarget {
    pub fn layer(&self) -> usize {
        match *self {
            PatchTarget::Head { layer, .. } | PatchTarget::Mlp { layer } | PatchTarget::AttnLayer { layer } => layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    All,
    Only(Vec<usize>),
}

impl Positions {
    fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        match self {
            Positions::All => Ok((0..n).collect()),
            Positions::Only(p) => {
                if let Some(&bad) = p.iter().find(|&&i| i >= n) {
                    return Err(Error::Patch(format!("position {bad} out of range for length {n}")));
                }
                Ok(p.clone())
            }
        }
    }
}

/// Replace `target`'s output by the donor's at `positions`.
#[derive(Debug, Clone)]
pub struct PatchSpec<'a, T = f32> {
    pub target: PatchTarget,
    pub positions: Positions,
    pub donor: &'a ActivationCache<T>,
}

/// Which unembedded rows/columns to produce.
#[derive(Debug, Clone, Copy)]
pub enum Readout<'a> {
    None,
    /// `[N, V]`
    All,
    /// `[1, V]`, final position only.
    Last,
    /// `[1, k]`, final position, the listed vocabulary columns.
    LastTokens(&'a [TokenId]),
}

pub(crate) struct AttnTrace<T> {
    pub ln1: Normalized<T>,
    pub qkv: Array2<T>,
    pub pattern: Array3<T>,
    pub head_out: Array3<T>,
}

pub(crate) struct MlpTrace<T> {
    pub ln2: Normalized<T>,
    pub pre: Array2<T>,
    pub mlp_out: Array2<T>,
}

pub(crate) struct LayerTrace<T> {
    pub resid_pre: Array2<T>,
    pub attn: AttnTrace<T>,
    pub mlp: MlpTrace<T>,
}

pub(crate) struct Trace<T> {
    pub embed: Array2<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub resid_final: Array2<T>,
}

impl<T> From<Trace<T>> for ActivationCache<T> {
    fn from(t: Trace<T>) -> Self {
        ActivationCache {
            embed: t.embed,
            layers: t
                .layers
                .into_iter()
                .map(|l| LayerActivations {
                    resid_pre: l.resid_pre,
                    head_out: l.attn.head_out,
                    attn_pattern: l.attn.pattern,
                    mlp_out: l.mlp.mlp_out,
                })
                .collect(),
            resid_final: t.resid_final,
        }
    }
}

impl<T: Real> ModelParams<T> {
    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > self.config.context_len {
            return Err(Error::ContextLength {
                len: ids.len(),
                context_len: self.config.context_len,
            });
        }
        self.check_vocab(ids)
    }

    fn check_vocab(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::InvalidToken {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token-embedding rows (`W_E[ids]`), without positional embedding.
    pub fn embed_tokens(&self, ids: &[TokenId]) -> Result<Array2<T>> {
        self.check_ids(ids)?;
        Ok(self.wte.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>()))
    }

    pub(crate) fn check_embeddings(&self, emb: ArrayView2<T>) -> Result<()> {
        let n = emb.nrows();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if n > self.config.context_len {
            return Err(Error::ContextLength {
                len: n,
                context_len: self.config.context_len,
            });
        }
        if emb.ncols() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                name: "input embeddings".into(),
                expected: vec![n, self.config.d_model],
                actual: emb.shape().to_vec(),
            });
        }
        if !emb.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("input embeddings"));
        }
        Ok(())
    }

    pub(crate) fn attention(&self, layer: usize, x: &Array2<T>) -> AttnTrace<T> {
        let lp = &self.layers[layer];
        let cfg = &self.config;
        let (n, d, h, dh) = (x.nrows(), cfg.d_model, cfg.n_heads, cfg.d_head());
        let ln1 = normalize_rows(x.view(), cfg.layer_norm_eps);
        let qkv = affine(&ln1.xhat, &lp.ln1_w, &lp.ln1_b).dot(&lp.w_qkv) + &lp.b_qkv;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut pattern = Array3::zeros((h, n, n));
        let mut head_out = Array3::zeros((h, n, d));
        for head in 0..h {
            let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
            let k = qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
            let p = causal_softmax(&q.dot(&k.t()), scale);
            let zh = p.dot(&v);
            head_out
                .index_axis_mut(Axis(0), head)
                .assign(&zh.dot(&lp.w_out.slice(s![head * dh..(head + 1) * dh, ..])));
            pattern.index_axis_mut(Axis(0), head).assign(&p);
        }
        AttnTrace {
            ln1,
            qkv,
            pattern,
            head_out,
        }
    }

    pub(crate) fn combine_heads(&self, layer: usize, resid_pre: &Array2<T>, head_out: &Array3<T>) -> Array2<T> {
        let mut attn = head_out.index_axis(Axis(0), 0).to_owned();
        for head in 1..head_out.shape()[0] {
            attn += &head_out.index_axis(Axis(0), head);
        }
        attn += &self.layers[layer].b_out;
        resid_pre + &attn
    }

    pub(crate) fn mlp(&self, layer: usize, resid_mid: &Array2<T>) -> MlpTrace<T> {
        let lp = &self.layers[layer];
        let ln2 = normalize_rows(resid_mid.view(), self.config.layer_norm_eps);
        let pre = affine(&ln2.xhat, &lp.ln2_w, &lp.ln2_b).dot(&lp.w_fc) + &lp.b_fc;
        let mlp_out = pre.mapv(gelu).dot(&lp.w_proj) + &lp.b_proj;
        MlpTrace { ln2, pre, mlp_out
        }
    }

    fn check_patch(&self, n: usize, patch: &PatchSpec<'_, T>) -> Result<Vec<usize>> {
        let cfg = &self.config;
        let ok = match patch.target {
            PatchTarget::Head { layer, head } => layer < cfg.n_layers && head < cfg.n_heads,
            PatchTarget::Mlp { layer } | PatchTarget::AttnLayer { layer } => layer < cfg.n_layers,
        };
        if !ok {
            return Err(Error::Patch(format!("{:?} does not exist in this architecture", patch.target)));
        }
        if patch.donor.seq_len() != n || patch.donor.layers.len() != cfg.n_layers {
            return Err(Error::Patch(format!(
                "donor cache covers {} positions, run has {n}",
                patch.donor.seq_len()
            )));
        }
        patch.positions.resolve(n)
    }

    fn apply_attn_patch(head_out: &mut Array3<T>, patch: &PatchSpec<'_, T>, positions: &[usize]) {
        let donor = &patch.donor.layers[patch.target.layer()].head_out;
        let heads: Vec<usize> = match patch.target {
            PatchTarget::Head { head, .. } => vec![head],
            PatchTarget::AttnLayer { .. } => (0..head_out.shape()[0]).collect(),
            PatchTarget::Mlp { .. } => return,
        };
        for h in heads {
            for &p in positions {
                head_out
                    .slice_mut(s![h, p, ..])
                    .assign(&donor.slice(s![h, p, ..]));
            }
        }
    }

    fn apply_mlp_patch(mlp_out: &mut Array2<T>, patch: &PatchSpec<'_, T>, positions: &[usize]) {
        if let PatchTarget::Mlp { layer } = patch.target {
            let donor = &patch.donor.layers[layer].mlp_out;
            for &p in positions {
                mlp_out.row_mut(p).assign(&donor.row(p));
            }
        }
    }

    /// Runs blocks `start..` from the residual stream `x`, patching if asked.
    fn run_blocks(
        &self,
        start: usize,
        mut x: Array2<T>,
        patch: Option<(&PatchSpec<'_, T>, &[usize])>,
    ) -> (Vec<LayerTrace<T>>, Array2<T>) {
        let mut layers = Vec::with_capacity(self.config.n_layers - start);
        for l in start..self.config.n_layers {
            let mut attn = self.attention(l, &x);
            if let Some((p, pos)) = patch.filter(|(p, _)| p.target.layer() == l) {
                Self::apply_attn_patch(&mut attn.head_out, p, pos);
            }
            let resid_mid = self.combine_heads(l, &x, &attn.head_out);
            let mut mlp = self.mlp(l, &resid_mid);
            if let Some((p, pos)) = patch.filter(|(p, _)| p.target.layer() == l) {
                Self::apply_mlp_patch(&mut mlp.mlp_out, p, pos);
            }
            let next = &resid_mid + &mlp.mlp_out;
            layers.push(LayerTrace {
                resid_pre: x,
                attn,
                mlp,
            });
            x = next;
        }
        (layers, x)
    }

    pub(crate) fn trace(&self, token_embeddings: ArrayView2<T>, patch: Option<&PatchSpec<'_, T>>) -> Result<Trace<T>> {
        self.check_embeddings(token_embeddings)?;
        let n = token_embeddings.nrows();
        let positions = patch.map(|p| self.check_patch(n, p)).transpose()?;
        let embed = &token_embeddings + &self.wpe.slice(s![..n, ..]);
        let (layers, resid_final) = self.run_blocks(0, embed.clone(), patch.zip(positions.as_deref()));
        Ok(Trace {
            embed,
            layers,
            resid_final,
        })
    }

    /// Final LayerNorm then unembedding of the requested rows/columns.
    pub fn readout(&self, resid_final: &Array2<T>, readout: Readout<'_>) -> Array2<T> {
        let n = resid_final.nrows();
        let rows = match readout {
            Readout::None => return Array2::zeros((0, 0)),
            Readout::All => resid_final.view(),
            Readout::Last | Readout::LastTokens(_) => resid_final.slice(s![n - 1..n, ..]),
        };
        let ln = normalize_rows(rows, self.config.layer_norm_eps);
        let y = affine(&ln.xhat, &self.lnf_w, &self.lnf_b);
        match readout {
            Readout::LastTokens(tokens) => {
                let cols = self.wte.select(Axis(0), &tokens.iter().map(|&t| t as usize).collect::<Vec<_>>());
                y.dot(&cols.t())
            }
            _ => y.dot(&self.unembedding()),
        }
    }

    /// Forward pass from token-embedding rows (positional embeddings are
    /// added internally).
    pub fn forward_embeddings(
        &self,
        token_embeddings: ArrayView2<T>,
        readout: Readout<'_>,
    ) -> Result<(Array2<T>, ActivationCache<T>)> {
        if let Readout::LastTokens(t) = readout {
            self.check_vocab(t)?;
        }
        let trace = self.trace(token_embeddings, None)?;
        let logits = self.readout(&trace.resid_final, readout);
        Ok((logits, trace.into()))
    }

    /// Full logits `[N, V]` and the activation cache.
    pub fn forward(&self, ids: &[TokenId]) -> Result<(Array2<T>, ActivationCache<T>)> {
        let emb = self.embed_tokens(ids)?;
        self.forward_embeddings(emb.view(), Readout::All)
    }

    pub fn forward_readout(&self, ids: &[TokenId], readout: Readout<'_>) -> Result<(Array2<T>, ActivationCache<T>)> {
        let emb = self.embed_tokens(ids)?;
        self.forward_embeddings(emb.view(), readout)
    }

    /// Independent sequences in parallel.
    pub fn forward_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<(Array2<T>, ActivationCache<T>)>> {
        seqs.par_iter().map(|s| self.forward(&s.ids)).collect()
    }

    /// Full forward pass with one component's output substituted.
    pub fn forward_with_patch(&self, ids: &[TokenId], patch: &PatchSpec<'_, T>) -> Result<Array2<T>> {
        self.forward_with_patch_readout(ids, patch, Readout::All)
    }

    pub fn forward_with_patch_readout(
        &self,
        ids: &[TokenId],
        patch: &PatchSpec<'_, T>,
        readout: Readout<'_>,
    ) -> Result<Array2<T>> {
        let emb = self.embed_tokens(ids)?;
        let trace = self.trace(emb.view(), Some(patch))?;
        Ok(self.readout(&trace.resid_final, readout))
    }

    /// Patched run that reuses `clean` up to the patched layer. Equivalent
    /// to [`forward_with_patch_readout`](Self::forward_with_patch_readout)
    /// on the sequence that produced `clean`.
    pub fn patched_readout_from(
        &self,
        clean: &ActivationCache<T>,
        patch: &PatchSpec<'_, T>,
        readout: Readout<'_>,
    ) -> Result<Array2<T>> {
        if clean.layers.len() != self.config.n_layers {
            return Err(Error::IncompleteCache(format!(
                "cache has {} layers, model has {}",
                clean.layers.len(),
                self.config.n_layers
            )));
        }
        let n = clean.seq_len();
        let positions = self.check_patch(n, patch)?;
        let l = patch.target.layer();
        let cached = &clean.layers[l];
        let mut head_out = cached.head_out.clone();
        Self::apply_attn_patch(&mut head_out, patch, &positions);
        let resid_mid = self.combine_heads(l, &cached.resid_pre, &head_out);
        let mut mlp_out = if matches!(patch.target, PatchTarget::Mlp { .. }) {
            cached.mlp_out.clone()
        } else {
            self.mlp(l, &resid_mid).mlp_out
        };
        Self::apply_mlp_patch(&mut mlp_out, patch, &positions);
        let x = &resid_mid + &mlp_out;
        let (_, resid_final) = self.run_blocks(l + 1, x, None);
        Ok(self.readout(&resid_final, readout))
    }
}
