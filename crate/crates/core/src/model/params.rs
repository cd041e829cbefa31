//! Weight container and safetensors loading.
//!
//! Accepted tensor names (an optional `transformer.` prefix is stripped):
//!
//! | name                         | shape            |
//! |------------------------------|------------------|
//! | `wte.weight`                 | `[V, d]`         |
//! | `wpe.weight`                 | `[ctx, d]`       |
//! | `h.{i}.ln_1.weight` / `.bias`| `[d]`            |
//! | `h.{i}.attn.c_attn.weight`   | `[d, 3d]`        |
//! | `h.{i}.attn.c_attn.bias`     | `[3d]`           |
//! | `h.{i}.attn.c_proj.weight`   | `[d, d]`         |
//! | `h.{i}.attn.c_proj.bias`     | `[d]`            |
//! | `h.{i}.ln_2.weight` / `.bias`| `[d]`            |
//! | `h.{i}.mlp.c_fc.weight`      | `[d, 4d]`        |
//! | `h.{i}.mlp.c_fc.bias`        | `[4d]`           |
//! | `h.{i}.mlp.c_proj.weight`    | `[4d, d]`        |
//! | `h.{i}.mlp.c_proj.bias`      | `[d]`            |
//! | `ln_f.weight` / `.bias`      | `[d]`            |
//! | `lm_head.weight` (optional)  | `[V, d]`, must equal `wte.weight` |
//!
//! Linear weights use the Conv1D `[in, out]` layout of the public exports,
//! so a row vector times the weight gives the layer output. The causal-mask
//! buffers `h.{i}.attn.bias` / `h.{i}.attn.masked_bias` are ignored. Tensors
//! must be F32, F16 or BF16.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use super::config::ModelConfig;
use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub ln1_w: Array1<T>,
    pub ln1_b: Array1<T>,
    /// `[d, 3d]`, columns ordered q | k | v, heads contiguous within each.
    pub w_qkv: Array2<T>,
    pub b_qkv: Array1<T>,
    /// `[d, d]`; rows `h*d_head..(h+1)*d_head` belong to head `h`.
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
    pub ln2_w: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w_fc: Array2<T>,
    pub b_fc: Array1<T>,
    pub w_proj: Array2<T>,
    pub b_proj: Array1<T>,
}

/// All learned tensors of a GPT-2 family model. Immutable once built.
///
/// The unembedding is tied: [`ModelParams::unembedding`] is a transposed
/// view of the token embedding, so the two can never diverge.
#[derive(Debug, Clone)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub wte: Array2<T>,
    pub wpe: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_w: Array1<T>,
    pub lnf_b: Array1<T>,
}

struct Container<'a> {
    st: SafeTensors<'a>,
    prefix: &'static str,
}

impl Container<'_> {
    fn raw(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let full = format!("{}{}", self.prefix, name);
        let view = self
            .st
            .tensor(&full)
            .map_err(|_| Error::MissingTensor(name.to_owned()))?;
        let data = view.data();
        let values = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => data
                .chunks_exact(2)
                .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            Dtype::BF16 => data
                .chunks_exact(2)
                .map(|c| f32::from_bits(u32::from(u16::from_le_bytes([c[0], c[1]])) << 16))
                .collect(),
            other => {
                return Err(Error::Container(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        Ok((view.shape().to_vec(), values))
    }

    fn has(&self, name: &str) -> bool {
        self.st.tensor(&format!("{}{}", self.prefix, name)).is_ok()
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let (shape, values) = self.raw(name)?;
        if shape != [rows, cols] {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: vec![rows, cols],
                actual: shape,
            });
        }
        Ok(Array2::from_shape_vec((rows, cols), values).expect("shape checked"))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Array1<f32>> {
        let (shape, values) = self.raw(name)?;
        if shape != [len] {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: vec![len],
                actual: shape,
            });
        }
        Ok(Array1::from(values))
    }
}

fn f16_to_f32(h: u16) -> f32 {
    let sign = u32::from(h >> 15) << 31;
    let exp = u32::from((h >> 10) & 0x1f);
    let mant = u32::from(h & 0x3ff);
    let bits = match (exp, mant) {
        (0, 0) => sign,
        (0, m) => {
            // subnormal: renormalise
            let shift = m.leading_zeros() - 21;
            let m = (m << shift) & 0x3ff;
            sign | ((127 - 15 + 1 - shift) << 23) | (m << 13)
        }
        (0x1f, m) => sign | 0x7f80_0000 | (m << 13),
        (e, m) => sign | ((e + 127 - 15) << 23) | (m << 13),
    };
    f32::from_bits(bits)
}

impl ModelParams<f32> {
    /// Loads GPT-2 Small from a safetensors file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_config(path, ModelConfig::gpt2_small())
    }

    pub fn load_with_config(path: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_safetensors_bytes(&bytes, config)
    }

    pub fn from_safetensors_bytes(bytes: &[u8], config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let prefix = if st.tensor("wte.weight").is_err() && st.tensor("transformer.wte.weight").is_ok() {
            "transformer."
        } else {
            ""
        };
        let c = Container { st, prefix };
        let d = config.d_model;
        let v = config.vocab_size;

        let wte = c.matrix("wte.weight", v, d)?;
        let wpe = c.matrix("wpe.weight", config.context_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("h.{i}.{s}");
            layers.push(LayerParams {
                ln1_w: c.vector(&p("ln_1.weight"), d)?,
                ln1_b: c.vector(&p("ln_1.bias"), d)?,
                w_qkv: c.matrix(&p("attn.c_attn.weight"), d, 3 * d)?,
                b_qkv: c.vector(&p("attn.c_attn.bias"), 3 * d)?,
                w_out: c.matrix(&p("attn.c_proj.weight"), d, d)?,
                b_out: c.vector(&p("attn.c_proj.bias"), d)?,
                ln2_w: c.vector(&p("ln_2.weight"), d)?,
                ln2_b: c.vector(&p("ln_2.bias"), d)?,
                w_fc: c.matrix(&p("mlp.c_fc.weight"), d, config.d_mlp())?,
                b_fc: c.vector(&p("mlp.c_fc.bias"), config.d_mlp())?,
                w_proj: c.matrix(&p("mlp.c_proj.weight"), config.d_mlp(), d)?,
                b_proj: c.vector(&p("mlp.c_proj.bias"), d)?,
            });
        }
        if c.has(&format!("h.{}.ln_1.weight", config.n_layers)) {
            return Err(Error::Container(format!(
                "container holds more than the configured {} layers",
                config.n_layers
            )));
        }
        let lnf_w = c.vector("ln_f.weight", d)?;
        let lnf_b = c.vector("ln_f.bias", d)?;

        // An untied lm_head would break W_U = W_E^T.
        if c.has("lm_head.weight") {
            let head = c.matrix("lm_head.weight", v, d)?;
            let max_diff = head
                .iter()
                .zip(wte.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            if max_diff != 0.0 {
                return Err(Error::Container(format!(
                    "lm_head.weight is not tied to wte.weight (max abs diff {max_diff})"
                )));
            }
        }

        let params = Self {
            config,
            wte,
            wpe,
            layers,
            lnf_w,
            lnf_b,
        };
        params.check_finite()?;
        Ok(params)
    }
}

impl<T: Real> ModelParams<T> {
    /// `W_U`, `[d, V]`: the transposed token embedding.
    pub fn unembedding(&self) -> ArrayView2<'_, T> {
        self.wte.t()
    }

    pub fn n_params(&self) -> usize {
        let per_layer: usize = self.layers.first().map_or(0, |l| {
            l.ln1_w.len()
                + l.ln1_b.len()
                + l.w_qkv.len()
                + l.b_qkv.len()
                + l.w_out.len()
                + l.b_out.len()
                + l.ln2_w.len()
                + l.ln2_b.len()
                + l.w_fc.len()
                + l.b_fc.len()
                + l.w_proj.len()
                + l.b_proj.len()
        });
        self.wte.len() + self.wpe.len() + per_layer * self.layers.len() + self.lnf_w.len() + self.lnf_b.len()
    }

    fn check_finite(&self) -> Result<()> {
        let ok = |a: &[T]| a.iter().all(|x| x.is_finite());
        let mut all = ok(self.wte.as_slice().unwrap_or(&[]))
            && ok(self.wpe.as_slice().unwrap_or(&[]))
            && self.lnf_w.iter().all(|x| x.is_finite())
            && self.lnf_b.iter().all(|x| x.is_finite());
        for l in &self.layers {
            all &= [&l.w_qkv, &l.w_out, &l.w_fc, &l.w_proj]
                .iter()
                .all(|m| m.iter().all(|x| x.is_finite()));
            all &= [&l.ln1_w, &l.ln1_b, &l.b_qkv, &l.b_out, &l.ln2_w, &l.ln2_b, &l.b_fc, &l.b_proj]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
        }
        if all {
            Ok(())
        } else {
            Err(Error::NonFinite("model weights"))
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let m = |a: &Array2<T>| a.mapv(|x| U::of(x.f64()));
        let v = |a: &Array1<T>| a.mapv(|x| U::of(x.f64()));
        ModelParams {
            config: self.config,
            wte: m(&self.wte),
            wpe: m(&self.wpe),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_w: v(&l.ln1_w),
                    ln1_b: v(&l.ln1_b),
                    w_qkv: m(&l.w_qkv),
                    b_qkv: v(&l.b_qkv),
                    w_out: m(&l.w_out),
                    b_out: v(&l.b_out),
                    ln2_w: v(&l.ln2_w),
                    ln2_b: v(&l.ln2_b),
                    w_fc: m(&l.w_fc),
                    b_fc: v(&l.b_fc),
                    w_proj: m(&l.w_proj),
                    b_proj: v(&l.b_proj),
                })
                .collect(),
            lnf_w: v(&self.lnf_w),
            lnf_b: v(&self.lnf_b),
        }
    }

    /// A randomly initialised instance of the architecture, for tests and
    /// benchmarks. Weights are uniform in `±scale`, LayerNorm gains near 1.
    pub fn random(config: ModelConfig, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut mat = |r: usize, c: usize, s: f64| {
            Array2::from_shape_fn((r, c), |_| T::of(rng.random_range(-s..s)))
        };
        let wte = mat(config.vocab_size, d, scale);
        let wpe = mat(config.context_len, d, scale);
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_w: mat(1, d, 0.2).row(0).mapv(|x| x + T::one()),
                ln1_b: mat(1, d, 0.1).row(0).to_owned(),
                w_qkv: mat(d, 3 * d, scale),
                b_qkv: mat(1, 3 * d, 0.1).row(0).to_owned(),
                w_out: mat(d, d, scale),
                b_out: mat(1, d, 0.1).row(0).to_owned(),
                ln2_w: mat(1, d, 0.2).row(0).mapv(|x| x + T::one()),
                ln2_b: mat(1, d, 0.1).row(0).to_owned(),
                w_fc: mat(d, config.d_mlp(), scale),
                b_fc: mat(1, config.d_mlp(), 0.1).row(0).to_owned(),
                w_proj: mat(config.d_mlp(), d, scale),
                b_proj: mat(1, d, 0.1).row(0).to_owned(),
            });
        }
        let lnf_w = mat(1, d, 0.2).row(0).mapv(|x| x + T::one());
        let lnf_b = mat(1, d, 0.1).row(0).to_owned();
        Self {
            config,
            wte,
            wpe,
            layers,
            lnf_w,
            lnf_b,
        }
    }

    /// Named f32 tensors in the accepted naming scheme.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let m = |a: &Array2<T>| a.iter().map(|x| x.f64() as f32).collect::<Vec<_>>();
        let v = |a: &Array1<T>| a.iter().map(|x| x.f64() as f32).collect::<Vec<_>>();
        let mut out = vec![
            ("wte.weight".to_owned(), self.wte.shape().to_vec(), m(&self.wte)),
            ("wpe.weight".to_owned(), self.wpe.shape().to_vec(), m(&self.wpe)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let mats = [
                ("attn.c_attn.weight", &l.w_qkv),
                ("attn.c_proj.weight", &l.w_out),
                ("mlp.c_fc.weight", &l.w_fc),
                ("mlp.c_proj.weight", &l.w_proj),
            ];
            for (n, a) in mats {
                out.push((format!("h.{i}.{n}"), a.shape().to_vec(), m(a)));
            }
            let vecs = [
                ("ln_1.weight", &l.ln1_w),
                ("ln_1.bias", &l.ln1_b),
                ("attn.c_attn.bias", &l.b_qkv),
                ("attn.c_proj.bias", &l.b_out),
                ("ln_2.weight", &l.ln2_w),
                ("ln_2.bias", &l.ln2_b),
                ("mlp.c_fc.bias", &l.b_fc),
                ("mlp.c_proj.bias", &l.b_proj),
            ];
            for (n, a) in vecs {
                out.push((format!("h.{i}.{n}"), a.shape().to_vec(), v(a)));
            }
        }
        out.push(("ln_f.weight".to_owned(), self.lnf_w.shape().to_vec(), v(&self.lnf_w)));
        out.push(("ln_f.bias".to_owned(), self.lnf_b.shape().to_vec(), v(&self.lnf_b)));
        out
    }
}

/// Serializes named f32 tensors into a safetensors byte buffer.
pub fn to_safetensors_bytes(tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Vec<u8>> {
    let bytes: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, _, data)| data.iter().flat_map(|x| x.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, shape, _), b)| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), b)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Container(e.to_string()))
        })
        .collect::<Result<HashMap<_, _>>>()?;
    safetensors::serialize(views, None).map_err(|e| Error::Container(e.to_string()))
}
