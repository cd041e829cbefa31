//! Logit difference over the capital-letter answer set, and direct logit
//! attribution through a frozen-statistics final LayerNorm.
//!
//! For a residual `x` at the read position with final-LayerNorm statistics
//! `μ, σ` (computed once from the full stream), each component output `c`
//! maps to `((c − mean(c)) / σ) ⊙ w_f`. The map is linear, so projecting
//! every component onto a direction and adding the LayerNorm shift (kept on
//! a separate `bias` row together with the attention output biases) sums
//! exactly to the projected logit.

use std::fmt::Write as _;

use ndarray::{Array1, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::num;
use crate::model::{ActivationCache, ModelParams, Real};
use crate::tokenizer::{TokenId, Tokenizer};

pub const LETTERS: [char; 26] = [
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T', 'U', 'V',
    'W', 'X', 'Y', 'Z',
];

/// The answer set: the 26 single-character capital-letter tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LetterSet {
    token_ids: [TokenId; 26],
}

impl LetterSet {
    pub fn new(tokenizer: &Tokenizer) -> Result<Self> {
        let mut token_ids = [0; 26];
        for (slot, letter) in token_ids.iter_mut().zip(LETTERS) {
            let ids = tokenizer.encode(&letter.to_string())?.ids;
            match ids[..] {
                [id] => *slot = id,
                _ => return Err(Error::Tokenizer(format!("{letter} is not a single token"))),
            }
        }
        Ok(Self { token_ids })
    }

    pub fn from_token_ids(token_ids: [TokenId; 26]) -> Self {
        Self { token_ids }
    }

    pub fn token_ids(&self) -> &[TokenId; 26] {
        &self.token_ids
    }

    pub fn index(letter: char) -> Option<usize> {
        letter.is_ascii_uppercase().then(|| (letter as u8 - b'A') as usize)
    }

    pub fn token(&self, letter: char) -> Option<TokenId> {
        Self::index(letter).map(|i| self.token_ids[i])
    }

    /// The 26 letter logits gathered from a full vocabulary row.
    pub fn gather<T: Real>(&self, final_logits: ArrayView1<T>) -> [f64; 26] {
        self.token_ids.map(|t| final_logits[t as usize].f64())
    }
}

fn letter_index(letter: char) -> usize {
    LetterSet::index(letter).unwrap_or_else(|| panic!("{letter:?} is not a capital letter"))
}

/// `logit[correct] − max over the other 25 letters`.
pub fn letter_logit_diff(letter_logits: &[f64; 26], correct: char) -> f64 {
    let c = letter_index(correct);
    let best_other = letter_logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != c)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    letter_logits[c] - best_other
}

/// Logit difference on a full final-position logit vector.
pub fn logit_diff<T: Real>(final_logits: ArrayView1<T>, correct: char, letters: &LetterSet) -> f64 {
    letter_logit_diff(&letters.gather(final_logits), correct)
}

/// Highest-logit capital letter; ties go to the earlier letter.
pub fn argmax_letter(letter_logits: &[f64; 26]) -> char {
    let mut best = 0;
    for (i, &v) in letter_logits.iter().enumerate() {
        if v > letter_logits[best] {
            best = i;
        }
    }
    LETTERS[best]
}

/// Best letter other than `exclude`.
pub fn best_other_letter(letter_logits: &[f64; 26], exclude: char) -> char {
    let x = letter_index(exclude);
    let mut best: Option<usize> = None;
    for (i, &v) in letter_logits.iter().enumerate() {
        if i != x && best.is_none_or(|b| v > letter_logits[b]) {
            best = Some(i);
        }
    }
    LETTERS[best.expect("25 candidates")]
}

/// Column of `W_U` for a letter.
pub fn letter_direction<T: Real>(params: &ModelParams<T>, letters: &LetterSet, letter: char) -> Array1<f64> {
    let t = letters.token(letter).unwrap_or_else(|| panic!("{letter:?} is not a capital letter"));
    params.wte.row(t as usize).mapv(|x| x.f64())
}

/// `W_U[correct] − W_U[foil]`.
pub fn diff_direction<T: Real>(params: &ModelParams<T>, letters: &LetterSet, correct: char, foil: char) -> Array1<f64> {
    letter_direction(params, letters, correct) - letter_direction(params, letters, foil)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    /// Attention output biases plus the final LayerNorm shift.
    Bias,
}

impl Component {
    fn csv_fields(&self) -> (String, String) {
        match *self {
            Component::Embed => ("-".into(), "embed".into()),
            Component::Head { layer, head } => (layer.to_string(), head.to_string()),
            Component::Mlp { layer } => (layer.to_string(), "mlp".into()),
            Component::Bias => ("-".into(), "bias".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub component: Component,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub direction: String,
    pub n_samples: usize,
    pub rows: Vec<AttributionRow>,
}

/// Final-LayerNorm statistics frozen at one residual vector.
#[derive(Debug, Clone, Copy)]
struct FrozenNorm {
    rstd: f64,
}

impl FrozenNorm {
    fn new<T: Real>(resid: ArrayView1<T>, eps: f64) -> Self {
        let d = resid.len() as f64;
        let mean = resid.iter().map(|x| x.f64()).sum::<f64>() / d;
        let var = resid.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / d;
        Self {
            rstd: 1.0 / (var + eps).sqrt(),
        }
    }

    /// `dir · (((c − mean c) rstd) ⊙ w)` with `u = dir ⊙ w` precomputed.
    fn project<T: Real>(&self, c: ArrayView1<T>, u: &[f64], u_sum: f64) -> f64 {
        let d = c.len() as f64;
        let mean = c.iter().map(|x| x.f64()).sum::<f64>() / d;
        let dot: f64 = c.iter().zip(u).map(|(x, u)| x.f64() * u).sum();
        self.rstd * (dot - mean * u_sum)
    }
}

fn check_cache<T: Real>(params: &ModelParams<T>, cache: &ActivationCache<T>, position: usize, direction_len: usize) -> Result<()> {
    let cfg = &params.config;
    if cache.layers.len() != cfg.n_layers {
        return Err(Error::IncompleteCache(format!(
            "{} of {} layers cached",
            cache.layers.len(),
            cfg.n_layers
        )));
    }
    if position >= cache.seq_len() {
        return Err(Error::IncompleteCache(format!(
            "position {position} not cached (length {})",
            cache.seq_len()
        )));
    }
    for (l, layer) in cache.layers.iter().enumerate() {
        if layer.head_out.shape() != [cfg.n_heads, cache.seq_len(), cfg.d_model] || layer.mlp_out.nrows() != cache.seq_len() {
            return Err(Error::IncompleteCache(format!("layer {l} components missing or mis-shaped")));
        }
    }
    if direction_len != cfg.d_model {
        return Err(Error::Config(format!("direction has {direction_len} entries, d_model is {}", cfg.d_model)));
    }
    Ok(())
}

/// Per-component attribution of one cached run at `position` onto `direction`.
pub fn attribute_values<T: Real>(
    params: &ModelParams<T>,
    cache: &ActivationCache<T>,
    direction: ArrayView1<f64>,
    position: usize,
) -> Result<Vec<(Component, f64)>> {
    check_cache(params, cache, position, direction.len())?;
    let norm = FrozenNorm::new(cache.resid_final.row(position), params.config.layer_norm_eps);
    let u: Vec<f64> = direction.iter().zip(params.lnf_w.iter()).map(|(d, w)| d * w.f64()).collect();
    let u_sum: f64 = u.iter().sum();

    let mut out = Vec::with_capacity(params.config.n_layers * (params.config.n_heads + 1) + 2);
    out.push((Component::Embed, norm.project(cache.embed.row(position), &u, u_sum)));
    let mut bias: f64 = direction.iter().zip(params.lnf_b.iter()).map(|(d, b)| d * b.f64()).sum();
    for (l, layer) in cache.layers.iter().enumerate() {
        for (h, head) in layer.head_out.axis_iter(Axis(0)).enumerate() {
            out.push((Component::Head { layer: l, head: h }, norm.project(head.row(position), &u, u_sum)));
        }
        out.push((Component::Mlp { layer: l }, norm.project(layer.mlp_out.row(position), &u, u_sum)));
        bias += norm.project(params.layers[l].b_out.view(), &u, u_sum);
    }
    out.push((Component::Bias, bias));
    Ok(out)
}

/// Single-sample attribution table.
pub fn attribute<T: Real>(
    params: &ModelParams<T>,
    cache: &ActivationCache<T>,
    direction: ArrayView1<f64>,
    position: usize,
    direction_label: &str,
) -> Result<AttributionTable> {
    let values = attribute_values(params, cache, direction, position)?;
    Ok(AttributionTable {
        direction: direction_label.to_owned(),
        n_samples: 1,
        rows: values
            .into_iter()
            .map(|(component, mean)| AttributionRow { component, mean, std: 0.0 })
            .collect(),
    })
}

/// Attribution of a single head's output onto a direction, frozen-LayerNorm
/// map applied.
pub fn head_attribution<T: Real>(
    params: &ModelParams<T>,
    cache: &ActivationCache<T>,
    layer: usize,
    head: usize,
    direction: ArrayView1<f64>,
    position: usize,
) -> Result<f64> {
    check_cache(params, cache, position, direction.len())?;
    if layer >= params.config.n_layers || head >= params.config.n_heads {
        return Err(Error::Analysis(format!("head ({layer},{head}) does not exist")));
    }
    let norm = FrozenNorm::new(cache.resid_final.row(position), params.config.layer_norm_eps);
    let u: Vec<f64> = direction.iter().zip(params.lnf_w.iter()).map(|(d, w)| d * w.f64()).collect();
    let u_sum: f64 = u.iter().sum();
    let out = cache.layers[layer].head_out.index_axis(Axis(0), head);
    Ok(norm.project(out.row(position), &u, u_sum))
}

/// `direction · LayerNorm_f(resid)` at `position`: what the attributions sum to.
pub fn projected_value<T: Real>(
    params: &ModelParams<T>,
    cache: &ActivationCache<T>,
    direction: ArrayView1<f64>,
    position: usize,
) -> f64 {
    let x = cache.resid_final.row(position);
    let d = x.len() as f64;
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / d;
    let var = x.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d;
    let rstd = 1.0 / (var + params.config.layer_norm_eps).sqrt();
    x.iter()
        .zip(params.lnf_w.iter().zip(params.lnf_b.iter()))
        .zip(direction.iter())
        .map(|((x, (w, b)), dir)| dir * ((x.f64() - mean) * rstd * w.f64() + b.f64()))
        .sum()
}

/// Running mean / sample standard deviation.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanStd {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanStd {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).sqrt()
        } else {
            0.0
        }
    }
}

impl AttributionTable {
    /// Mean and standard deviation over per-sample value lists that share a
    /// component order.
    pub fn aggregate(direction: &str, samples: &[Vec<(Component, f64)>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Analysis("no samples to aggregate".into()))?;
        let mut stats = vec![MeanStd::default(); first.len()];
        for s in samples {
            if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
                return Err(Error::Analysis("attribution component sets differ across samples".into()));
            }
            for (acc, (_, v)) in stats.iter_mut().zip(s) {
                acc.push(*v);
            }
        }
        Ok(Self {
            direction: direction.to_owned(),
            n_samples: samples.len(),
            rows: first
                .iter()
                .zip(stats)
                .map(|((component, _), st)| AttributionRow {
                    component: *component,
                    mean: st.mean(),
                    std: st.std(),
                })
                .collect(),
        })
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().map(|r| r.mean).sum()
    }

    pub fn value(&self, component: Component) -> Option<f64> {
        self.rows.iter().find(|r| r.component == component).map(|r| r.mean)
    }

    /// Heads ordered by mean value, most negative first; ties by (layer, head).
    pub fn heads_ascending(&self) -> Vec<((usize, usize), f64)> {
        let mut heads: Vec<_> = self
            .rows
            .iter()
            .filter_map(|r| match r.component {
                Component::Head { layer, head } => Some(((layer, head), r.mean)),
                _ => None,
            })
            .collect();
        heads.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        heads
    }

    /// CSV with columns `layer,head_or_mlp,mean_value,n_samples,direction,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head_or_mlp,mean_value,n_samples,direction,std\n");
        for r in &self.rows {
            let (layer, what) = r.component.csv_fields();
            let _ = writeln!(
                out,
                "{layer},{what},{},{},{},{}",
                num(r.mean),
                self.n_samples,
                self.direction,
                num(r.std)
            );
        }
        out
    }
}
