//! Resample-ablation sweeps: every head of a clean run is overwritten with
//! the same head from a corrupted twin (third word redrawn), one head at a
//! time, and the change in logit difference is averaged over samples.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{resample_third_word, AcronymSample, CandidateVocab};
use crate::error::{Error, Result};
use crate::io::num;
use crate::metrics::{letter_logit_diff, LetterSet, MeanStd};
use crate::model::{ActivationCache, ModelParams, PatchSpec, PatchTarget, Positions, Readout, Real};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionsPolicy {
    /// Only the final position, where the answer is read.
    #[default]
    Last,
    All,
}

impl PositionsPolicy {
    fn positions(self, seq_len: usize) -> Positions {
        match self {
            PositionsPolicy::Last => Positions::Only(vec![seq_len - 1]),
            PositionsPolicy::All => Positions::All,
        }
    }
}

impl FromStr for PositionsPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("positions must be `last` or `all`, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for PositionsPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PositionsPolicy::Last => "last",
            PositionsPolicy::All => "all",
        })
    }
}

/// A clean run and the run whose activations are patched into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPair {
    pub clean: Vec<TokenId>,
    pub donor: Vec<TokenId>,
    pub correct: char,
}

/// Layer × head matrix of mean (patched − clean) logit difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub values: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub positions: PositionsPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    pub value: f64,
}

/// One corrupted twin per clean sample, drawn in order from a single
/// stream seeded with `seed`.
pub fn corrupt_dataset(
    dataset: &[AcronymSample],
    vocab: &CandidateVocab,
    seed: u64,
    tokenizer: &Tokenizer,
) -> Result<Vec<AcronymSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset
        .iter()
        .map(|s| resample_third_word(s, vocab, &mut rng, tokenizer))
        .collect()
}

fn letter_logits<T: Real>(
    params: &ModelParams<T>,
    cache: &ActivationCache<T>,
    spec: Option<&PatchSpec<'_, T>>,
    letters: &LetterSet,
) -> Result<[f64; 26]> {
    let readout = Readout::LastTokens(letters.token_ids());
    let row = match spec {
        Some(spec) => params.patched_readout_from(cache, spec, readout)?,
        None => params.readout(&cache.resid_final, readout),
    };
    Ok(std::array::from_fn(|i| row[[0, i]].f64()))
}

/// Per-sample logit-difference deltas for each target, in pair order.
pub fn patch_deltas<T: Real>(
    params: &ModelParams<T>,
    pairs: &[PatchPair],
    targets: &[PatchTarget],
    letters: &LetterSet,
    policy: PositionsPolicy,
) -> Result<Vec<Vec<f64>>> {
    let len = pairs
        .first()
        .ok_or_else(|| Error::Sweep("empty dataset".into()))?
        .clean
        .len();
    for (i, p) in pairs.iter().enumerate() {
        if p.clean.len() != len || p.donor.len() != len {
            return Err(Error::Sweep(format!(
                "pair {i} has lengths {}/{}, expected {len}",
                p.clean.len(),
                p.donor.len()
            )));
        }
    }
    pairs
        .par_iter()
        .map(|pair| {
            let (_, clean) = params.forward_readout(&pair.clean, Readout::None)?;
            let (_, donor) = params.forward_readout(&pair.donor, Readout::None)?;
            let base = letter_logit_diff(&letter_logits(params, &clean, None, letters)?, pair.correct);
            targets
                .par_iter()
                .map(|&target| {
                    let spec = PatchSpec {
                        target,
                        positions: policy.positions(len),
                        donor: &donor,
                    };
                    let patched = letter_logits(params, &clean, Some(&spec), letters)?;
                    Ok(letter_logit_diff(&patched, pair.correct) - base)
                })
                .collect()
        })
        .collect()
}

/// Mean and sample standard deviation per target.
pub fn summarize(deltas: &[Vec<f64>], n_targets: usize) -> Vec<(f64, f64)> {
    let mut acc = vec![MeanStd::default(); n_targets];
    for row in deltas {
        for (a, &d) in acc.iter_mut().zip(row) {
            a.push(d);
        }
    }
    acc.iter().map(|a| (a.mean(), a.std())).collect()
}

fn all_heads(n_layers: usize, n_heads: usize) -> Vec<PatchTarget> {
    (0..n_layers)
        .flat_map(|layer| (0..n_heads).map(move |head| PatchTarget::Head { layer, head }))
        .collect()
}

/// Head sweep over explicit clean/donor pairs.
pub fn sweep_pairs<T: Real>(
    params: &ModelParams<T>,
    pairs: &[PatchPair],
    letters: &LetterSet,
    policy: PositionsPolicy,
) -> Result<PatchGrid> {
    let (nl, nh) = (params.config.n_layers, params.config.n_heads);
    let targets = all_heads(nl, nh);
    let deltas = patch_deltas(params, pairs, &targets, letters, policy)?;
    let stats = summarize(&deltas, targets.len());
    let grid = |f: fn(&(f64, f64)) -> f64| -> Vec<Vec<f64>> {
        stats.chunks(nh).map(|row| row.iter().map(f).collect()).collect()
    };
    let out = PatchGrid {
        values: grid(|s| s.0),
        std: grid(|s| s.1),
        n_samples: pairs.len(),
        positions: policy,
    };
    if out.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch grid"));
    }
    Ok(out)
}

/// Builds a corrupted twin per sample and sweeps every head.
pub fn patch_sweep<T: Real>(
    params: &ModelParams<T>,
    dataset: &[AcronymSample],
    vocab: &CandidateVocab,
    seed: u64,
    policy: PositionsPolicy,
    letters: &LetterSet,
    tokenizer: &Tokenizer,
) -> Result<PatchGrid> {
    let corrupted = corrupt_dataset(dataset, vocab, seed, tokenizer)?;
    sweep_pairs(params, &pairs_of(dataset, &corrupted), letters, policy)
}

pub fn pairs_of(clean: &[AcronymSample], donors: &[AcronymSample]) -> Vec<PatchPair> {
    clean
        .iter()
        .zip(donors)
        .map(|(c, d)| PatchPair {
            clean: c.token_ids.clone(),
            donor: d.token_ids.clone(),
            correct: c.target_letter,
        })
        .collect()
}

/// Heads sorted ascending by value, ties by (layer, head); `k` is clamped.
pub fn rank_components(grid: &PatchGrid, k: usize) -> Vec<RankedHead> {
    let mut all: Vec<RankedHead> = grid
        .values
        .iter()
        .enumerate()
        .flat_map(|(layer, row)| {
            row.iter()
                .enumerate()
                .map(move |(head, &value)| RankedHead { layer, head, value })
        })
        .collect();
    all.sort_by(|a, b| a.value.total_cmp(&b.value).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    all.truncate(k);
    all
}

impl PatchGrid {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn n_heads(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer][head]
    }

    /// CSV with columns `layer,head,mean_delta,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,mean_delta,std\n");
        for (l, (vals, stds)) in self.values.iter().zip(&self.std).enumerate() {
            for (h, (v, s)) in vals.iter().zip(stds).enumerate() {
                let _ = writeln!(out, "{l},{h},{},{}", num(*v), num(*s));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<Vec<f64>>) -> PatchGrid {
        let std = values.iter().map(|r| vec![0.0; r.len()]).collect();
        PatchGrid {
            values,
            std,
            n_samples: 1,
            positions: PositionsPolicy::Last,
        }
    }

    #[test]
    fn single_negative_cell_ranks_first() {
        let g = grid(vec![vec![0.0, 0.0], vec![-0.5, 0.0]]);
        let r = rank_components(&g, 1);
        assert_eq!((r[0].layer, r[0].head), (1, 0));
    }

    #[test]
    fn ties_break_by_layer_then_head_and_k_clamps() {
        let g = grid(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let r = rank_components(&g, 99);
        let order: Vec<_> = r.iter().map(|h| (h.layer, h.head)).collect();
        assert_eq!(order, [(0, 1), (1, 0), (0, 0), (1, 1)]);
    }

    #[test]
    fn csv_lists_every_cell() {
        let g = grid(vec![vec![-0.25, 0.0]]);
        assert_eq!(g.to_csv(), "layer,head,mean_delta,std\n0,0,-0.25,0\n0,1,0,0\n");
    }

    #[test]
    fn policy_parses() {
        assert_eq!("all".parse::<PositionsPolicy>().unwrap(), PositionsPolicy::All);
        assert!("first".parse::<PositionsPolicy>().is_err());
        assert_eq!(PositionsPolicy::Last.to_string(), "last");
    }
}
