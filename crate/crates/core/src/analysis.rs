//! Letter-distribution shift of adversarial samples and the attribution
//! views used to find the head behind it.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::AdvSample;
use crate::dataset::{AcronymSample, CandidateVocab};
use crate::error::{Error, Result};
use crate::io::num;
use crate::metrics::{
    attribute_values, diff_direction, head_attribution, letter_direction, AttributionTable, Component, LetterSet,
    MeanStd, LETTERS,
};
use crate::model::{ModelParams, Readout, Real};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPRow {
    pub letter: char,
    pub p_orig: f64,
    pub p_adv: f64,
    /// `(p_adv − p_orig) / p_orig`.
    pub delta_p: f64,
    pub n_adv: usize,
    pub n_base: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPTable {
    /// Letters with a nonzero base rate, A to Z.
    pub rows: Vec<DeltaPRow>,
    /// Letters absent from the base distribution.
    pub excluded: Vec<char>,
}

/// Δp from per-letter counts. Letters with zero base count are excluded and
/// both distributions are normalized over the rest.
pub fn delta_p_from_counts(adv_counts: &[usize; 26], base_counts: &[usize; 26]) -> Result<DeltaPTable> {
    let included: Vec<usize> = (0..26).filter(|&i| base_counts[i] > 0).collect();
    if included.is_empty() {
        return Err(Error::Analysis("every letter has a zero base rate".into()));
    }
    let base_total: usize = included.iter().map(|&i| base_counts[i]).sum();
    let adv_total: usize = included.iter().map(|&i| adv_counts[i]).sum();
    if adv_total == 0 {
        return Err(Error::Analysis("no adversarial samples over the included letters".into()));
    }
    let rows = included
        .iter()
        .map(|&i| {
            let p_orig = base_counts[i] as f64 / base_total as f64;
            let p_adv = adv_counts[i] as f64 / adv_total as f64;
            DeltaPRow {
                letter: LETTERS[i],
                p_orig,
                p_adv,
                delta_p: (p_adv - p_orig) / p_orig,
                n_adv: adv_counts[i],
                n_base: base_counts[i],
            }
        })
        .collect();
    Ok(DeltaPTable {
        rows,
        excluded: (0..26).filter(|&i| base_counts[i] == 0).map(|i| LETTERS[i]).collect(),
    })
}

pub fn letter_counts<I: IntoIterator<Item = char>>(letters: I) -> [usize; 26] {
    let mut counts = [0; 26];
    for c in letters {
        if let Some(i) = LetterSet::index(c) {
            counts[i] += 1;
        }
    }
    counts
}

/// Δp of the adversarial third-word initials against the candidate
/// vocabulary's letter distribution.
pub fn delta_p(adv: &[AdvSample], vocab: &CandidateVocab) -> Result<DeltaPTable> {
    if adv.is_empty() {
        return Err(Error::Analysis("empty adversarial set".into()));
    }
    delta_p_from_counts(&letter_counts(adv.iter().map(|a| a.correct_letter)), &vocab.letter_counts())
}

/// Same, with the third words of a sampled dataset as the base rate.
pub fn delta_p_vs_dataset(adv: &[AdvSample], dataset: &[AcronymSample]) -> Result<DeltaPTable> {
    if adv.is_empty() {
        return Err(Error::Analysis("empty adversarial set".into()));
    }
    delta_p_from_counts(
        &letter_counts(adv.iter().map(|a| a.correct_letter)),
        &letter_counts(dataset.iter().map(|s| s.target_letter)),
    )
}

impl DeltaPTable {
    pub fn get(&self, letter: char) -> Option<&DeltaPRow> {
        self.rows.iter().find(|r| r.letter == letter)
    }

    /// Letters by descending Δp, ties alphabetical.
    pub fn ranked(&self) -> Vec<&DeltaPRow> {
        let mut rows: Vec<&DeltaPRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.delta_p.total_cmp(&a.delta_p).then(a.letter.cmp(&b.letter)));
        rows
    }

    /// CSV with columns `letter,p_orig,p_adv,delta_p,n_adv,n_vocab`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("letter,p_orig,p_adv,delta_p,n_adv,n_vocab\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.letter,
                num(r.p_orig),
                num(r.p_adv),
                num(r.delta_p),
                r.n_adv,
                r.n_base
            );
        }
        out
    }
}

fn select(adv: &[AdvSample], letter_filter: Option<char>) -> Result<Vec<&AdvSample>> {
    let chosen: Vec<&AdvSample> = adv
        .iter()
        .filter(|a| letter_filter.is_none_or(|l| a.correct_letter == l))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Analysis(match letter_filter {
            Some(l) => format!("no adversarial samples with letter {l}"),
            None => "empty adversarial set".into(),
        }));
    }
    Ok(chosen)
}

/// Component attributions of one prompt along `W_U[correct] − W_U[foil]`
/// at the final position.
pub fn logit_diff_attribution<T: Real>(
    params: &ModelParams<T>,
    token_ids: &[TokenId],
    correct: char,
    foil: char,
    letters: &LetterSet,
) -> Result<Vec<(Component, f64)>> {
    let (_, cache) = params.forward_readout(token_ids, Readout::None)?;
    let dir = diff_direction(params, letters, correct, foil);
    attribute_values(params, &cache, dir.view(), token_ids.len() - 1)
}

/// Mean attribution table over the adversarial samples whose correct letter
/// matches the filter, each along correct minus predicted letter.
pub fn adversarial_attribution<T: Real>(
    params: &ModelParams<T>,
    adv: &[AdvSample],
    letter_filter: Option<char>,
    letters: &LetterSet,
) -> Result<AttributionTable> {
    let chosen = select(adv, letter_filter)?;
    let per_sample: Vec<Vec<(Component, f64)>> = chosen
        .par_iter()
        .map(|a| logit_diff_attribution(params, &a.token_ids, a.correct_letter, a.predicted_letter, letters))
        .collect::<Result<_>>()?;
    AttributionTable::aggregate("logit_diff", &per_sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterProjection {
    pub layer: usize,
    pub head: usize,
    pub n_samples: usize,
    pub mean: [f64; 26],
    pub std: [f64; 26],
}

impl LetterProjection {
    pub fn value(&self, letter: char) -> f64 {
        self.mean[LetterSet::index(letter).expect("capital letter")]
    }

    /// Highest-mean letter other than `exclude`; ties alphabetical.
    pub fn top_other(&self, exclude: char) -> char {
        crate::metrics::best_other_letter(&self.mean, exclude)
    }

    /// CSV with columns `letter,mean_value,std,n_samples`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("letter,mean_value,std,n_samples\n");
        for (i, c) in LETTERS.iter().enumerate() {
            let _ = writeln!(out, "{c},{},{},{}", num(self.mean[i]), num(self.std[i]), self.n_samples);
        }
        out
    }
}

/// Attribution of one head's final-position output onto each of the 26
/// letter directions, averaged over the selected samples.
pub fn head_letter_projection<T: Real>(
    params: &ModelParams<T>,
    adv: &[AdvSample],
    (layer, head): (usize, usize),
    letter_filter: Option<char>,
    letters: &LetterSet,
) -> Result<LetterProjection> {
    if layer >= params.config.n_layers || head >= params.config.n_heads {
        return Err(Error::Analysis(format!("head ({layer},{head}) does not exist")));
    }
    let chosen = select(adv, letter_filter)?;
    let dirs: Vec<_> = LETTERS.iter().map(|&c| letter_direction(params, letters, c)).collect();
    let per_sample: Vec<Vec<f64>> = chosen
        .par_iter()
        .map(|a| {
            let (_, cache) = params.forward_readout(&a.token_ids, Readout::None)?;
            let pos = a.token_ids.len() - 1;
            dirs.iter()
                .map(|d| head_attribution(params, &cache, layer, head, d.view(), pos))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut acc = [MeanStd::default(); 26];
    for row in &per_sample {
        for (a, &v) in acc.iter_mut().zip(row) {
            a.push(v);
        }
    }
    Ok(LetterProjection {
        layer,
        head,
        n_samples: per_sample.len(),
        mean: acc.map(|a| a.mean()),
        std: acc.map(|a| a.std()),
    })
}
