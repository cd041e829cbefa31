//! Gradient-guided search for acronym prompts the model gets wrong.
//!
//! The third word is optimized as a continuous embedding `P`. Each step
//! projects `P` onto the nearest candidate-noun embedding `P'`, takes the
//! margin-loss gradient at `P'`, and moves `P` against it. The label at a
//! step is the initial of the word `P'` currently spells, since swapping the
//! third word swaps the correct answer with it.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, AcronymSample, CandidateVocab, RolePositions};
use crate::error::{Error, Result};
use crate::metrics::{argmax_letter, best_other_letter, letter_logit_diff, LetterSet};
use crate::model::{LogitLoss, ModelParams, Readout, Real};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_steps: usize,
    /// Step size α; plain gradient descent.
    pub learning_rate: f64,
    /// Margin κ in logit units.
    pub kappa: f64,
    /// One flag per prompt position. `None` optimizes the third word only,
    /// which is also the only position that may be set.
    pub mask: Option<Vec<bool>>,
    pub batch_size: usize,
    pub target_count: usize,
    pub seed: u64,
    /// Clean samples drawn before giving up with a partial set.
    pub max_attempts: usize,
    /// Skip clean samples the model already gets wrong.
    pub require_clean_correct: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            learning_rate: 1.0,
            kappa: 0.0,
            mask: None,
            batch_size: 128,
            target_count: 1000,
            seed: 0,
            max_attempts: 100_000,
            require_clean_correct: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if self.batch_size == 0 || self.target_count == 0 {
            return Err(Error::Config("batch size and target count must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the third word is optimized, after checking the mask shape.
    fn third_word_masked(&self, seq_len: usize) -> Result<bool> {
        let Some(mask) = &self.mask else { return Ok(true) };
        if mask.len() != seq_len {
            return Err(Error::Config(format!("mask has {} entries, prompt has {seq_len}", mask.len())));
        }
        let word3 = RolePositions::TEMPLATE.word3;
        if let Some(p) = mask.iter().enumerate().position(|(i, &m)| m && i != word3) {
            return Err(Error::Config(format!("only the third word (position {word3}) can be optimized, mask sets {p}")));
        }
        Ok(mask[word3])
    }
}

/// `max(logit[target] − max_{k≠target} logit[k] + κ, 0)` over the letters.
pub fn margin_loss_letters(letter_logits: &[f64; 26], target: char, kappa: f64) -> f64 {
    (letter_logit_diff(letter_logits, target) + kappa).max(0.0)
}

pub fn margin_loss<T: Real>(final_logits: ArrayView1<T>, target: char, letters: &LetterSet, kappa: f64) -> f64 {
    margin_loss_letters(&letters.gather(final_logits), target, kappa)
}

/// [`margin_loss_letters`] as a differentiable [`LogitLoss`]; the gradient
/// picks the earliest best rival on ties.
#[derive(Debug, Clone)]
pub struct MarginLoss {
    pub letters: LetterSet,
    pub target: char,
    pub kappa: f64,
}

impl LogitLoss for MarginLoss {
    fn tokens(&self) -> &[TokenId] {
        self.letters.token_ids()
    }

    fn value_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let l: [f64; 26] = logits.try_into().expect("26 letter logits");
        let t = LetterSet::index(self.target).expect("capital target");
        let value = margin_loss_letters(&l, self.target, self.kappa);
        let mut grad = vec![0.0; 26];
        if value > 0.0 {
            let rival = best_other_letter(&l, self.target);
            grad[t] = 1.0;
            grad[LetterSet::index(rival).expect("capital")] = -1.0;
        }
        (value, grad)
    }
}

/// Nearest row of `candidates` by Euclidean distance, ties to the lowest
/// index, skipping `exclude`. Returns `(row, squared distance)`.
pub fn project_to_vocab(p: ArrayView1<f64>, candidates: ArrayView2<f64>, exclude: Option<usize>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in candidates.rows().into_iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        let d: f64 = row.iter().zip(p.iter()).map(|(e, x)| (e - x) * (e - x)).sum();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSample {
    pub origin_words: [String; 3],
    pub adv_word: String,
    /// Initial of the adversarial third word.
    pub correct_letter: char,
    /// Argmax over the 26 capital letters on a fresh forward pass.
    pub predicted_letter: char,
    pub clean_logit_diff: f64,
    pub adv_logit_diff: f64,
    /// Gradient steps taken before the loss reached zero or the budget ran out.
    pub steps: usize,
    pub prompt: String,
    pub token_ids: Vec<TokenId>,
}

impl AdvSample {
    pub fn words(&self) -> [&str; 3] {
        [&self.origin_words[0], &self.origin_words[1], &self.adv_word]
    }

    /// Rebuilds and re-validates the adversarial prompt.
    pub fn to_acronym_sample(&self, tokenizer: &Tokenizer) -> Result<AcronymSample> {
        AcronymSample::new(self.words(), tokenizer)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    /// Clean samples drawn.
    pub attempts: usize,
    /// Clean samples skipped because the model already misclassifies them.
    pub skipped_clean_wrong: usize,
    /// Optimization runs that ended misclassified.
    pub successes: usize,
    /// Successes dropped because their word triple was already collected.
    pub duplicates: usize,
    /// Runs aborted on a non-finite gradient.
    pub numeric_failures: usize,
    /// Set when `max_attempts` ran out before `target_count`.
    pub partial: bool,
}

impl GenStats {
    pub fn success_rate(&self) -> f64 {
        let tried = self.attempts - self.skipped_clean_wrong;
        if tried == 0 {
            0.0
        } else {
            self.successes as f64 / tried as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvSet {
    pub samples: Vec<AdvSample>,
    pub stats: GenStats,
}

/// Per-step record, for inspecting a single optimization.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    /// Continuous `P` before each step.
    pub continuous: Vec<Array2<T>>,
    /// Projected `P'` at each step.
    pub projected: Vec<Array2<T>>,
    pub losses: Vec<f64>,
    pub result: Option<AdvSample>,
}

pub struct Generator<'a, T: Real> {
    params: &'a ModelParams<T>,
    vocab: &'a CandidateVocab,
    tokenizer: &'a Tokenizer,
    letters: LetterSet,
    candidates: Array2<f64>,
    config: GenConfig,
}

enum Outcome<T> {
    Done(Option<AdvSample>),
    Traced(Trajectory<T>),
}

impl<'a, T: Real> Generator<'a, T> {
    pub fn new(params: &'a ModelParams<T>, vocab: &'a CandidateVocab, tokenizer: &'a Tokenizer, config: GenConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() < 2 {
            return Err(Error::Config("candidate set needs at least two words".into()));
        }
        Ok(Self {
            params,
            vocab,
            tokenizer,
            letters: LetterSet::new(tokenizer)?,
            candidates: vocab.embeddings(params).mapv(|x| x.f64()),
            config,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    fn letter_logits(&self, ids: &[TokenId]) -> Result<[f64; 26]> {
        let (row, _) = self.params.forward_readout(ids, Readout::LastTokens(self.letters.token_ids()))?;
        Ok(std::array::from_fn(|i| row[[0, i]].f64()))
    }

    /// Runs the optimization on one clean sample; `None` unless the final
    /// discrete prompt is misclassified on a fresh forward pass.
    pub fn generate(&self, sample: &AcronymSample) -> Result<Option<AdvSample>> {
        match self.run(sample, false)? {
            Outcome::Done(r) => Ok(r),
            Outcome::Traced(t) => Ok(t.result),
        }
    }

    pub fn trajectory(&self, sample: &AcronymSample) -> Result<Trajectory<T>> {
        match self.run(sample, true)? {
            Outcome::Traced(t) => Ok(t),
            Outcome::Done(_) => unreachable!("tracing requested"),
        }
    }

    fn run(&self, sample: &AcronymSample, record: bool) -> Result<Outcome<T>> {
        let pos = sample.positions.word3;
        let optimize = self.config.third_word_masked(sample.seq_len())?;
        let original = self.vocab.index_of(&sample.words[2]);
        let mut p = self.params.embed_tokens(&sample.token_ids)?;
        let mut trace = Trajectory {
            continuous: Vec::new(),
            projected: Vec::new(),
            losses: Vec::new(),
            result: None,
        };

        let project = |p: &Array2<T>| -> (Array2<T>, Option<usize>) {
            if !optimize {
                return (p.clone(), original);
            }
            let row = p.row(pos).mapv(|x| x.f64());
            let (idx, _) = project_to_vocab(row.view(), self.candidates.view(), original).expect("two or more candidates");
            let mut projected = p.clone();
            projected
                .row_mut(pos)
                .assign(&self.params.wte.row(self.vocab.get(idx).token_id as usize));
            (projected, Some(idx))
        };

        let mut steps = 0;
        if optimize {
            for _ in 0..self.config.num_steps {
                let (projected, idx) = project(&p);
                let label = self.vocab.get(idx.expect("optimized position is projected")).letter;
                let loss = MarginLoss {
                    letters: self.letters.clone(),
                    target: label,
                    kappa: self.config.kappa,
                };
                let g = self.params.grad_wrt_embeddings(projected.view(), &loss)?;
                if record {
                    trace.continuous.push(p.clone());
                    trace.projected.push(projected);
                    trace.losses.push(g.loss);
                }
                if g.loss == 0.0 {
                    break;
                }
                let alpha = T::of(self.config.learning_rate);
                let mut row = p.row_mut(pos);
                row.zip_mut_with(&g.grad.row(pos), |x, &gr| *x -= alpha * gr);
                if !row.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite("embedding update"));
                }
                steps += 1;
            }
        }

        let (_, idx) = project(&p);
        let result = match idx {
            Some(i) => self.verify(sample, &self.vocab.get(i).word, steps)?,
            None => self.verify(sample, &sample.words[2], steps)?,
        };
        Ok(if record {
            trace.result = result;
            Outcome::Traced(trace)
        } else {
            Outcome::Done(result)
        })
    }

    fn verify(&self, origin: &AcronymSample, word: &str, steps: usize) -> Result<Option<AdvSample>> {
        let adv = AcronymSample::new([&origin.words[0], &origin.words[1], word], self.tokenizer)?;
        let logits = self.letter_logits(&adv.token_ids)?;
        let predicted = argmax_letter(&logits);
        if predicted == adv.target_letter {
            return Ok(None);
        }
        let clean = self.letter_logits(&origin.token_ids)?;
        Ok(Some(AdvSample {
            origin_words: origin.words.clone(),
            adv_word: word.to_owned(),
            correct_letter: adv.target_letter,
            predicted_letter: predicted,
            clean_logit_diff: letter_logit_diff(&clean, origin.target_letter),
            adv_logit_diff: letter_logit_diff(&logits, adv.target_letter),
            steps,
            prompt: adv.prompt,
            token_ids: adv.token_ids,
        }))
    }

    fn attempt(&self, sample: &AcronymSample) -> Result<Attempt> {
        if self.config.require_clean_correct {
            let logits = self.letter_logits(&sample.token_ids)?;
            if argmax_letter(&logits) != sample.target_letter {
                return Ok(Attempt::SkippedWrong);
            }
        }
        match self.generate(sample) {
            Ok(r) => Ok(Attempt::Ran(r)),
            Err(Error::NonFinite(_)) => Ok(Attempt::NumericFailure),
            Err(e) => Err(e),
        }
    }

    /// Runs over fixed clean samples, in batches, until `target_count`
    /// unique adversarial triples are collected or the samples run out.
    pub fn generate_over(&self, dataset: &[AcronymSample]) -> Result<AdvSet> {
        let mut set = AdvSet::default();
        let mut seen = HashSet::new();
        for batch in dataset.chunks(self.config.batch_size) {
            if self.absorb(batch, &mut set, &mut seen)? {
                return Ok(set);
            }
        }
        set.stats.partial = set.samples.len() < self.config.target_count;
        Ok(set)
    }

    /// Draws fresh clean samples in batches of `batch_size` until
    /// `target_count` unique adversarial triples are collected. Stops with
    /// `stats.partial` set once `max_attempts` samples have been drawn.
    pub fn generate_batch(&self) -> Result<AdvSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut set = AdvSet::default();
        let mut seen = HashSet::new();
        while set.stats.attempts < self.config.max_attempts {
            let n = self.config.batch_size.min(self.config.max_attempts - set.stats.attempts);
            let batch = build_dataset(self.vocab, n, rng.random(), self.tokenizer)?;
            if self.absorb(&batch, &mut set, &mut seen)? {
                return Ok(set);
            }
        }
        set.stats.partial = true;
        log::warn!(
            "adversarial generation stopped after {} attempts with {} of {} samples",
            set.stats.attempts,
            set.samples.len(),
            self.config.target_count
        );
        Ok(set)
    }

    /// Runs a batch in parallel and folds the results in sample order.
    /// Returns true once the target count is reached.
    fn absorb(&self, batch: &[AcronymSample], set: &mut AdvSet, seen: &mut HashSet<[String; 3]>) -> Result<bool> {
        let results: Vec<Attempt> = batch.par_iter().map(|s| self.attempt(s)).collect::<Result<_>>()?;
        for r in results {
            set.stats.attempts += 1;
            match r {
                Attempt::SkippedWrong => set.stats.skipped_clean_wrong += 1,
                Attempt::NumericFailure => set.stats.numeric_failures += 1,
                Attempt::Ran(None) => {}
                Attempt::Ran(Some(adv)) => {
                    set.stats.successes += 1;
                    if seen.insert(adv.words().map(str::to_owned)) {
                        set.samples.push(adv);
                    } else {
                        set.stats.duplicates += 1;
                    }
                }
            }
            if set.samples.len() >= self.config.target_count {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

enum Attempt {
    SkippedWrong,
    NumericFailure,
    Ran(Option<AdvSample>),
}

/// Every third-word substitution from `vocab` (original excluded) that the
/// model misclassifies, found by one forward pass per candidate.
pub fn brute_force_substitutions<T: Real>(
    params: &ModelParams<T>,
    sample: &AcronymSample,
    vocab: &CandidateVocab,
    tokenizer: &Tokenizer,
) -> Result<Vec<String>> {
    let letters = LetterSet::new(tokenizer)?;
    let words: Vec<&str> = vocab
        .words()
        .iter()
        .map(|w| w.word.as_str())
        .filter(|w| *w != sample.words[2])
        .collect();
    let hits: Vec<Option<String>> = words
        .par_iter()
        .map(|w| {
            let adv = AcronymSample::new([&sample.words[0], &sample.words[1], w], tokenizer)?;
            let (row, _) = params.forward_readout(&adv.token_ids, Readout::LastTokens(letters.token_ids()))?;
            let logits: [f64; 26] = std::array::from_fn(|i| row[[0, i]].f64());
            Ok((argmax_letter(&logits) != adv.target_letter).then(|| (*w).to_owned()))
        })
        .collect::<Result<_>>()?;
    Ok(hits.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn margin_loss_examples() {
        let mut l = [0.0; 26];
        l[0] = 5.0;
        l[16] = 3.0;
        assert_eq!(margin_loss_letters(&l, 'A', 0.0), 2.0);
        let mut l = [0.0; 26];
        l[0] = 1.0;
        l[16] = 4.0;
        assert_eq!(margin_loss_letters(&l, 'A', 0.0), 0.0);
        let mut l = [0.0; 26];
        l[0] = 3.0;
        l[16] = 3.0;
        assert_eq!(margin_loss_letters(&l, 'A', 1.0), 1.0);
    }

    #[test]
    fn margin_gradient_picks_target_and_rival() {
        let loss = MarginLoss {
            letters: LetterSet::from_token_ids(std::array::from_fn(|i| i as u32)),
            target: 'C',
            kappa: 0.0,
        };
        let mut l = vec![0.0; 26];
        l[2] = 2.0;
        l[5] = 1.0;
        l[9] = 1.0;
        let (v, g) = loss.value_and_grad(&l);
        assert_eq!(v, 1.0);
        assert_eq!((g[2], g[5], g[9]), (1.0, -1.0, 0.0));
        l[5] = 3.0;
        let (v, g) = loss.value_and_grad(&l);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_tie_goes_to_lower_index() {
        let e = array![[0.0, 0.0], [5.0, 5.0], [2.0, 0.0], [0.0, 2.0]];
        assert_eq!(project_to_vocab(array![1.0, 0.0].view(), e.view(), None), Some((0, 1.0)));
        assert_eq!(project_to_vocab(array![1.0, 0.0].view(), e.view(), Some(0)), Some((2, 1.0)));
        assert_eq!(project_to_vocab(array![5.0, 5.0].view(), e.view(), None), Some((1, 0.0)));
        assert_eq!(project_to_vocab(array![1.0].view(), Array2::zeros((0, 1)).view(), None), None);
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = GenConfig {
            learning_rate: 0.0,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GenConfig {
            kappa: -1.0,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut mask = vec![false; 8];
        mask[2] = true;
        let bad = GenConfig {
            mask: Some(mask),
            ..GenConfig::default()
        };
        assert!(bad.third_word_masked(8).is_err());
        assert!(GenConfig::default().third_word_masked(8).unwrap());
    }
}
