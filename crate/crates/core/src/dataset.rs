//! Three-letter acronym prompts and the single-token noun vocabulary they
//! are drawn from.
//!
//! Every prompt follows `The {W1} {W2} {W3} ({L1}{L2}` and is fed to the
//! model with a leading `<|endoftext|>`, giving eight tokens:
//!
//! ```text
//! 0      1    2     3      4    5   6  7
//! <bos>  The  ␣W1   ␣W2   ␣W3   ␣(  L1 L2
//! ```
//!
//! The model is asked for `L3` at position 7.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Real};
use crate::tokenizer::{TokenId, Tokenizer};

/// Model-input length of every acronym prompt (BOS included).
pub const PROMPT_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateWord {
    pub word: String,
    pub token_id: TokenId,
    pub letter: char,
}

/// Capitalized nouns whose `" Word"` form is a single token.
#[derive(Debug, Clone, Default)]
pub struct CandidateVocab {
    words: Vec<CandidateWord>,
    by_letter: BTreeMap<char, Vec<usize>>,
    index: std::collections::HashMap<String, usize>,
}

/// Uppercases the first byte; `None` unless it is an ASCII letter.
pub fn capitalize(noun: &str) -> Option<String> {
    let first = *noun.as_bytes().first()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    let mut s = noun.to_owned();
    s[..1].make_ascii_uppercase();
    Some(s)
}

impl CandidateVocab {
    /// Applies the single-token filter to an iterator of nouns.
    pub fn from_nouns<I, S>(nouns: I, tokenizer: &Tokenizer) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut words = Vec::new();
        for noun in nouns {
            let noun = noun.as_ref().trim();
            let Some(word) = capitalize(noun) else { continue };
            if !seen.insert(word.to_lowercase()) {
                continue;
            }
            let ids = tokenizer.encode(&format!(" {word}"))?.ids;
            if let [id] = ids[..] {
                let letter = word.as_bytes()[0] as char;
                words.push(CandidateWord {
                    word,
                    token_id: id,
                    letter,
                });
            }
        }
        if words.is_empty() {
            return Err(Error::Curation("no noun survived the single-token filter".into()));
        }
        Ok(Self::from_words(words))
    }

    /// Reads a one-noun-per-line UTF-8 file and filters it.
    pub fn build(noun_list_path: impl AsRef<Path>, tokenizer: &Tokenizer) -> Result<Self> {
        let path = noun_list_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_nouns(text.lines(), tokenizer)
    }

    pub fn from_words(words: Vec<CandidateWord>) -> Self {
        let mut by_letter: BTreeMap<char, Vec<usize>> = BTreeMap::new();
        let mut index = std::collections::HashMap::new();
        for (i, w) in words.iter().enumerate() {
            by_letter.entry(w.letter).or_default().push(i);
            index.insert(w.word.clone(), i);
        }
        Self {
            words,
            by_letter,
            index,
        }
    }

    pub fn words(&self) -> &[CandidateWord] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, i: usize) -> &CandidateWord {
        &self.words[i]
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn with_letter(&self, letter: char) -> &[usize] {
        self.by_letter.get(&letter).map_or(&[], Vec::as_slice)
    }

    /// Count of words per initial letter A–Z.
    pub fn letter_counts(&self) -> [usize; 26] {
        let mut counts = [0; 26];
        for w in &self.words {
            counts[(w.letter as u8 - b'A') as usize] += 1;
        }
        counts
    }

    /// The first `n` words, in file order.
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_words(self.words.iter().take(n).cloned().collect())
    }

    /// Rows of `W_E` for every candidate, `[|vocab|, d]`.
    pub fn embeddings<T: Real>(&self, params: &ModelParams<T>) -> Array2<T> {
        let ids: Vec<usize> = self.words.iter().map(|w| w.token_id as usize).collect();
        params.wte.select(Axis(0), &ids)
    }
}

/// Token index of each role in the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolePositions {
    pub word1: usize,
    pub word2: usize,
    pub word3: usize,
    pub open_paren: usize,
    pub letter1: usize,
    pub letter2: usize,
}

impl RolePositions {
    pub const TEMPLATE: Self = Self {
        word1: 2,
        word2: 3,
        word3: 4,
        open_paren: 5,
        letter1: 6,
        letter2: 7,
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcronymSample {
    pub words: [String; 3],
    pub acronym: String,
    pub prompt: String,
    pub target_letter: char,
    pub target_token_id: TokenId,
    /// Model input, `<|endoftext|>` first.
    pub token_ids: Vec<TokenId>,
    pub positions: RolePositions,
}

pub fn prompt_for(words: &[&str; 3]) -> Option<String> {
    let initials: Vec<char> = words.iter().map(|w| w.chars().next()).collect::<Option<_>>()?;
    Some(format!(
        "The {} {} {} ({}{}",
        words[0], words[1], words[2], initials[0], initials[1]
    ))
}

/// Id of the single-character token for a capital letter.
pub fn letter_token(tokenizer: &Tokenizer, letter: char) -> Result<TokenId> {
    tokenizer
        .token_id(&letter.to_string())
        .ok_or_else(|| Error::Tokenizer(format!("no single-character token for {letter:?}")))
}

impl AcronymSample {
    /// Builds the prompt and checks the one-token-per-role layout.
    pub fn new(words: [&str; 3], tokenizer: &Tokenizer) -> Result<Self> {
        let initials: Vec<char> = words.iter().filter_map(|w| w.chars().next()).collect();
        if initials.len() != 3 || !initials.iter().all(char::is_ascii_uppercase) {
            return Err(Error::Curation(format!("words {words:?} must start with capitals A-Z")));
        }
        let prompt = prompt_for(&words).expect("initials checked");
        let mut token_ids = vec![tokenizer.bos_id()?];
        token_ids.extend(tokenizer.encode(&prompt)?.ids);

        let expected_layout = || -> Result<Vec<TokenId>> {
            let mut ids = vec![tokenizer.bos_id()?, tokenizer.encode("The")?.ids[0]];
            for w in &words {
                match tokenizer.encode(&format!(" {w}"))?.ids[..] {
                    [id] => ids.push(id),
                    _ => return Err(Error::Curation(format!("\" {w}\" is not a single token"))),
                }
            }
            ids.push(tokenizer.token_id("Ġ(").ok_or_else(|| Error::Tokenizer("no \" (\" token".into()))?);
            ids.push(letter_token(tokenizer, initials[0])?);
            ids.push(letter_token(tokenizer, initials[1])?);
            Ok(ids)
        };
        let expected = expected_layout()?;
        if token_ids != expected {
            return Err(Error::Curation(format!(
                "prompt {prompt:?} does not tokenize one token per role"
            )));
        }
        Ok(Self {
            words: words.map(str::to_owned),
            acronym: initials.iter().collect(),
            prompt,
            target_letter: initials[2],
            target_token_id: letter_token(tokenizer, initials[2])?,
            token_ids,
            positions: RolePositions::TEMPLATE,
        })
    }

    /// True when appending the target letter adds exactly that one token,
    /// i.e. the three printed letters stay separate tokens in context.
    pub fn target_is_separate_token(&self, tokenizer: &Tokenizer) -> Result<bool> {
        let with_target = tokenizer.encode(&format!("{}{}", self.prompt, self.target_letter))?.ids;
        let mut expected = self.token_ids[1..].to_vec();
        expected.push(self.target_token_id);
        Ok(with_target == expected)
    }

    pub fn word_refs(&self) -> [&str; 3] {
        [&self.words[0], &self.words[1], &self.words[2]]
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn final_position(&self) -> usize {
        self.token_ids.len() - 1
    }
}

/// Draws `n` curated samples; three distinct words per sample, uniform
/// with replacement across samples. Deterministic in `seed`.
pub fn build_dataset(vocab: &CandidateVocab, n: usize, seed: u64, tokenizer: &Tokenizer) -> Result<Vec<AcronymSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if vocab.len() < 3 {
        return Err(Error::Curation(format!("need at least 3 candidate words, have {}", vocab.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let max_draws = 1000 * n + 10_000;
    let mut draws = 0;
    while out.len() < n {
        draws += 1;
        if draws > max_draws {
            return Err(Error::Curation(format!(
                "only {} of {n} samples passed the tokenization checks after {max_draws} draws",
                out.len()
            )));
        }
        let a = rng.random_range(0..vocab.len());
        let b = rng.random_range(0..vocab.len());
        let c = rng.random_range(0..vocab.len());
        if a == b || b == c || a == c {
            continue;
        }
        let words = [vocab.get(a).word.as_str(), vocab.get(b).word.as_str(), vocab.get(c).word.as_str()];
        let Ok(sample) = AcronymSample::new(words, tokenizer) else { continue };
        if sample.target_is_separate_token(tokenizer)? {
            out.push(sample);
        }
    }
    Ok(out)
}

/// Corrupted twin: the third word replaced by a uniformly drawn different
/// vocabulary word; the first two words and the printed letters are kept.
pub fn resample_third_word<R: Rng>(
    sample: &AcronymSample,
    vocab: &CandidateVocab,
    rng: &mut R,
    tokenizer: &Tokenizer,
) -> Result<AcronymSample> {
    let original = vocab.index_of(&sample.words[2]);
    let pool = vocab.len() - usize::from(original.is_some());
    if pool == 0 {
        return Err(Error::Curation("vocabulary has no alternative third word".into()));
    }
    let mut pick = rng.random_range(0..pool);
    if let Some(o) = original {
        if pick >= o {
            pick += 1;
        }
    }
    let new = vocab.get(pick).word.as_str();
    let corrupted = AcronymSample::new([&sample.words[0], &sample.words[1], new], tokenizer)?;
    debug_assert_eq!(corrupted.seq_len(), sample.seq_len());
    Ok(corrupted)
}
