//! Byte-level BPE tokenizer compatible with the GPT-2 `vocab.json` /
//! `merges.txt` pair.
//!
//! Text is split by the GPT-2 pre-tokenization pattern, every pre-token is
//! mapped byte-wise onto the printable byte↔unicode alphabet, and merges are
//! applied lowest-rank first until no ranked pair remains.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// `<|endoftext|>`, prepended as BOS to every model input.
pub const END_OF_TEXT: &str = "<|endoftext|>";

const PRETOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// A tokenized string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub text: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct Tokenizer {
    encoder: HashMap<String, TokenId>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("vocab_size", &self.vocab_size())
            .field("merges", &self.ranks.len())
            .finish()
    }
}

/// The reversible byte → printable-char table used by GPT-2.
///
/// Printable Latin-1 bytes map to themselves; the remaining 68 bytes are
/// shifted to code points 256.. in byte order.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut shifted = 0u32;
    for b in 0..=255u32 {
        let printable = (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b);
        let cp = if printable {
            b
        } else {
            shifted += 1;
            255 + shifted
        };
        table[b as usize] = char::from_u32(cp).expect("valid code point");
    }
    table
}

impl Tokenizer {
    pub fn from_files(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab_path.as_ref();
        let merges_path = merges_path.as_ref();
        let vocab_json =
            std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_strs(&vocab_json, &merges)
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let encoder: HashMap<String, TokenId> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Tokenizer(format!("vocab.json: {e}")))?;
        let size = encoder.len();
        let mut decoder = vec![String::new(); size];
        let mut seen = vec![false; size];
        for (tok, &id) in &encoder {
            let slot = id as usize;
            if slot >= size || seen[slot] {
                return Err(Error::Tokenizer(format!(
                    "vocab.json ids must be a permutation of 0..{size}; offending id {id}"
                )));
            }
            seen[slot] = true;
            decoder[slot] = tok.clone();
        }

        let mut ranks = HashMap::new();
        for line in merges_txt.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Tokenizer(format!("bad merge line `{line}`")));
            };
            let rank = ranks.len();
            ranks.entry((a.to_owned(), b.to_owned())).or_insert(rank);
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let pattern = Regex::new(PRETOKENIZE_PATTERN).expect("pre-tokenization pattern compiles");

        Ok(Self {
            encoder,
            decoder,
            ranks,
            byte_encoder,
            byte_decoder,
            pattern,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    /// Id of a vocabulary entry given in its byte-mapped surface form
    /// (e.g. `"ĠSlam"`).
    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.encoder.get(token).copied()
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.decoder.get(id as usize).map(String::as_str)
    }

    pub fn bos_id(&self) -> Result<TokenId> {
        self.token_id(END_OF_TEXT)
            .ok_or_else(|| Error::Tokenizer(format!("vocabulary has no {END_OF_TEXT} entry")))
    }

    /// Splits text into pre-tokens (before byte mapping and merges).
    pub fn pretokenize<'a>(&self, text: &'a str) -> Result<Vec<&'a str>> {
        self.pattern
            .find_iter(text)
            .map(|m| {
                m.map(|m| m.as_str())
                    .map_err(|e| Error::Tokenizer(format!("pre-tokenization failed: {e}")))
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        for piece in self.pretokenize(text)? {
            let mapped: String = piece.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                let id = self.encoder.get(&sym).ok_or_else(|| {
                    Error::Tokenizer(format!("merged symbol `{sym}` missing from vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        Ok(TokenSeq {
            ids,
            text: text.to_owned(),
        })
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token_str(id).ok_or(Error::InvalidToken {
                id,
                vocab_size: self.vocab_size(),
            })?;
            for c in tok.chars() {
                let b = self.byte_decoder.get(&c).ok_or_else(|| {
                    Error::Tokenizer(format!("token {id} contains unmapped char {c:?}"))
                })?;
                out.push(*b);
            }
        }
        Ok(out)
    }

    /// Decodes ids to text. Byte sequences that are not valid UTF-8 (a
    /// multi-byte character split across a cut) are replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    fn bpe(&self, mapped: &str) -> Vec<String> {
        let mut word: Vec<String> = mapped.chars().map(String::from).collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        // alphabet: the 256 byte symbols, then a few merges
        let table = bytes_to_unicode();
        let mut vocab: Vec<String> = table.iter().map(|c| c.to_string()).collect();
        let merges = ["Ġ t", "h e", "Ġt he", "a b", "ab c"];
        for m in merges {
            vocab.push(m.replace(' ', ""));
        }
        vocab.push(END_OF_TEXT.to_owned());
        let json: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let merges_txt = format!("#version: 0.2\n{}\n", merges.join("\n"));
        Tokenizer::from_strs(&serde_json::to_string(&json).unwrap(), &merges_txt).unwrap()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let table = bytes_to_unicode();
        let mut chars: Vec<char> = table.to_vec();
        chars.sort();
        chars.dedup();
        assert_eq!(chars.len(), 256);
        assert_eq!(table[b'A' as usize], 'A');
        assert_eq!(table[b' ' as usize], 'Ġ');
        assert_eq!(table[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let t = toy();
        let ids = t.encode(" the abc").unwrap().ids;
        let toks: Vec<&str> = ids.iter().map(|&i| t.token_str(i).unwrap()).collect();
        assert_eq!(toks, vec!["Ġthe", "Ġ", "abc"]);
    }

    #[test]
    fn empty_input_is_empty() {
        let t = toy();
        assert!(t.encode("").unwrap().is_empty());
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let t = toy();
        let err = t.decode(&[t.vocab_size() as u32]).unwrap_err();
        assert!(matches!(err, Error::InvalidToken { .. }));
    }

    #[test]
    fn pretokenizer_keeps_trailing_whitespace_split() {
        let t = toy();
        assert_eq!(t.pretokenize("a  b").unwrap(), vec!["a", " ", " b"]);
        assert_eq!(t.pretokenize("I'm ok  ").unwrap(), vec!["I", "'m", " ok", "  "]);
        assert_eq!(t.pretokenize("x (SQ").unwrap(), vec!["x", " (", "SQ"]);
    }

    #[test]
    fn round_trips_arbitrary_bytes_through_byte_symbols() {
        let t = toy();
        let s = "tab\there, ünïcödé 🚀 12 34";
        let seq = t.encode(s).unwrap();
        assert_eq!(t.decode(&seq.ids).unwrap(), s);
    }

    #[test]
    fn rejects_non_permutation_vocab() {
        let err = Tokenizer::from_strs(r#"{"a":0,"b":2}"#, "").unwrap_err();
        assert!(matches!(err, Error::Tokenizer(_)));
    }
}
