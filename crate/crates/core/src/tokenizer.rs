//! Word-level tokenization with word↔token alignment, plus an independent
//! surrogate tokenizer used by the black-box side channel.
//!
//! The model tokenizer lowercases, splits on whitespace, and peels
//! surrounding punctuation off into separate tokens; out-of-vocabulary words
//! collapse to a single `UNK`. The surrogate tokenizer deliberately uses
//! different rules (every punctuation character is its own unit) and knows
//! nothing about the model vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

/// Padding id, reserved.
pub const PAD_ID: u32 = 0;
/// Unknown-word id, reserved.
pub const UNK_ID: u32 = 1;
/// Classification-token id, always prepended, reserved.
pub const CLS_ID: u32 = 2;
/// Number of reserved ids before the first real token.
pub const RESERVED_IDS: u32 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("input text is empty")]
    EmptyText,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate token in vocabulary: {0}")]
    DuplicateToken(String),
}

/// Token-string → id map. Reserved ids 0..3 (PAD, UNK, CLS) are implicit and
/// never reassigned; real tokens start at id 3 in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list (line order = id order).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = BTreeMap::new();
        for tok in tokens {
            let tok = tok.into();
            let id = RESERVED_IDS + list.len() as u32;
            if index.insert(tok.clone(), id).is_some() {
                return Err(VocabError::DuplicateToken(tok));
            }
            list.push(tok);
        }
        Ok(Self { tokens: list, index })
    }

    /// Builds a vocabulary from raw texts: tokens ranked by descending
    /// frequency (ties broken lexicographically), truncated to `max_size`
    /// non-reserved entries.
    pub fn build_from_texts<'a, I>(texts: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            for unit in split_units(text) {
                *counts.entry(unit).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
            .expect("frequency map yields unique tokens")
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        if id < RESERVED_IDS {
            return match id {
                PAD_ID => Some("<pad>"),
                UNK_ID => Some("<unk>"),
                CLS_ID => Some("<cls>"),
                _ => None,
            };
        }
        self.tokens.get((id - RESERVED_IDS) as usize).map(String::as_str)
    }

    /// Total id space including the three reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED_IDS as usize
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A tokenized input with provenance back to the whitespace-delimited words
/// of the raw text. `word_spans[i]` is the raw-word index that produced token
/// `i` (`None` for the leading CLS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub word_spans: Vec<Option<usize>>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token indices produced by raw word `word_index`.
    pub fn tokens_of_word(&self, word_index: usize) -> Vec<usize> {
        self.word_spans
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(word_index))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Model-side tokenizer: vocabulary lookups plus truncation to the model's
/// maximum sequence length.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    max_seq_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, max_seq_len: usize) -> Self {
        Self { vocab, max_seq_len }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    /// Lowercase, split on whitespace, peel surrounding punctuation into
    /// separate tokens, map OOV to UNK, prepend CLS, truncate to
    /// `max_seq_len`.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, TokenizeError> {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        ids.push(CLS_ID);
        spans.push(None);
        let mut saw_content = false;
        for (widx, word) in text.split_whitespace().enumerate() {
            saw_content = true;
            for unit in word_units(word) {
                ids.push(self.vocab.id_of(&unit).unwrap_or(UNK_ID));
                spans.push(Some(widx));
            }
        }
        if !saw_content {
            return Err(TokenizeError::EmptyText);
        }
        let truncated = ids.len() > self.max_seq_len;
        if truncated {
            ids.truncate(self.max_seq_len);
            spans.truncate(self.max_seq_len);
        }
        Ok(TokenSequence { ids, word_spans: spans, truncated })
    }
}

/// Splits one whitespace-delimited word into its token units: leading
/// punctuation characters, the lowercased core, trailing punctuation
/// characters, in textual order.
fn word_units(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    while start < end && chars[start].is_ascii_punctuation() {
        start += 1;
    }
    while end > start && chars[end - 1].is_ascii_punctuation() {
        end -= 1;
    }
    let mut units = Vec::new();
    for &c in &chars[..start] {
        units.push(c.to_string());
    }
    if start < end {
        units.push(chars[start..end].iter().collect::<String>().to_lowercase());
    }
    for &c in &chars[end..] {
        units.push(c.to_string());
    }
    units
}

fn split_units(text: &str) -> Vec<String> {
    let mut units = Vec::new();
    for word in text.split_whitespace() {
        units.extend(word_units(word));
    }
    units
}

/// Third-party-style tokenizer for the black-box length estimate: splits on
/// whitespace and treats every punctuation character as its own unit. It
/// shares no rules or state with the model tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateTokenizer;

impl SurrogateTokenizer {
    /// Number of units in `text`; never truncates.
    pub fn count(&self, text: &str) -> Result<usize, TokenizeError> {
        let mut count = 0usize;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_whitespace() {
                in_word = false;
            } else if c.is_ascii_punctuation() {
                count += 1;
                in_word = false;
            } else if !in_word {
                count += 1;
                in_word = true;
            }
        }
        if count == 0 {
            return Err(TokenizeError::EmptyText);
        }
        Ok(count)
    }
}

/// Convenience wrapper over [`SurrogateTokenizer::count`].
pub fn surrogate_len(text: &str) -> Result<usize, TokenizeError> {
    SurrogateTokenizer.count(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocab {
        Vocab::from_tokens(words.iter().copied()).unwrap()
    }

    #[test]
    fn tokenize_splits_and_aligns() {
        let tok = Tokenizer::new(vocab(&["good", "movie", "!"]), 16);
        let seq = tok.tokenize("Good movie!").unwrap();
        let good = tok.vocab().id_of("good").unwrap();
        let movie = tok.vocab().id_of("movie").unwrap();
        let bang = tok.vocab().id_of("!").unwrap();
        assert_eq!(seq.ids, [CLS_ID, good, movie, bang]);
        assert_eq!(seq.word_spans, [None, Some(0), Some(1), Some(1)]);
        assert!(!seq.truncated);
    }

    #[test]
    fn oov_maps_to_unk() {
        let tok = Tokenizer::new(vocab(&["movie"]), 16);
        let seq = tok.tokenize("goxod movie").unwrap();
        assert_eq!(seq.ids, [CLS_ID, UNK_ID, tok.vocab().id_of("movie").unwrap()]);
    }

    #[test]
    fn tokenize_is_idempotent_on_joined_vocab_words() {
        let tok = Tokenizer::new(vocab(&["a", "fine", "film"]), 16);
        let seq = tok.tokenize("a fine film").unwrap();
        let joined = "a fine film";
        assert_eq!(tok.tokenize(joined).unwrap().ids, seq.ids);
    }

    #[test]
    fn empty_text_is_an_error() {
        let tok = Tokenizer::new(vocab(&[]), 16);
        assert_eq!(tok.tokenize("   "), Err(TokenizeError::EmptyText));
        assert_eq!(surrogate_len(" \t "), Err(TokenizeError::EmptyText));
    }

    #[test]
    fn truncation_sets_flag_and_respects_limit() {
        let tok = Tokenizer::new(vocab(&["w"]), 4);
        let seq = tok.tokenize("w w w w w w").unwrap();
        assert!(seq.truncated);
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.ids[0], CLS_ID);
    }

    #[test]
    fn surrogate_counts_punctuation_separately() {
        assert_eq!(surrogate_len("a good movie").unwrap(), 3);
        assert_eq!(surrogate_len("a good, movie").unwrap(), 4);
        assert_eq!(surrogate_len("wow!!").unwrap(), 3);
    }

    #[test]
    fn surrogate_len_at_least_word_count() {
        let texts = ["one two three", "x y. z", "a,b c"];
        for t in texts {
            assert!(surrogate_len(t).unwrap() >= t.split_whitespace().count());
        }
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = vocab(&["first", "second"]);
        assert_eq!(v.id_of("first"), Some(3));
        assert_eq!(v.id_of("second"), Some(4));
        assert_eq!(v.size(), 5);
        assert_eq!(v.token_of(3), Some("first"));
    }

    #[test]
    fn duplicate_tokens_rejected() {
        assert_eq!(
            Vocab::from_tokens(["a", "a"]).unwrap_err(),
            VocabError::DuplicateToken("a".into())
        );
    }

    #[test]
    fn build_from_texts_ranks_by_frequency_then_lexicographic() {
        let v = Vocab::build_from_texts(["b a b", "c a b"], 10);
        // b:3, a:2, c:1
        assert_eq!(v.id_of("b"), Some(3));
        assert_eq!(v.id_of("a"), Some(4));
        assert_eq!(v.id_of("c"), Some(5));
    }

    #[test]
    fn word_alignment_survives_single_word_replacement() {
        let tok = Tokenizer::new(vocab(&["the", "cat", "sat", "mat", "dog"]), 32);
        let a = tok.tokenize("the cat sat").unwrap();
        let b = tok.tokenize("the dog sat").unwrap();
        for i in 0..a.len() {
            if a.word_spans[i] != Some(1) {
                assert_eq!(a.ids[i], b.ids[i]);
            }
        }
    }
}
