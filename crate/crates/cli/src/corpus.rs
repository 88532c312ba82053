//! Synthetic keyword-classification corpus: each sentence is filler words
//! plus exactly one keyword that decides the label. Deterministic given the
//! spec, class-balanced by round-robin, with optional out-of-vocabulary
//! noise words injected over fillers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use noskim_core::Sample;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("infeasible spec: {keywords} keywords do not leave enough fillers in a vocabulary of {vocab_size} (need at least {min_fillers} fillers)")]
    KeywordsExceedVocab { keywords: usize, vocab_size: usize, min_fillers: usize },
    #[error("word-count range {min}..={max} is empty")]
    EmptyLengthRange { min: usize, max: usize },
    #[error("need at least one class and one keyword per class")]
    NoKeywords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub noise_rate: f64,
    /// 0 = uniform filler distribution; larger values skew toward a few
    /// very common fillers.
    pub zipf_exponent: f64,
    pub seed: u64,
}

const MIN_FILLERS: usize = 8;

/// The generated corpus plus the word pool the model vocabulary is built
/// from (keywords first, then fillers; noise words are deliberately absent).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub vocab_words: Vec<String>,
    pub keyword_sets: Vec<Vec<String>>,
}

/// Deterministic pseudo-word list: consonant-vowel syllables, two or three
/// per word, enumerated in a fixed order. 'q' and 'x' are reserved for
/// noise words so noise can never collide with the pool.
fn word_pool(count: usize) -> Vec<String> {
    const CONS: &[u8] = b"bcdfghjklmnprstvwz";
    const VOWELS: &[u8] = b"aeiou";
    let syllables: Vec<String> = CONS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| String::from_utf8(vec![c, v]).unwrap()))
        .collect();
    let mut words = Vec::with_capacity(count);
    'outer: for a in 0..syllables.len() {
        for b in 0..syllables.len() {
            let idx = a * syllables.len() + b;
            // Interleave two- and three-syllable shapes for variety.
            let w = if idx % 3 == 0 {
                format!("{}{}", syllables[a], syllables[b])
            } else {
                format!(
                    "{}{}{}",
                    syllables[a],
                    syllables[b],
                    syllables[(a + b) % syllables.len()]
                )
            };
            if !words.contains(&w) {
                words.push(w);
            }
            if words.len() == count {
                break 'outer;
            }
        }
    }
    assert_eq!(words.len(), count, "word pool exhausted");
    words
}

fn noise_word(rng: &mut ChaCha12Rng) -> String {
    let letters = b"abcdefghijklmnopqrstuvwz";
    let len = rng.random_range(5..9usize);
    let mut w = String::from("x");
    for _ in 0..len {
        w.push(letters[rng.random_range(0..letters.len())] as char);
    }
    w
}

pub fn synthesize(spec: &CorpusSpec) -> Result<SynthCorpus, CorpusError> {
    if spec.num_classes == 0 || spec.keywords_per_class == 0 {
        return Err(CorpusError::NoKeywords);
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(CorpusError::EmptyLengthRange { min: spec.min_words, max: spec.max_words });
    }
    let num_keywords = spec.num_classes * spec.keywords_per_class;
    if num_keywords + MIN_FILLERS > spec.vocab_size {
        return Err(CorpusError::KeywordsExceedVocab {
            keywords: num_keywords,
            vocab_size: spec.vocab_size,
            min_fillers: MIN_FILLERS,
        });
    }

    let pool = word_pool(spec.vocab_size);
    let keyword_sets: Vec<Vec<String>> = (0..spec.num_classes)
        .map(|c| pool[c * spec.keywords_per_class..(c + 1) * spec.keywords_per_class].to_vec())
        .collect();
    let fillers = &pool[num_keywords..];

    // Zipf-style cumulative weights over the filler pool.
    let weights: Vec<f64> = (0..fillers.len())
        .map(|i| 1.0 / ((i + 1) as f64).powf(spec.zipf_exponent))
        .collect();
    let total_w: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total_w;
        cdf.push(acc);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let draw_filler = |rng: &mut ChaCha12Rng| -> &str {
        let u: f64 = rng.random();
        let idx = cdf.partition_point(|&c| c < u).min(fillers.len() - 1);
        &fillers[idx]
    };

    let make_sample = |i: usize, rng: &mut ChaCha12Rng| -> Sample {
        let label = i % spec.num_classes;
        let len = rng.random_range(spec.min_words..=spec.max_words);
        let mut words: Vec<String> =
            (0..len).map(|_| draw_filler(rng).to_string()).collect();
        let kw = &keyword_sets[label][rng.random_range(0..spec.keywords_per_class)];
        let kw_pos = rng.random_range(0..len);
        words[kw_pos] = kw.clone();
        if spec.noise_rate > 0.0 && rng.random::<f64>() < spec.noise_rate && len > 1 {
            // Noise replaces a filler, never the keyword.
            let mut pos = rng.random_range(0..len);
            if pos == kw_pos {
                pos = (pos + 1) % len;
            }
            words[pos] = noise_word(rng);
        }
        Sample::new(words.join(" "), label)
    };

    let train: Vec<Sample> = (0..spec.train_samples).map(|i| make_sample(i, &mut rng)).collect();
    let validation: Vec<Sample> =
        (0..spec.val_samples).map(|i| make_sample(i, &mut rng)).collect();

    Ok(SynthCorpus { train, validation, vocab_words: pool, keyword_sets })
}

/// The trivial bag-of-keywords classifier: the label whose keyword set
/// intersects the sample. Used to verify label decidability.
pub fn keyword_oracle(keyword_sets: &[Vec<String>], text: &str) -> Option<usize> {
    for word in text.split_whitespace() {
        for (label, set) in keyword_sets.iter().enumerate() {
            if set.iter().any(|k| k == word) {
                return Some(label);
            }
        }
    }
    None
}
