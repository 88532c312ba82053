//! Skimming-accelerated text classification and the machinery to probe its
//! efficiency robustness.
//!
//! The crate is organized around one pipeline:
//!
//! * [`tokenizer`] — word-level vocabulary, tokenization with word alignment,
//!   and an independent surrogate tokenizer for side-channel length counts.
//! * [`model`] — a small transformer classifier with per-layer skim gates
//!   that progressively drop tokens, plus training and exact reverse-mode
//!   gradients of the soft efficiency surrogate.
//! * [`access`] — white-, gray-, and black-box efficiency oracles with
//!   enforced information boundaries (the black box sees only timing or a
//!   deterministic cost counter).
//! * [`attack`] — greedy single-word perturbation search that maximizes the
//!   remaining-token ratio under a mutation budget.
//! * [`metrics`] — dataset-level efficiency metrics (average and cumulative
//!   remaining ratio), stealthiness similarity, and pair evaluation.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, the CLI,
//! and wall-clock timing live in the companion `noskim-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod access;
pub mod attack;
pub mod metrics;
pub mod model;
pub mod tokenizer;

mod math;

use alloc::string::String;
use serde::{Deserialize, Serialize};

/// A labeled text sample, the unit of every corpus in the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    pub label: usize,
}

impl Sample {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self { text: text.into(), label }
    }
}
