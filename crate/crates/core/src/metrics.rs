//! Dataset-level efficiency metrics and stealthiness reporting.
//!
//! * ARR — the layer- and dataset-averaged remaining-token ratio. Lower
//!   means a faster model; attacks push it up.
//! * CRR — the integral over [0,1] of the per-sample RTR distribution
//!   function. Higher means faster; satisfies CRR ≈ 1 − mean(RTR), which is
//!   tested as the consistency law.
//! * similarity — cosine of mean-pooled frozen input embeddings, the
//!   self-contained stand-in for a sentence-embedding stealthiness score.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{cosine, sqrt};
use crate::model::{remaining_token_ratio, ForwardTrace, ModelError, SkimTransformer, TraceDetail};
use crate::tokenizer::{TokenizeError, Tokenizer};

pub const DEFAULT_CRR_BINS: usize = 1000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("traces have mixed layer counts: {0} vs {1}")]
    MixedLayerCounts(usize, usize),
    #[error("crr needs at least one bin")]
    ZeroBins,
    #[error("no content tokens to pool")]
    NoContentTokens,
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Efficiency profile of one dataset: per-sample ratios, the per-layer mean
/// retention curve, and the two scalar metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEfficiency {
    pub per_sample_rtr: Vec<f64>,
    pub layer_retention: Vec<f64>,
    pub arr: f64,
    pub crr: f64,
}

/// Stealthiness/utility record for one (original, adversarial) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub similarity: f64,
    pub label_preserved: bool,
    pub rtr_before: f64,
    pub rtr_after: f64,
    pub queries: u64,
    pub wall_time: f64,
}

/// Average remaining ratio over a dataset of traces:
/// (1/L) Σ_l (1/|D|) Σ_i sum(M_l^i)/len(M_l^i). All traces must share L.
pub fn arr(traces: &[ForwardTrace]) -> Result<f64, MetricsError> {
    Ok(layer_retention(traces)?.iter().sum::<f64>() / traces[0].num_layers() as f64)
}

/// Mean retained fraction per layer across the dataset.
pub fn layer_retention(traces: &[ForwardTrace]) -> Result<Vec<f64>, MetricsError> {
    let first = traces.first().ok_or(MetricsError::EmptyDataset)?;
    let layers = first.num_layers();
    let mut sums = alloc::vec![0.0; layers];
    for t in traces {
        if t.num_layers() != layers {
            return Err(MetricsError::MixedLayerCounts(layers, t.num_layers()));
        }
        let n = t.seq_len() as f64;
        for (l, masks) in t.hard_masks.iter().enumerate() {
            sums[l] += masks.iter().filter(|&&b| b).count() as f64 / n;
        }
    }
    for s in &mut sums {
        *s /= traces.len() as f64;
    }
    Ok(sums)
}

/// Cumulative remaining ratio: midpoint-rule integral over [0,1] of
/// p(x) = (1/|D|) Σ_i 1{RTR_i ≤ x}.
pub fn crr(per_sample_rtr: &[f64], bins: usize) -> Result<f64, MetricsError> {
    if per_sample_rtr.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    if bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let d = per_sample_rtr.len() as f64;
    let mut integral = 0.0;
    for k in 0..bins {
        let x = (k as f64 + 0.5) / bins as f64;
        let p = per_sample_rtr.iter().filter(|&&r| r <= x).count() as f64 / d;
        integral += p;
    }
    Ok(integral / bins as f64)
}

/// Full efficiency profile from traces.
pub fn dataset_efficiency(traces: &[ForwardTrace], bins: usize) -> Result<DatasetEfficiency, MetricsError> {
    let per_sample_rtr: Vec<f64> = traces.iter().map(remaining_token_ratio).collect();
    Ok(DatasetEfficiency {
        layer_retention: layer_retention(traces)?,
        arr: arr(traces)?,
        crr: crr(&per_sample_rtr, bins)?,
        per_sample_rtr,
    })
}

/// Cosine similarity of the mean-pooled frozen input embeddings of the
/// content tokens (CLS excluded; out-of-vocabulary words pool the fixed UNK
/// row). Symmetric, 1.0 for identical texts.
pub fn similarity(
    model: &SkimTransformer,
    tokenizer: &Tokenizer,
    a: &str,
    b: &str,
) -> Result<f64, MetricsError> {
    let pa = pooled_embedding(model, tokenizer, a)?;
    let pb = pooled_embedding(model, tokenizer, b)?;
    Ok(cosine(&pa, &pb))
}

fn pooled_embedding(
    model: &SkimTransformer,
    tokenizer: &Tokenizer,
    text: &str,
) -> Result<Vec<f64>, MetricsError> {
    let tokens = tokenizer.tokenize(text)?;
    let (table, dim) = model.embedding_table();
    let mut pooled = alloc::vec![0.0; dim];
    let mut count = 0usize;
    for (i, &id) in tokens.ids.iter().enumerate() {
        if tokens.word_spans[i].is_none() {
            continue; // CLS
        }
        let row = &table[id as usize * dim..(id as usize + 1) * dim];
        for (p, r) in pooled.iter_mut().zip(row) {
            *p += r;
        }
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::NoContentTokens);
    }
    for p in &mut pooled {
        *p /= count as f64;
    }
    Ok(pooled)
}

/// Input to pair evaluation: the attack texts plus ground truth and
/// accounting carried over from the attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub original: String,
    pub adversarial: String,
    pub true_label: usize,
    pub queries: u64,
    pub wall_time: f64,
}

/// Before/after efficiency, classification accuracy against ground truth,
/// and per-pair stealthiness reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub before: DatasetEfficiency,
    pub after: DatasetEfficiency,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub mean_similarity: f64,
    pub mean_queries: f64,
    pub mean_wall_time: f64,
    pub pairs: Vec<PairReport>,
}

pub fn evaluate_pairs(
    model: &SkimTransformer,
    tokenizer: &Tokenizer,
    pairs: &[PairInput],
    bins: usize,
) -> Result<PairEvaluation, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut before_traces = Vec::with_capacity(pairs.len());
    let mut after_traces = Vec::with_capacity(pairs.len());
    let mut reports = Vec::with_capacity(pairs.len());
    let mut correct_before = 0usize;
    let mut correct_after = 0usize;
    let mut sim_sum = 0.0;
    let mut query_sum = 0.0;
    let mut wall_sum = 0.0;
    for pair in pairs {
        let tok_before = tokenizer.tokenize(&pair.original)?;
        let tok_after = tokenizer.tokenize(&pair.adversarial)?;
        let trace_before = model.forward(&tok_before, TraceDetail::Standard)?;
        let trace_after = model.forward(&tok_after, TraceDetail::Standard)?;
        let label_before = model.predict(&tok_before)?;
        let label_after = model.predict(&tok_after)?;
        if label_before == pair.true_label {
            correct_before += 1;
        }
        if label_after == pair.true_label {
            correct_after += 1;
        }
        let sim = similarity(model, tokenizer, &pair.original, &pair.adversarial)?;
        sim_sum += sim;
        query_sum += pair.queries as f64;
        wall_sum += pair.wall_time;
        reports.push(PairReport {
            similarity: sim,
            label_preserved: label_before == label_after,
            rtr_before: remaining_token_ratio(&trace_before),
            rtr_after: remaining_token_ratio(&trace_after),
            queries: pair.queries,
            wall_time: pair.wall_time,
        });
        before_traces.push(trace_before);
        after_traces.push(trace_after);
    }
    let n = pairs.len() as f64;
    Ok(PairEvaluation {
        before: dataset_efficiency(&before_traces, bins)?,
        after: dataset_efficiency(&after_traces, bins)?,
        accuracy_before: correct_before as f64 / n,
        accuracy_after: correct_after as f64 / n,
        mean_similarity: sim_sum / n,
        mean_queries: query_sum / n,
        mean_wall_time: wall_sum / n,
        pairs: reports,
    })
}

/// Sample standard deviation helper for report summaries.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    sqrt(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
}
