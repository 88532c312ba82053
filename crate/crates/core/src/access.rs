//! Efficiency oracles for the three evaluation scenarios.
//!
//! * White box: remaining-token ratio plus traces, gradients, and full model
//!   access.
//! * Gray box: the remaining-token ratio scalar and nothing else.
//! * Black box: no internal information; only wall time or a deterministic
//!   multiply-accumulate cost counter, normalized by an independent
//!   surrogate tokenizer's length (token-level inference time).
//!
//! The boundaries are structural: the gray/black oracle types simply have no
//! method that could return a trace, a gradient, a mask, or the vocabulary.

use alloc::boxed::Box;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    remaining_token_ratio, ForwardTrace, GradientMatrix, ModelConfig, ModelError, SkimTransformer,
    TraceDetail,
};
use crate::tokenizer::{SurrogateTokenizer, TokenSequence, TokenizeError, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessLevel {
    WhiteBox,
    GrayBox,
    BlackBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadingKind {
    Ratio,
    TokenTime,
    CountedCost,
}

/// One scalar efficiency-loss observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReading {
    pub value: f64,
    pub kind: ReadingKind,
    #[serde(rename = "queries")]
    pub queries_consumed: u64,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid timing config: {0}")]
    InvalidTiming(&'static str),
    #[error(
        "unstable wall-clock measurement: spread {spread_ns}ns exceeds 50% of median {median_ns}ns; \
         use the counted backend for deterministic readings"
    )]
    UnstableMeasurement { spread_ns: u64, median_ns: u64 },
    #[error("correlation needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("correlation undefined: {0} readings have zero variance")]
    DegenerateVariance(&'static str),
}

/// Wall-clock measurement protocol: warmup runs, then an odd number of
/// measured runs aggregated by median.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub warmup_runs: usize,
    pub measured_runs: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { warmup_runs: 2, measured_runs: 5 }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.warmup_runs < 1 {
            return Err(OracleError::InvalidTiming("warmup_runs must be at least 1"));
        }
        if self.measured_runs < 3 {
            return Err(OracleError::InvalidTiming("measured_runs must be at least 3"));
        }
        if self.measured_runs % 2 == 0 {
            return Err(OracleError::InvalidTiming("measured_runs must be odd (median)"));
        }
        Ok(())
    }
}

/// Deterministic multiply-accumulate proxy for inference cost: every layer
/// charges a fixed per-token cost for each retained token plus a fixed
/// per-layer overhead, so the total is affine in the retained token-layer
/// slots Σ_l sum(M_l).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostCounter {
    macs: u64,
}

impl CostCounter {
    pub const LAYER_OVERHEAD_MACS: u64 = 64;

    /// Per retained token per layer: Q/K/V/O projections, the two FFN
    /// matrices, the gate perceptron, and the two norms.
    pub fn per_token_layer_macs(cfg: &ModelConfig) -> u64 {
        let m = cfg.embed_dim as u64;
        let ffn = cfg.ffn_dim as u64;
        let gh = cfg.gate_hidden_dim as u64;
        4 * m * m + 2 * m * ffn + gh * m + gh + 2 * m
    }

    pub fn head_macs(cfg: &ModelConfig) -> u64 {
        let m = cfg.embed_dim as u64;
        cfg.num_classes as u64 * m + m
    }

    pub fn from_trace(cfg: &ModelConfig, trace: &ForwardTrace) -> Self {
        let macs = trace.retained_slots() * Self::per_token_layer_macs(cfg)
            + cfg.num_layers as u64 * Self::LAYER_OVERHEAD_MACS
            + Self::head_macs(cfg);
        Self { macs }
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }
}

/// Scalar efficiency information, the one thing every scenario can observe.
pub trait EfficiencyOracle {
    fn efficiency(&mut self, text: &str) -> Result<EfficiencyReading, OracleError>;
    /// Total model forwards performed through this oracle so far.
    fn queries_used(&self) -> u64;
    fn access_level(&self) -> AccessLevel;
}

/// Full access: efficiency readings plus traces, gradients, embeddings, and
/// the vocabulary.
pub struct WhiteBoxOracle<'a> {
    model: &'a SkimTransformer,
    tokenizer: &'a Tokenizer,
    queries: u64,
}

impl<'a> WhiteBoxOracle<'a> {
    pub fn new(model: &'a SkimTransformer, tokenizer: &'a Tokenizer) -> Self {
        Self { model, tokenizer, queries: 0 }
    }

    pub fn model(&self) -> &'a SkimTransformer {
        self.model
    }

    pub fn tokenizer(&self) -> &'a Tokenizer {
        self.tokenizer
    }

    /// Full forward trace (one query).
    pub fn trace(&mut self, text: &str) -> Result<ForwardTrace, OracleError> {
        let tokens = self.tokenizer.tokenize(text)?;
        let trace = self.model.forward(&tokens, TraceDetail::WithHiddenStates)?;
        self.queries += 1;
        Ok(trace)
    }

    /// Trace plus the gradient of the soft efficiency surrogate, from a
    /// single model pass (one query).
    pub fn gradient(
        &mut self,
        text: &str,
    ) -> Result<(TokenSequence, ForwardTrace, GradientMatrix), OracleError> {
        let tokens = self.tokenizer.tokenize(text)?;
        let (trace, grad) = self.model.forward_with_gradient(&tokens)?;
        self.queries += 1;
        Ok((tokens, trace, grad))
    }
}

impl EfficiencyOracle for WhiteBoxOracle<'_> {
    fn efficiency(&mut self, text: &str) -> Result<EfficiencyReading, OracleError> {
        let tokens = self.tokenizer.tokenize(text)?;
        let trace = self.model.forward(&tokens, TraceDetail::Standard)?;
        self.queries += 1;
        Ok(EfficiencyReading {
            value: remaining_token_ratio(&trace),
            kind: ReadingKind::Ratio,
            queries_consumed: 1,
        })
    }

    fn queries_used(&self) -> u64 {
        self.queries
    }

    fn access_level(&self) -> AccessLevel {
        AccessLevel::WhiteBox
    }
}

/// Only the efficiency acceleration scalar: no traces, no gradients, no
/// vocabulary. Those are not hidden behind a flag — the type has no way to
/// express them.
pub struct GrayBoxOracle<'a> {
    model: &'a SkimTransformer,
    tokenizer: &'a Tokenizer,
    queries: u64,
}

impl<'a> GrayBoxOracle<'a> {
    pub fn new(model: &'a SkimTransformer, tokenizer: &'a Tokenizer) -> Self {
        Self { model, tokenizer, queries: 0 }
    }
}

impl EfficiencyOracle for GrayBoxOracle<'_> {
    fn efficiency(&mut self, text: &str) -> Result<EfficiencyReading, OracleError> {
        let tokens = self.tokenizer.tokenize(text)?;
        let trace = self.model.forward(&tokens, TraceDetail::Standard)?;
        self.queries += 1;
        Ok(EfficiencyReading {
            value: remaining_token_ratio(&trace),
            kind: ReadingKind::Ratio,
            queries_consumed: 1,
        })
    }

    fn queries_used(&self) -> u64 {
        self.queries
    }

    fn access_level(&self) -> AccessLevel {
        AccessLevel::GrayBox
    }
}

enum BlackBackend<'a> {
    Counted,
    Wall { timing: TimingConfig, clock: Box<dyn FnMut() -> u64 + Send + 'a> },
}

/// Timing-only access. The reading is `Time(x)/surrogate_len(x)`: raw cost
/// (counted backend) or median wall time in nanoseconds (wall backend),
/// divided by a third-party tokenizer's unit count.
pub struct BlackBoxOracle<'a> {
    model: &'a SkimTransformer,
    tokenizer: &'a Tokenizer,
    surrogate: SurrogateTokenizer,
    backend: BlackBackend<'a>,
    queries: u64,
}

impl<'a> BlackBoxOracle<'a> {
    /// Deterministic counted-cost backend.
    pub fn counted(model: &'a SkimTransformer, tokenizer: &'a Tokenizer) -> Self {
        Self {
            model,
            tokenizer,
            surrogate: SurrogateTokenizer,
            backend: BlackBackend::Counted,
            queries: 0,
        }
    }

    /// Wall-clock backend. `clock` returns monotonic nanoseconds; callers
    /// hold the oracle exclusively (`&mut` measurement methods), which
    /// serializes timing runs.
    pub fn wall_clock(
        model: &'a SkimTransformer,
        tokenizer: &'a Tokenizer,
        timing: TimingConfig,
        clock: impl FnMut() -> u64 + Send + 'a,
    ) -> Result<Self, OracleError> {
        timing.validate()?;
        Ok(Self {
            model,
            tokenizer,
            surrogate: SurrogateTokenizer,
            backend: BlackBackend::Wall { timing, clock: Box::new(clock) },
            queries: 0,
        })
    }

    /// Raw sequence-level reading (cost units or median nanoseconds) before
    /// the surrogate-length division, plus queries spent.
    fn raw_reading(&mut self, tokens: &TokenSequence) -> Result<(f64, ReadingKind, u64), OracleError> {
        match &mut self.backend {
            BlackBackend::Counted => {
                let trace = self.model.forward(tokens, TraceDetail::Standard)?;
                let cost = CostCounter::from_trace(self.model.config(), &trace);
                Ok((cost.macs() as f64, ReadingKind::CountedCost, 1))
            }
            BlackBackend::Wall { timing, clock } => {
                for _ in 0..timing.warmup_runs {
                    let _ = self.model.forward(tokens, TraceDetail::Standard)?;
                }
                let mut samples = Vec::with_capacity(timing.measured_runs);
                for _ in 0..timing.measured_runs {
                    let start = clock();
                    let _ = self.model.forward(tokens, TraceDetail::Standard)?;
                    samples.push(clock().saturating_sub(start));
                }
                samples.sort_unstable();
                let median = samples[samples.len() / 2];
                let spread = samples[samples.len() - 1] - samples[0];
                if median == 0 || spread * 2 > median {
                    return Err(OracleError::UnstableMeasurement {
                        spread_ns: spread,
                        median_ns: median,
                    });
                }
                Ok((
                    median as f64,
                    ReadingKind::TokenTime,
                    (timing.warmup_runs + timing.measured_runs) as u64,
                ))
            }
        }
    }
}

impl EfficiencyOracle for BlackBoxOracle<'_> {
    fn efficiency(&mut self, text: &str) -> Result<EfficiencyReading, OracleError> {
        let surrogate_units = self.surrogate.count(text)? as f64;
        let tokens = self.tokenizer.tokenize(text)?;
        let (raw, kind, spent) = self.raw_reading(&tokens)?;
        self.queries += spent;
        Ok(EfficiencyReading { value: raw / surrogate_units, kind, queries_consumed: spent })
    }

    fn queries_used(&self) -> u64 {
        self.queries
    }

    fn access_level(&self) -> AccessLevel {
        AccessLevel::BlackBox
    }
}

/// One dataset row of the side-channel linearity study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub ratio: f64,
    pub seq_reading: f64,
    pub tok_reading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Pearson r between the remaining-token ratio and the raw
    /// sequence-level reading.
    pub sequence_level_r: f64,
    /// Pearson r between the ratio and the reading divided by the surrogate
    /// token count.
    pub token_level_r: f64,
    pub rows: Vec<CorrelationRow>,
}

pub const CORRELATION_MIN_SAMPLES: usize = 30;

/// Measures every text through the black-box backend and correlates the
/// sequence-level and token-level readings against the true remaining-token
/// ratio (an owner-side diagnostic; the ratio comes from the model itself).
pub fn correlation_report(
    oracle: &mut BlackBoxOracle<'_>,
    texts: &[impl AsRef<str>],
) -> Result<CorrelationReport, OracleError> {
    if texts.len() < CORRELATION_MIN_SAMPLES {
        return Err(OracleError::TooFewSamples { min: CORRELATION_MIN_SAMPLES, got: texts.len() });
    }
    let mut rows = Vec::with_capacity(texts.len());
    for text in texts {
        let text = text.as_ref();
        let surrogate_units = oracle.surrogate.count(text)? as f64;
        let tokens = oracle.tokenizer.tokenize(text)?;
        let trace = oracle.model.forward(&tokens, TraceDetail::Standard)?;
        let ratio = remaining_token_ratio(&trace);
        let (raw, _, spent) = oracle.raw_reading(&tokens)?;
        oracle.queries += spent;
        rows.push(CorrelationRow { ratio, seq_reading: raw, tok_reading: raw / surrogate_units });
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let seqs: Vec<f64> = rows.iter().map(|r| r.seq_reading).collect();
    let toks: Vec<f64> = rows.iter().map(|r| r.tok_reading).collect();
    let sequence_level_r =
        pearson(&ratios, &seqs).ok_or(OracleError::DegenerateVariance("sequence-level"))?;
    let token_level_r =
        pearson(&ratios, &toks).ok_or(OracleError::DegenerateVariance("token-level"))?;
    Ok(CorrelationReport { sequence_level_r, token_level_r, rows })
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / crate::math::sqrt(sxx * syy))
}
