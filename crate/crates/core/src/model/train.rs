//! From-scratch training: cross-entropy plus a penalty pulling the batch
//! mean of the soft retention surrogate toward the configured skim factor.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backward::Seeds;
use super::{argmax, remaining_token_ratio, ModelConfig, ModelError, SkimTransformer, TraceDetail};
use crate::math;
use crate::model::ops::softmax_in_place;
use crate::tokenizer::{TokenizeError, Tokenizer};
use crate::Sample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// λ: weight of |batch-mean soft retention − skim_factor|.
    pub skim_penalty_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            skim_penalty_weight: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_cross_entropy: f64,
    pub mean_skim_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub val_accuracy: f64,
    /// Mean remaining-token ratio over the validation set.
    pub val_arr: f64,
}

/// Trains a fresh model on `corpus` and reports validation accuracy and the
/// validation average remaining ratio.
pub fn train(
    corpus: &[Sample],
    validation: &[Sample],
    model_cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<(SkimTransformer, TrainReport), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for s in corpus.iter().chain(validation) {
        if s.label >= model_cfg.num_classes {
            return Err(TrainError::LabelOutOfRange {
                label: s.label,
                num_classes: model_cfg.num_classes,
            });
        }
    }
    let mut model = SkimTransformer::init(model_cfg, tokenizer.vocab().size())?;
    let tokenized: Vec<_> = corpus
        .iter()
        .map(|s| tokenizer.tokenize(&s.text).map(|t| (t, s.label)))
        .collect::<Result<_, _>>()?;

    let mut opt = Adam::new(model.params.len(), cfg.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..tokenized.len()).collect();
    let mut grads = vec![0.0; model.params.len()];
    let r = model_cfg.skim_factor;
    let lambda = cfg.skim_penalty_weight;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut pen_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len() as f64;
            let mut caches = Vec::with_capacity(chunk.len());
            let mut softs = Vec::with_capacity(chunk.len());
            let mut ce = 0.0;
            for &s in chunk {
                let (tokens, label) = &tokenized[s];
                let cache = model.run_forward(model.embed(&tokens.ids), tokens.ids.clone());
                let mut probs = cache.logits.clone();
                softmax_in_place(&mut probs);
                ce -= math::ln(probs[*label].max(1e-300));
                softs.push(cache.soft_efficiency(model_cfg.num_layers));
                caches.push((cache, *label, probs));
            }
            ce /= b;
            let mean_soft = softs.iter().sum::<f64>() / b;
            let penalty = lambda * (mean_soft - r).abs();
            let loss = ce + penalty;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: batch_idx, loss });
            }
            loss_sum += loss;
            ce_sum += ce;
            pen_sum += penalty;
            batches += 1;

            grads.iter_mut().for_each(|g| *g = 0.0);
            let d_soft = lambda * sign(mean_soft - r) / b;
            for (cache, label, probs) in &caches {
                let mut d_logits = probs.clone();
                d_logits[*label] -= 1.0;
                d_logits.iter_mut().for_each(|d| *d /= b);
                model.backward(
                    cache,
                    Seeds { d_logits: Some(&d_logits), d_soft },
                    Some(&mut grads),
                    false,
                );
            }
            opt.step(&mut model.params, &grads);
        }
        epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            mean_cross_entropy: ce_sum / batches as f64,
            mean_skim_penalty: pen_sum / batches as f64,
        });
    }

    let (val_accuracy, val_arr) = evaluate(&model, tokenizer, validation)?;
    Ok((model, TrainReport { epochs, val_accuracy, val_arr }))
}

/// Accuracy and mean remaining-token ratio over a labeled set.
pub fn evaluate(
    model: &SkimTransformer,
    tokenizer: &Tokenizer,
    samples: &[Sample],
) -> Result<(f64, f64), TrainError> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0usize;
    let mut ratio_sum = 0.0;
    for s in samples {
        let tokens = tokenizer.tokenize(&s.text)?;
        let trace = model.forward(&tokens, TraceDetail::Standard)?;
        if argmax(&trace.logits) == s.label {
            correct += 1;
        }
        ratio_sum += remaining_token_ratio(&trace);
    }
    Ok((correct as f64 / samples.len() as f64, ratio_sum / samples.len() as f64))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.t);
        let bc2 = 1.0 - math::powi(self.beta2, self.t);
        let lr_t = self.lr * math::sqrt(bc2) / bc1;
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= lr_t * self.m[i] / (math::sqrt(self.v[i]) + self.eps);
        }
    }
}
