//! Finite-difference validation of the embedding gradient over a population
//! of random small models and inputs.

use noskim_core::model::{ModelConfig, SkimTransformer, TraceDetail};
use noskim_core::tokenizer::{TokenSequence, CLS_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const STEP: f64 = 1e-4;
const MAX_REL_ERR: f64 = 1e-3;
/// Central differences carry O(step²) truncation error; entries below this
/// scale are compared absolutely.
const FD_NOISE_FLOOR: f64 = 1e-9;

fn random_case(rng: &mut ChaCha12Rng) -> (SkimTransformer, TokenSequence) {
    let heads = [1usize, 2][rng.random_range(0..2)];
    let m = heads * rng.random_range(2..=8usize);
    let cfg = ModelConfig {
        num_layers: rng.random_range(1..=3),
        embed_dim: m.min(16),
        num_heads: heads,
        ffn_dim: rng.random_range(4..=16),
        max_seq_len: 8,
        num_classes: 2,
        skim_factor: 0.5,
        gate_hidden_dim: rng.random_range(2..=8),
        seed: rng.random(),
    };
    let vocab_size = rng.random_range(8..=24);
    let mut model = SkimTransformer::init(&cfg, vocab_size).unwrap();
    // Mix keep-biased and drop-biased gates so the masks vary.
    let bias = rng.random_range(-1.2..1.2);
    model.set_gate_output_bias(bias);
    let n_content = rng.random_range(1..8usize);
    let mut ids = vec![CLS_ID];
    for _ in 0..n_content {
        ids.push(rng.random_range(3..vocab_size as u32));
    }
    let spans = std::iter::once(None).chain((0..n_content).map(Some)).collect();
    (model, TokenSequence { ids, word_spans: spans, truncated: false })
}

/// Central differences are only valid away from hard-mask flips; skip cases
/// where any gate probability sits within 1e-3 of the 0.5 threshold.
fn near_threshold(model: &SkimTransformer, tokens: &TokenSequence) -> bool {
    let trace = model.forward(tokens, TraceDetail::Standard).unwrap();
    trace.soft_probs.iter().flatten().any(|&p| (p - 0.5).abs() < 1e-3)
}

#[test]
fn gradient_matches_finite_differences_on_100_random_models() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_106);
    let mut checked = 0usize;
    let mut attempts = 0usize;
    let mut worst: f64 = 0.0;
    while checked < 100 {
        attempts += 1;
        assert!(attempts < 1000, "too many knife-edge rejections");
        let (model, tokens) = random_case(&mut rng);
        if near_threshold(&model, &tokens) {
            continue;
        }
        let analytic = model.grad_wrt_embeddings(&tokens).unwrap();
        assert!(analytic.is_finite(), "non-finite gradient entries");
        let emb = model.embed(&tokens.ids);
        let mut probe = emb.clone();
        for i in 0..analytic.rows() {
            for j in 0..analytic.cols() {
                let idx = i * analytic.cols() + j;
                probe[idx] = emb[idx] + STEP;
                let up = model.efficiency_loss_soft_at(&probe);
                probe[idx] = emb[idx] - STEP;
                let down = model.efficiency_loss_soft_at(&probe);
                probe[idx] = emb[idx];
                let fd = (up - down) / (2.0 * STEP);
                let a = analytic.get(i, j);
                let denom = a.abs().max(fd.abs());
                let diff = (a - fd).abs();
                if denom > 0.0 && diff > FD_NOISE_FLOOR {
                    let rel = diff / denom;
                    worst = worst.max(rel);
                    assert!(
                        rel <= MAX_REL_ERR,
                        "case {checked}, entry ({i},{j}): analytic {a} vs fd {fd}, rel err {rel}"
                    );
                }
            }
        }
        checked += 1;
    }
    let elapsed = started.elapsed();
    println!("gradient check: 100 cases, worst rel err {worst:.3e}, {elapsed:?}");
    assert!(elapsed.as_secs() < 60, "gradient check exceeded one minute");
}
