//! Property-based invariants across tokenizer, model, and metrics.

use noskim_core::metrics::crr;
use noskim_core::model::{
    efficiency_loss_soft, remaining_token_ratio, ModelConfig, SkimTransformer, TraceDetail,
};
use noskim_core::tokenizer::{surrogate_len, Tokenizer, Vocab};
use proptest::prelude::*;

fn word_strategy() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn sentence_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word_strategy(), 1..10)
}

fn test_model(seed: u64, gate_bias: f64, vocab_size: usize) -> SkimTransformer {
    let cfg = ModelConfig {
        num_layers: 3,
        embed_dim: 16,
        num_heads: 2,
        ffn_dim: 24,
        max_seq_len: 16,
        num_classes: 2,
        skim_factor: 0.5,
        gate_hidden_dim: 8,
        seed,
    };
    let mut model = SkimTransformer::init(&cfg, vocab_size).unwrap();
    model.set_gate_output_bias(gate_bias);
    model
}

proptest! {
    #[test]
    fn tokenizer_is_deterministic(words in sentence_strategy()) {
        let vocab = Vocab::build_from_texts(words.iter().map(String::as_str), 64);
        let tok = Tokenizer::new(vocab, 16);
        let text = words.join(" ");
        prop_assert_eq!(tok.tokenize(&text).unwrap(), tok.tokenize(&text).unwrap());
    }

    #[test]
    fn replacing_one_word_only_changes_its_tokens(
        words in prop::collection::vec(word_strategy(), 2..8),
        replacement in word_strategy(),
        idx in 0usize..8,
    ) {
        let idx = idx % words.len();
        let vocab = Vocab::build_from_texts(words.iter().map(String::as_str), 64);
        let tok = Tokenizer::new(vocab, 32);
        let before = tok.tokenize(&words.join(" ")).unwrap();
        let mut mutated = words.clone();
        mutated[idx] = replacement;
        let after = tok.tokenize(&mutated.join(" ")).unwrap();
        // Same word count per word index ⇒ positions comparable. Words here
        // are punctuation-free, one token each.
        prop_assert_eq!(before.len(), after.len());
        for t in 0..before.len() {
            if before.word_spans[t] != Some(idx) {
                prop_assert_eq!(before.ids[t], after.ids[t]);
                prop_assert_eq!(before.word_spans[t], after.word_spans[t]);
            }
        }
    }

    #[test]
    fn surrogate_len_stable_under_alnum_insert(
        words in prop::collection::vec(word_strategy(), 1..8),
        widx in 0usize..8,
        pos_seed in 0usize..32,
        ch in prop::sample::select("abcdefghijklmnopqrstuvwxyz0123456789".chars().collect::<Vec<_>>()),
    ) {
        let widx = widx % words.len();
        let text = words.join(" ");
        let before = surrogate_len(&text).unwrap();
        let mut mutated = words.clone();
        let chars: Vec<char> = mutated[widx].chars().collect();
        let pos = pos_seed % (chars.len() + 1);
        let mut w = String::new();
        w.extend(&chars[..pos]);
        w.push(ch);
        w.extend(&chars[pos..]);
        mutated[widx] = w;
        prop_assert_eq!(surrogate_len(&mutated.join(" ")).unwrap(), before);
    }

    #[test]
    fn forward_invariants_hold_for_random_models(
        seed in 0u64..500,
        gate_bias in -1.5f64..1.5,
        content in prop::collection::vec(3u32..20, 1..12),
    ) {
        let model = test_model(seed, gate_bias, 20);
        let mut ids = vec![2u32];
        ids.extend(&content);
        let spans = std::iter::once(None).chain((0..content.len()).map(Some)).collect();
        let tokens = noskim_core::tokenizer::TokenSequence { ids, word_spans: spans, truncated: false };
        let trace = model.forward(&tokens, TraceDetail::Standard).unwrap();
        let n = trace.seq_len();
        for l in 0..trace.num_layers() {
            prop_assert!(trace.hard_masks[l][0], "CLS dropped at layer {}", l);
            for i in 0..n {
                let prev = if l == 0 { true } else { trace.hard_masks[l - 1][i] };
                prop_assert!(!trace.hard_masks[l][i] || prev, "re-admission at {},{}", l, i);
                prop_assert!(trace.soft_probs[l][i] > 0.0 && trace.soft_probs[l][i] < 1.0);
            }
        }
        let ratio = remaining_token_ratio(&trace);
        prop_assert!(ratio >= 1.0 / n as f64 - 1e-12 && ratio <= 1.0 + 1e-12);
        let soft = efficiency_loss_soft(&trace);
        prop_assert!(soft > 0.0 && soft < 1.0);
        // Determinism, bitwise.
        let again = model.forward(&tokens, TraceDetail::Standard).unwrap();
        prop_assert_eq!(trace, again);
    }

    #[test]
    fn crr_identity_and_monotonicity(
        rtrs in prop::collection::vec(0.0f64..=1.0, 1..40),
        bump in 0usize..40,
    ) {
        let bins = 1000;
        let c = crr(&rtrs, bins).unwrap();
        let mean = rtrs.iter().sum::<f64>() / rtrs.len() as f64;
        prop_assert!((c + mean - 1.0).abs() <= 1.0 / (2.0 * bins as f64));
        // Raising any sample's RTR cannot raise CRR.
        let mut raised = rtrs.clone();
        let k = bump % raised.len();
        raised[k] = (raised[k] + 0.3).min(1.0);
        prop_assert!(crr(&raised, bins).unwrap() <= c + 1e-15);
    }
}
