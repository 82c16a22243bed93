// SPDX-License-Identifier: MIT OR Apache-2.0

use approx::assert_abs_diff_eq;
use knowprobe::model::toy::{ToyTable, UNKNOWN_SUBJECTS};
use knowprobe::model::{attention_received, token_logprobs, AttentionConfig, TokenizedPair};
use knowprobe::{LanguageModel, ToyLm};
use proptest::prelude::*;

/// Mean-pooling toy over `a b c` with a small published weight table.
fn three_token_toy() -> ToyLm {
    let mut t = ToyTable::blank(&["a", "b", "c"]);
    t.set_weight("a", "a", 1.0)
        .set_weight("a", "b", 2.0)
        .set_weight("b", "b", 1.0)
        .set_weight("b", "c", 3.0)
        .set_weight("c", "<bos>", 1.0)
        .set_weight("c", "c", 2.0);
    ToyLm::new(t).unwrap()
}

#[test]
fn mean_pool_forward_matches_hand_softmax() {
    let lm = three_token_toy();
    let ids = lm.tokenize("a b c").unwrap();
    let dist = lm.forward(ids.ids()).unwrap();
    // softmax of the running mean of weight columns, computed by hand
    let expected = [
        [
            0.082594539443535,
            0.224515235699306,
            0.610295685413623,
            0.082594539443535,
        ],
        [
            0.086117071906938,
            0.141983048223381,
            0.385949939934841,
            0.385949939934841,
        ],
        [
            0.129175569012060,
            0.129175569012060,
            0.251599653037397,
            0.490049208938483,
        ],
    ];
    for (i, row) in expected.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            assert_abs_diff_eq!(dist.row(i)[j], p, epsilon = 1e-12);
        }
    }
}

#[test]
fn embedding_path_agrees_with_token_path_on_standard_toy() {
    let lm = ToyLm::standard();
    for text in [
        "what is the habitat of pika ? pika is found in rocky slopes .",
        "tell me about zorblat . zorblat lives near cold plateaus .",
        "where does heron live ? heron is found in shallow marshes .",
    ] {
        let ids = lm.tokenize(text).unwrap();
        let native = lm.forward(ids.ids()).unwrap();
        let via = lm
            .forward_from_embeddings(&lm.embed(ids.ids()).unwrap())
            .unwrap();
        for i in 0..ids.len() {
            let tv: f64 = native
                .row(i)
                .iter()
                .zip(via.row(i).iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 1e-6, "row {i} of {text:?}: tv {tv}");
        }
    }
}

#[test]
fn certain_continuation_has_zero_logprob() {
    let mut t = ToyTable::blank(&["A", "B"]);
    t.set_weight("A", "B", 1000.0);
    let lm = ToyLm::new(t).unwrap();
    let seq = lm.tokenize("A B").unwrap();
    let lp = token_logprobs(&lm, &seq).unwrap();
    assert_eq!(lp[1], 0.0);
}

#[test]
fn quarter_probability_logprob() {
    // uniform over four symbols
    let lm = ToyLm::new(ToyTable::blank(&["w", "x", "y"])).unwrap();
    let seq = lm.tokenize("x y").unwrap();
    let lp = token_logprobs(&lm, &seq).unwrap();
    assert_abs_diff_eq!(lp[0], 0.25f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(lp[1], 0.25f64.ln(), epsilon = 1e-12);
}

#[test]
fn logprobs_follow_chain_rule() {
    let lm = ToyLm::standard();
    let seq = lm.tokenize("pika is found in rocky slopes .").unwrap();
    let lp = token_logprobs(&lm, &seq).unwrap();
    let ids = seq.ids();
    // product of conditionals from one forward call per prefix
    let mut log_joint = lm.bos_distribution().unwrap()[ids[0] as usize].ln();
    for i in 1..ids.len() {
        let dist = lm.forward(&ids[..i]).unwrap();
        log_joint += dist.row(i - 1)[ids[i] as usize].ln();
    }
    assert_abs_diff_eq!(lp.iter().sum::<f64>(), log_joint, epsilon = 1e-9);
}

#[test]
fn single_head_attention_is_column_sum_over_generated_queries() {
    let lm = ToyLm::standard();
    let pair = TokenizedPair::from_texts(
        &lm,
        "what is the habitat of pika ?",
        "pika is found in rocky slopes .",
    )
    .unwrap();
    let summary = attention_received(&lm, &pair, &AttentionConfig::default()).unwrap();
    let ids = pair.ids();
    let sal: Vec<f64> = ids
        .iter()
        .map(|&t| lm.table().salience[t as usize])
        .collect();
    let m = pair.boundary();
    for k in 0..m {
        let mut expected = 0.0;
        for q in m..pair.total() {
            let z: f64 = sal[..=q].iter().map(|s| s.exp()).sum();
            expected += sal[k].exp() / z;
        }
        assert_abs_diff_eq!(summary.received[k], expected, epsilon = 1e-12);
    }
}

#[test]
fn uniform_attention_gives_every_prompt_token_the_same_mass() {
    let lm = ToyLm::new(ToyTable::blank(&["a", "b", "c"])).unwrap();
    let pair = TokenizedPair::from_texts(&lm, "a b c", "c a").unwrap();
    let summary = attention_received(&lm, &pair, &AttentionConfig::default()).unwrap();
    let first = summary.received[0];
    for &r in &summary.received {
        assert_abs_diff_eq!(r, first, epsilon = 1e-15);
    }
    assert_abs_diff_eq!(first, 1.0 / 4.0 + 1.0 / 5.0, epsilon = 1e-15);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let lm = ToyLm::standard();
    let a = lm
        .sample_generations("what is the habitat of yak ?", 10, 1.0, 7)
        .unwrap();
    let b = lm
        .sample_generations("what is the habitat of yak ?", 10, 1.0, 7)
        .unwrap();
    assert_eq!(a, b);
    let c = lm
        .sample_generations("what is the habitat of yak ?", 10, 1.0, 8)
        .unwrap();
    assert_ne!(a, c);
}

#[test]
fn peaked_toy_yields_identical_samples() {
    let mut t = ToyTable::blank(&["go", "on", "."]);
    t.set_weight("go", "on", 200.0).set_weight("on", ".", 400.0);
    t.eos = Some(t.id("."));
    let lm = ToyLm::new(t).unwrap();
    let samples = lm.sample_generations("go", 6, 1.0, 3).unwrap();
    assert!(samples.iter().all(|s| s == "on ."), "{samples:?}");
}

#[test]
fn unknown_symbol_is_reported_with_offset() {
    let lm = ToyLm::standard();
    let err = lm.tokenize("pika lives near glaciers").unwrap_err();
    assert!(err.to_string().contains("glaciers"), "{err}");
}

fn standard_word() -> impl Strategy<Value = String> {
    let lm = ToyLm::standard();
    let words: Vec<String> = lm.table().vocab[1..].to_vec();
    prop::sample::select(words)
}

proptest! {
    #[test]
    fn offsets_are_strictly_increasing_and_slice_back(
        words in prop::collection::vec(standard_word(), 1..20),
        gaps in prop::collection::vec(1usize..3, 20),
    ) {
        let lm = ToyLm::standard();
        let mut text = String::new();
        for (w, g) in words.iter().zip(&gaps) {
            text.push_str(w);
            text.push_str(&" ".repeat(*g));
        }
        let seq = lm.tokenize(&text).unwrap();
        prop_assert_eq!(seq.len(), words.len());
        for w in seq.offsets().windows(2) {
            prop_assert!(w[0].1 <= w[1].0 && w[0].0 < w[1].0);
        }
        for (&(s, e), w) in seq.offsets().iter().zip(&words) {
            prop_assert_eq!(&text[s..e], w.as_str());
        }
        let back = lm.detokenize(seq.ids()).unwrap();
        prop_assert_eq!(back, words.join(" "));
    }

    #[test]
    fn distributions_are_normalized(
        words in prop::collection::vec(standard_word(), 1..12),
    ) {
        let lm = ToyLm::standard();
        let seq = lm.tokenize(&words.join(" ")).unwrap();
        let dist = lm.forward(seq.ids()).unwrap();
        for i in 0..seq.len() {
            let s: f64 = dist.row(i).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn fabricated_symbols_are_in_the_standard_vocabulary() {
    let lm = ToyLm::standard();
    for s in UNKNOWN_SUBJECTS {
        assert!(lm.id_of(s).is_some(), "{s}");
    }
}
