// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use approx::assert_abs_diff_eq;
use knowprobe::alignment::AlignmentConfig;
use knowprobe::dataset::generate_synthetic_fixture;
use knowprobe::model::toy::{standard_lexicon, ToyTable};
use knowprobe::model::{AttentionConfig, EmbeddingSequence, TokenizedPair};
use knowprobe::probe::{familiarity, kl_divergence, perturb, pos_mask, LogBase};
use knowprobe::tagger::{LexiconTagger, Pos};
use knowprobe::{Error, LanguageModel, ProbeConfig, ReasoningLabel, ToyLm, Workflow};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Fixture {
    lm: ToyLm,
    tagger: LexiconTagger,
    attention: AttentionConfig,
    alignment: AlignmentConfig,
}

impl Fixture {
    fn new() -> Self {
        Self {
            lm: ToyLm::standard(),
            tagger: LexiconTagger::standard_toy(),
            attention: AttentionConfig::default(),
            alignment: AlignmentConfig::default(),
        }
    }

    fn workflow<'a>(&'a self, probe: &'a ProbeConfig) -> Workflow<'a, ToyLm, LexiconTagger> {
        Workflow {
            model: &self.lm,
            tagger: &self.tagger,
            probe,
            attention: &self.attention,
            alignment: &self.alignment,
        }
    }
}

fn probe_with(seeds: Vec<u64>, sigma_prime: f64) -> ProbeConfig {
    ProbeConfig {
        seeds,
        sigma_prime,
        ..ProbeConfig::default()
    }
}

#[test]
fn familiarity_matches_hand_summation() {
    // Pr(y | x) = 0.25 under uniform attention and zero weights;
    // Pr(z | x y) = 0.1 from the mean of the x and y columns.
    let mut t = ToyTable::blank(&["x", "y", "z"]);
    for next in ["<bos>", "x", "y"] {
        t.set_weight("y", next, 2.0 * 0.3f64.ln());
    }
    t.set_weight("y", "z", 2.0 * 0.1f64.ln());
    let lm = ToyLm::new(t).unwrap();
    let seq = lm.tokenize("x y z").unwrap();

    let dist = lm.forward(seq.ids()).unwrap();
    assert_abs_diff_eq!(dist.row(0)[2], 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(dist.row(1)[3], 0.1, epsilon = 1e-12);

    let expected = -(1.0 / 3.0) * (0.0 + 1.0 * 0.25f64.ln() + 2f64.sqrt() * 0.1f64.ln()) + 1.0;
    let fam = familiarity(&seq, &lm, LogBase::Natural).unwrap();
    assert_abs_diff_eq!(fam, expected, epsilon = 1e-9);
    assert_abs_diff_eq!(fam, 2.547547142716728, epsilon = 1e-9);
}

#[test]
fn single_token_subject_has_unit_familiarity() {
    let lm = ToyLm::standard();
    let seq = lm.tokenize("zorblat").unwrap();
    assert_eq!(familiarity(&seq, &lm, LogBase::Natural).unwrap(), 1.0);
}

#[test]
fn zero_noise_leaves_embeddings_untouched() {
    let emb = EmbeddingSequence::new(Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64));
    let out = perturb(&emb, &[0, 3], 2, 0.0, 11).unwrap();
    assert_eq!(out.vectors(), emb.vectors());
}

#[test]
fn overlapping_windows_are_rejected() {
    let emb = EmbeddingSequence::new(Array2::zeros((6, 4)));
    let err = perturb(&emb, &[1, 2], 2, 0.5, 0).unwrap_err();
    assert!(matches!(err, Error::OverlappingOccurrences { .. }), "{err}");
}

#[test]
fn every_occurrence_gets_the_same_noise() {
    let emb = EmbeddingSequence::new(Array2::zeros((7, 3)));
    let out = perturb(&emb, &[0, 4], 2, 1.0, 5).unwrap();
    let v = out.vectors();
    for r in 0..2 {
        assert_eq!(v.row(r), v.row(r + 4));
    }
    assert!(v.row(2).iter().all(|&x| x == 0.0));
}

#[test]
fn zero_noise_gives_zero_score() {
    let fx = Fixture::new();
    let probe = probe_with(vec![0, 1, 2], 0.0);
    let r = fx
        .workflow(&probe)
        .knowledge_test(
            "what is the habitat of pika ?",
            "pika is found in rocky slopes .",
        )
        .unwrap();
    assert_eq!(r.mks.score, 0.0);
}

#[test]
fn mask_marks_content_words_of_the_generation() {
    let lm = ToyLm::standard();
    let tagger = LexiconTagger::standard_toy();
    let pair = TokenizedPair::from_texts(
        &lm,
        "where does otter live ?",
        "otter is found in clear rivers .",
    )
    .unwrap();
    let mask = pos_mask(&pair, &tagger, &ProbeConfig::default().pos_set);
    assert_eq!(mask, vec![true, false, true, false, true, true, false]);
}

#[test]
fn no_content_words_means_no_score() {
    let fx = Fixture::new();
    let probe = ProbeConfig {
        pos_set: [Pos::Num].into_iter().collect(),
        ..ProbeConfig::default()
    };
    let err = fx
        .workflow(&probe)
        .knowledge_test(
            "where does otter live ?",
            "otter is found in clear rivers .",
        )
        .unwrap_err();
    assert!(matches!(err, Error::NoScorableTokens));
}

/// Re-derives the score for a single-token subject with explicit loops:
/// one-hot embeddings, the same seeded noise, salience attention, softmax
/// and KL by summation.
fn naive_score(prompt: &str, text: &str, subject: &str, seed: u64, sigma_prime: f64) -> f64 {
    let lm = ToyLm::standard();
    let table = lm.table();
    let v = table.vocab.len();
    let id = |w: &str| table.vocab.iter().position(|s| s == w).unwrap();
    let words: Vec<&str> = prompt
        .split_whitespace()
        .chain(text.split_whitespace())
        .collect();
    let m = prompt.split_whitespace().count();
    let ids: Vec<usize> = words.iter().map(|w| id(w)).collect();

    let mut clean = vec![vec![0.0; v]; ids.len()];
    for (r, &t) in ids.iter().enumerate() {
        clean[r][t] = 1.0;
    }
    // single-token subject: familiarity is exactly 1
    let sigma = sigma_prime;
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..v).map(|_| normal.sample(&mut rng)).collect();
    let mut noisy = clean.clone();
    let sid = id(subject);
    for (r, &t) in ids.iter().enumerate() {
        if t == sid {
            for j in 0..v {
                noisy[r][j] += noise[j];
            }
        }
    }

    let dist = |emb: &Vec<Vec<f64>>, q: usize| -> Vec<f64> {
        let scores: Vec<f64> = (0..=q)
            .map(|k| (0..v).map(|j| emb[k][j] * table.salience[j]).sum())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut h = vec![0.0; v];
        for k in 0..=q {
            for j in 0..v {
                h[j] += w[k] / z * emb[k][j];
            }
        }
        let logits: Vec<f64> = (0..v)
            .map(|n| table.bias[n] + (0..v).map(|c| table.weights[[n, c]] * h[c]).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };

    let lexicon: HashMap<String, Pos> = standard_lexicon().into_iter().collect();
    let content = [Pos::Noun, Pos::Propn, Pos::Num, Pos::Verb, Pos::Adj];
    let mut total = 0.0;
    let mut n = 0;
    for (j, w) in text.split_whitespace().enumerate() {
        if !content.contains(&lexicon[w]) {
            continue;
        }
        let p = dist(&clean, m + j);
        let q = dist(&noisy, m + j);
        total += p
            .iter()
            .zip(&q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi.max(1e-12)).ln())
            .sum::<f64>();
        n += 1;
    }
    total / n as f64
}

#[test]
fn pipeline_score_matches_naive_recomputation() {
    let fx = Fixture::new();
    let cases = [
        (
            "what is the habitat of pika ?",
            "pika is found in rocky slopes .",
            "pika",
        ),
        (
            "where does gecko live ?",
            "gecko lives near warm deserts .",
            "gecko",
        ),
        (
            "tell me about hornoda .",
            "hornoda is found in dense forests .",
            "hornoda",
        ),
        (
            "where does lynx live ?",
            "lynx lives near windy islands .",
            "lynx",
        ),
    ];
    for (prompt, text, subject) in cases {
        for seed in [0u64, 4, 9] {
            let probe = probe_with(vec![seed], 0.1);
            let r = fx.workflow(&probe).knowledge_test(prompt, text).unwrap();
            let naive = naive_score(prompt, text, subject, seed, 0.1);
            assert_abs_diff_eq!(r.mks.score, naive, epsilon = 1e-9);
        }
    }
}

#[test]
fn known_subjects_outscore_fabricated_ones() {
    let fx = Fixture::new();
    let probe = ProbeConfig::default();
    let wf = fx.workflow(&probe);
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for ex in generate_synthetic_fixture(0) {
        let score = wf.knowledge_test(&ex.prompt, &ex.text).unwrap().mks.score;
        match ex.label {
            ReasoningLabel::Fabricated => unknown.push(score),
            _ => known.push(score),
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&mut known) > median(&mut unknown));
}

#[test]
fn kl_matches_direct_summation_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(2..20);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|x| *x /= sp);
        q.iter_mut().for_each(|x| *x /= sq);
        let mut direct = 0.0;
        for i in 0..n {
            direct += p[i] * (p[i].ln() - q[i].ln());
        }
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), direct, epsilon = 1e-9);
    }
}

fn example_strategy() -> impl Strategy<Value = usize> {
    0usize..144
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn score_is_nonnegative_mean_of_seeds(
        idx in example_strategy(),
        seeds in prop::collection::vec(any::<u64>(), 1..5),
        sigma_prime in 0.01f64..2.0,
    ) {
        let fx = Fixture::new();
        let ex = &generate_synthetic_fixture(1)[idx];
        let probe = probe_with(seeds.clone(), sigma_prime);
        let r = fx.workflow(&probe).knowledge_test(&ex.prompt, &ex.text).unwrap();
        prop_assert!(r.mks.score >= 0.0);
        prop_assert!(r.mks.per_seed.iter().all(|&s| s >= 0.0));
        prop_assert!(r.mks.familiarity >= 1.0);
        let mean = r.mks.per_seed.iter().sum::<f64>() / seeds.len() as f64;
        prop_assert!((r.mks.score - mean).abs() <= 1e-12);

        let mut reversed = seeds;
        reversed.reverse();
        let probe_rev = probe_with(reversed, sigma_prime);
        let r2 = fx.workflow(&probe_rev).knowledge_test(&ex.prompt, &ex.text).unwrap();
        prop_assert!((r.mks.score - r2.mks.score).abs() <= 1e-12);
    }
}
