// SPDX-License-Identifier: MIT OR Apache-2.0

//! Alignment test: does the text agree with what the model says when asked
//! the same prompt again?
//!
//! Each sentence of the text is scored against stochastic regenerations of the
//! prompt. The default scorer fits an add-one-smoothed n-gram model on the
//! samples and reports `1 - exp(mean log-prob)` of the sentence, so text the
//! samples do not support scores close to 1.

use std::collections::{BTreeSet, HashMap};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LanguageModel, TokenizedPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    #[default]
    Ngram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub scorer: ScorerKind,
    #[serde(default = "default_ngram_order")]
    pub ngram_order: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_samples() -> usize {
    10
}

fn default_temperature() -> f64 {
    1.0
}

fn default_ngram_order() -> usize {
    1
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            n_samples: default_n_samples(),
            temperature: default_temperature(),
            scorer: ScorerKind::Ngram,
            ngram_order: default_ngram_order(),
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig(
                "alignment.n_samples must be >= 1".into(),
            ));
        }
        if self.ngram_order == 0 {
            return Err(Error::InvalidConfig(
                "alignment.ngram_order must be >= 1".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        Ok(())
    }

    pub fn scorer(&self) -> Box<dyn ConsistencyScorer> {
        match self.scorer {
            ScorerKind::Ngram => Box::new(NgramScorer::new(self.ngram_order)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub per_sentence: Vec<f64>,
    pub overall: f64,
}

/// Scores one sentence against sampled passages; higher means less support.
pub trait ConsistencyScorer {
    fn score(&self, sentence: &str, samples: &[String]) -> Result<f64>;
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "inc", "ltd", "co", "no",
    "e.g", "i.e", "approx", "fig", "mt",
];

/// Byte spans of sentences. Splits after `.`, `!` or `?` (plus trailing
/// quotes/brackets) when followed by whitespace or end of text, except after
/// a known abbreviation. Whitespace between sentences belongs to neither.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = skip_ws(text, 0);
    let mut i = start;
    while i < bytes.len() {
        let c = bytes[i];
        if matches!(c, b'.' | b'!' | b'?') {
            let mut end = i + 1;
            while end < bytes.len()
                && matches!(bytes[end], b'.' | b'!' | b'?' | b'"' | b'\'' | b')' | b']')
            {
                end += 1;
            }
            let at_boundary = end == bytes.len() || (bytes[end] as char).is_ascii_whitespace();
            if at_boundary && !(c == b'.' && ends_with_abbreviation(&text[start..i])) {
                spans.push((start, end));
                start = skip_ws(text, end);
                i = start;
                continue;
            }
            i = end;
            continue;
        }
        i += 1;
    }
    let tail_end = text.trim_end().len();
    if start < tail_end {
        spans.push((start, tail_end));
    }
    spans
}

fn skip_ws(text: &str, from: usize) -> usize {
    from + text[from..].len() - text[from..].trim_start().len()
}

fn ends_with_abbreviation(before: &str) -> bool {
    let word = before
        .rsplit(|c: char| c.is_whitespace())
        .next()
        .unwrap_or("")
        .trim_start_matches(['(', '"', '\''])
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Sentences of `text`; a text without terminators is one sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let spans = sentence_spans(text);
    if spans.is_empty() {
        return vec![text.to_string()];
    }
    spans
        .into_iter()
        .map(|(s, e)| text[s..e].to_string())
        .collect()
}

/// Add-one-smoothed n-gram sample-support scorer.
#[derive(Debug, Clone)]
pub struct NgramScorer {
    order: usize,
    word: Regex,
}

impl NgramScorer {
    pub fn new(order: usize) -> Self {
        Self {
            order: order.max(1),
            word: Regex::new(r"\w+").expect("static regex"),
        }
    }

    fn words(&self, text: &str) -> Vec<String> {
        self.word
            .find_iter(text)
            .map(|m| m.as_str().to_lowercase())
            .collect()
    }

    /// `(context + word, context)` keys for every position of `words`,
    /// padded with `<s>` on the left.
    fn grams(&self, words: &[String]) -> Vec<(Vec<String>, Vec<String>)> {
        let pad = self.order - 1;
        let mut seq: Vec<String> = vec!["<s>".to_string(); pad];
        seq.extend(words.iter().cloned());
        (pad..seq.len())
            .map(|i| {
                let ctx = seq[i - pad..i].to_vec();
                let mut full = ctx.clone();
                full.push(seq[i].clone());
                (full, ctx)
            })
            .collect()
    }
}

impl ConsistencyScorer for NgramScorer {
    fn score(&self, sentence: &str, samples: &[String]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyCollection("samples"));
        }
        let target = self.words(sentence);
        if target.is_empty() {
            return Ok(0.0);
        }
        let mut vocab: BTreeSet<String> = target.iter().cloned().collect();
        let mut full_counts: HashMap<Vec<String>, f64> = HashMap::new();
        let mut ctx_counts: HashMap<Vec<String>, f64> = HashMap::new();
        for sample in samples {
            let words = self.words(sample);
            vocab.extend(words.iter().cloned());
            for (full, ctx) in self.grams(&words) {
                *full_counts.entry(full).or_default() += 1.0;
                *ctx_counts.entry(ctx).or_default() += 1.0;
            }
        }
        let v = vocab.len() as f64;
        let grams = self.grams(&target);
        let mean_logprob = grams
            .iter()
            .map(|(full, ctx)| {
                let c = full_counts.get(full).copied().unwrap_or(0.0);
                let n = ctx_counts.get(ctx).copied().unwrap_or(0.0);
                ((c + 1.0) / (n + v)).ln()
            })
            .sum::<f64>()
            / grams.len() as f64;
        Ok((1.0 - mean_logprob.exp()).clamp(0.0, 1.0))
    }
}

/// Scores `sentence` with the scorer selected by `config`.
pub fn consistency_score(
    sentence: &str,
    samples: &[String],
    config: &AlignmentConfig,
) -> Result<f64> {
    config.scorer().score(sentence, samples)
}

/// Samples `config.n_samples` regenerations of the prompt and scores each
/// sentence of the generation against them.
pub fn alignment_score<M: LanguageModel + ?Sized>(
    pair: &TokenizedPair,
    model: &M,
    config: &AlignmentConfig,
) -> Result<AlignmentScore> {
    config.validate()?;
    let samples = model.sample_generations(
        pair.prompt_text(),
        config.n_samples,
        config.temperature,
        config.seed,
    )?;
    score_against_samples(pair.generation_text(), &samples, config)
}

pub fn score_against_samples(
    text: &str,
    samples: &[String],
    config: &AlignmentConfig,
) -> Result<AlignmentScore> {
    let scorer = config.scorer();
    let per_sentence = split_sentences(text)
        .iter()
        .map(|s| scorer.score(s, samples))
        .collect::<Result<Vec<_>>>()?;
    let overall = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    Ok(AlignmentScore {
        per_sentence,
        overall,
    })
}

/// Threshold maximizing balanced accuracy of "aligned below, misaligned at or
/// above"; candidates are the pooled scores, smallest on ties.
pub fn calibrate_alignment_threshold(aligned: &[f64], misaligned: &[f64]) -> Result<f64> {
    if aligned.is_empty() {
        return Err(Error::EmptyCollection("aligned scores"));
    }
    if misaligned.is_empty() {
        return Err(Error::EmptyCollection("misaligned scores"));
    }
    let mut candidates: Vec<f64> = aligned.iter().chain(misaligned).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for theta in candidates {
        let acc = balanced_accuracy(aligned, misaligned, theta);
        if acc > best.1 {
            best = (theta, acc);
        }
    }
    Ok(best.0)
}

pub fn balanced_accuracy(aligned: &[f64], misaligned: &[f64], theta: f64) -> f64 {
    let below = aligned.iter().filter(|&&s| s < theta).count() as f64 / aligned.len() as f64;
    let above = misaligned.iter().filter(|&&s| s >= theta).count() as f64 / misaligned.len() as f64;
    0.5 * (below + above)
}
