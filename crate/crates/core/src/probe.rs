// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model knowledge probe.
//!
//! The subject's token embeddings are perturbed with Gaussian noise whose
//! scale grows with the subject's position-weighted negative log-likelihood
//! ("familiarity"), and the score is the mean KL divergence between the clean
//! and perturbed next-token distributions over the content-bearing generated
//! tokens, averaged over several noise seeds. Text the model actually knows
//! something about reacts strongly; fabricated text barely moves.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    token_logprobs, EmbeddingSequence, LanguageModel, TokenSequence, TokenizedPair,
};
use crate::subject::Subject;
use crate::tagger::{Pos, PosTagger};

/// Probability floor applied to the second argument of [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogBase {
    /// Divisor converting a natural log into this base.
    pub fn scale(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Two => std::f64::consts::LN_2,
            LogBase::Ten => std::f64::consts::LN_10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_sigma_prime")]
    pub sigma_prime: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_pos_set")]
    pub pos_set: BTreeSet<Pos>,
    #[serde(default)]
    pub log_base: LogBase,
}

fn default_sigma_prime() -> f64 {
    0.1
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_pos_set() -> BTreeSet<Pos> {
    [Pos::Noun, Pos::Propn, Pos::Num, Pos::Verb, Pos::Adj]
        .into_iter()
        .collect()
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sigma_prime: default_sigma_prime(),
            seeds: default_seeds(),
            pos_set: default_pos_set(),
            log_base: LogBase::Natural,
        }
    }
}

impl ProbeConfig {
    pub fn n_seeds(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma_prime.is_finite() || self.sigma_prime < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "probe.sigma_prime must be non-negative, got {}",
                self.sigma_prime
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("probe.seeds must not be empty".into()));
        }
        if self.pos_set.is_empty() {
            return Err(Error::InvalidConfig(
                "probe.pos_set must not be empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MksResult {
    pub per_seed: Vec<f64>,
    pub score: f64,
    pub familiarity: f64,
    pub sigma: f64,
    pub n_scored_tokens: usize,
    pub seeds: Vec<u64>,
}

/// `-(1/K) * sum_i sqrt(i-1) * log Pr(t_i | t_<i) + 1`, with `i` 1-based.
pub fn familiarity<M: LanguageModel + ?Sized>(
    subject: &TokenSequence,
    model: &M,
    log_base: LogBase,
) -> Result<f64> {
    let k = subject.len();
    if k == 0 {
        return Err(Error::EmptyCollection("subject tokens"));
    }
    let logprobs = token_logprobs(model, subject)?;
    Ok(familiarity_from_logprobs(&logprobs, log_base))
}

pub(crate) fn familiarity_from_logprobs(logprobs: &[f64], log_base: LogBase) -> f64 {
    let k = logprobs.len() as f64;
    // The first term carries weight sqrt(0) = 0; skipping it also keeps an
    // impossible first token (log p = -inf) from turning the sum into NaN.
    let weighted: f64 = logprobs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, lp)| (i as f64).sqrt() * lp / log_base.scale())
        .sum();
    -weighted / k + 1.0
}

/// Adds one `K x d` draw from `N(0, sigma^2)` to every occurrence window.
pub fn perturb(
    emb: &EmbeddingSequence,
    occurrences: &[usize],
    k: usize,
    sigma: f64,
    seed: u64,
) -> Result<EmbeddingSequence> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "noise scale must be >= 0, got {sigma}"
        )));
    }
    let total = emb.len();
    let mut sorted = occurrences.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &start in &sorted {
        if start + k > total {
            return Err(Error::OccurrenceOutOfBounds {
                start,
                len: k,
                total,
            });
        }
    }
    for w in sorted.windows(2) {
        if w[1] < w[0] + k {
            return Err(Error::OverlappingOccurrences {
                first: w[0],
                second: w[1],
                len: k,
            });
        }
    }

    let mut out = emb.clone();
    if sigma == 0.0 || sorted.is_empty() {
        return Ok(out);
    }
    let d = emb.dim();
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array2::from_shape_simple_fn((k, d), || normal.sample(&mut rng));
    let vectors = out.vectors_mut();
    for &start in &sorted {
        let mut window = vectors.slice_mut(ndarray::s![start..start + k, ..]);
        window += &noise;
    }
    Ok(out)
}

/// Marks generated tokens whose span overlaps a word tagged in `pos_set`.
pub fn pos_mask<T: PosTagger + ?Sized>(
    pair: &TokenizedPair,
    tagger: &T,
    pos_set: &BTreeSet<Pos>,
) -> Vec<bool> {
    let words: Vec<_> = tagger
        .tag(pair.generation_text())
        .into_iter()
        .filter(|w| pos_set.contains(&w.pos))
        .collect();
    pair.generation()
        .offsets()
        .iter()
        .map(|&(s, e)| words.iter().any(|w| w.start < e && s < w.end))
        .collect()
}

/// `KL(p || q)` in nats; `0 log 0 = 0`, `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(kl_unchecked(p.iter().copied(), q.iter().copied()))
}

fn kl_unchecked(p: impl Iterator<Item = f64>, q: impl Iterator<Item = f64>) -> f64 {
    let kl: f64 = p
        .zip(q)
        .filter(|(pi, _)| *pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum();
    kl.max(0.0)
}

/// Knowledge score for `pair` given its identified `subject`.
pub fn model_knowledge_score<M, T>(
    pair: &TokenizedPair,
    subject: &Subject,
    model: &M,
    tagger: &T,
    config: &ProbeConfig,
) -> Result<MksResult>
where
    M: LanguageModel + ?Sized,
    T: PosTagger + ?Sized,
{
    config.validate()?;
    let mask = pos_mask(pair, tagger, &config.pos_set);
    let n_scored = mask.iter().filter(|&&m| m).count();
    if n_scored == 0 {
        return Err(Error::NoScorableTokens);
    }

    let offsets = vec![(0, 0); subject.len()];
    let subject_seq = TokenSequence::new(subject.tokens.clone(), offsets)?;
    let fam = familiarity(&subject_seq, model, config.log_base)?;
    let sigma = config.sigma_prime * fam;

    let emb = model.embed(&pair.ids())?;
    let clean = model.forward_from_embeddings(&emb)?;
    let m = pair.boundary();
    let scale = config.log_base.scale();

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let noisy = perturb(&emb, &subject.occurrences, subject.len(), sigma, seed)?;
        let perturbed = model.forward_from_embeddings(&noisy)?;
        let total: f64 = mask
            .iter()
            .enumerate()
            .filter(|(_, &keep)| keep)
            .map(|(j, _)| {
                let row = m + j;
                kl_unchecked(
                    clean.row(row).iter().copied(),
                    perturbed.row(row).iter().copied(),
                ) / scale
            })
            .sum();
        per_seed.push(total / n_scored as f64);
    }
    let score = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(MksResult {
        per_seed,
        score,
        familiarity: fam,
        sigma,
        n_scored_tokens: n_scored,
        seeds: config.seeds.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        assert_abs_diff_eq!(
            kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap(),
            0.510_825_623_765_990_7,
            epsilon = 1e-12
        );
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_floors_zero_q() {
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(
            v,
            0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_FLOOR).ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn familiarity_formula() {
        assert_eq!(familiarity_from_logprobs(&[-7.0], LogBase::Natural), 1.0);
        assert_eq!(
            familiarity_from_logprobs(&[f64::NEG_INFINITY], LogBase::Natural),
            1.0
        );
        let lp = [-0.3, 0.25f64.ln(), 0.1f64.ln()];
        let want = -(0.25f64.ln() + 2f64.sqrt() * 0.1f64.ln()) / 3.0 + 1.0;
        assert_abs_diff_eq!(
            familiarity_from_logprobs(&lp, LogBase::Natural),
            want,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_sigma_is_identity() {
        let e = EmbeddingSequence::new(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(perturb(&e, &[0, 2], 1, 0.0, 7).unwrap(), e);
    }

    #[test]
    fn shared_noise_across_windows() {
        let e = EmbeddingSequence::new(Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64));
        let p = perturb(&e, &[0, 3], 2, 0.5, 11).unwrap();
        let (a, b) = (p.vectors(), e.vectors());
        for r in 0..2 {
            for c in 0..3 {
                let diff_p = a[[r + 3, c]] - a[[r, c]];
                let diff_e = b[[r + 3, c]] - b[[r, c]];
                assert_abs_diff_eq!(diff_p, diff_e, epsilon = 1e-12);
            }
        }
        assert_eq!(a.row(2), b.row(2));
        assert_eq!(a.row(5), b.row(5));
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let e = EmbeddingSequence::new(Array2::zeros((3, 2)));
        assert!(matches!(
            perturb(&e, &[0, 1], 2, 0.1, 0),
            Err(Error::OverlappingOccurrences { .. })
        ));
        assert!(matches!(
            perturb(&e, &[2], 2, 0.1, 0),
            Err(Error::OccurrenceOutOfBounds { .. })
        ));
    }

    #[test]
    fn default_config_values() {
        let c = ProbeConfig::default();
        assert_eq!(c.sigma_prime, 0.1);
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(c.pos_set.len(), 5);
        c.validate().unwrap();
        let bad = ProbeConfig {
            seeds: vec![],
            ..ProbeConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
