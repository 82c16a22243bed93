// SPDX-License-Identifier: MIT OR Apache-2.0

//! Backend boundary over a causal language model.
//!
//! A backend exposes tokenization, the token embedding map, a forward pass that
//! starts from raw embedding vectors (so perturbed embeddings can be fed back
//! in), attention maps, and stochastic generation. Everything the knowledge
//! probe needs is expressed in terms of [`LanguageModel`].
//!
//! Instances are not required to be thread-safe; hold one per worker.

pub mod toy;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub use toy::ToyLm;

pub type TokenId = u32;

/// Row-sum tolerance for [`DistributionMatrix`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Token ids with the byte span each token covers in its source text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, offsets: Vec<(usize, usize)>) -> Result<Self> {
        if ids.len() != offsets.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: offsets.len(),
            });
        }
        Ok(Self { ids, offsets })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One embedding vector per token, stored row-major (`tokens x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence(Array2<f64>);

impl EmbeddingSequence {
    pub fn new(vectors: Array2<f64>) -> Self {
        Self(vectors)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn vectors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }
}

/// Next-token probability rows, one per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMatrix(Array2<f64>);

impl DistributionMatrix {
    /// Wraps `rows`, checking that each row is a probability vector.
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidConfig(format!(
                    "distribution row {i} is not normalized (sum {sum})"
                )));
            }
        }
        Ok(Self(rows))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Raw attention weights, indexed `[layer][head]`, each `query x key`.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub layers: Vec<Vec<Array2<f64>>>,
}

/// Prompt tokens followed by generated tokens, `(P, G)`.
#[derive(Debug, Clone)]
pub struct TokenizedPair {
    prompt_text: String,
    generation_text: String,
    prompt: TokenSequence,
    generation: TokenSequence,
}

impl TokenizedPair {
    pub fn new(
        prompt_text: impl Into<String>,
        generation_text: impl Into<String>,
        prompt: TokenSequence,
        generation: TokenSequence,
    ) -> Result<Self> {
        if generation.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        if prompt.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            prompt_text: prompt_text.into(),
            generation_text: generation_text.into(),
            prompt,
            generation,
        })
    }

    /// Tokenizes prompt and generation separately so the boundary is exact.
    pub fn from_texts<M: LanguageModel + ?Sized>(
        model: &M,
        prompt: &str,
        generation: &str,
    ) -> Result<Self> {
        let p = model.tokenize(prompt)?;
        let g = model.tokenize(generation)?;
        Self::new(prompt, generation, p, g)
    }

    pub fn prompt_text(&self) -> &str {
        &self.prompt_text
    }

    pub fn generation_text(&self) -> &str {
        &self.generation_text
    }

    pub fn prompt(&self) -> &TokenSequence {
        &self.prompt
    }

    pub fn generation(&self) -> &TokenSequence {
        &self.generation
    }

    /// `M`, the number of prompt tokens.
    pub fn boundary(&self) -> usize {
        self.prompt.len()
    }

    /// `M + N`.
    pub fn total(&self) -> usize {
        self.prompt.len() + self.generation.len()
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.prompt
            .ids()
            .iter()
            .chain(self.generation.ids())
            .copied()
            .collect()
    }
}

/// Which attention layers to average over. `None` means all of them.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

/// Attention mass received by each prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub received: Vec<f64>,
}

impl AttentionSummary {
    pub fn len(&self) -> usize {
        self.received.len()
    }

    pub fn is_empty(&self) -> bool {
        self.received.is_empty()
    }
}

pub trait LanguageModel {
    fn name(&self) -> &str;

    fn vocab_size(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    fn tokenize(&self, text: &str) -> Result<TokenSequence>;

    fn detokenize(&self, ids: &[TokenId]) -> Result<String>;

    fn embed(&self, ids: &[TokenId]) -> Result<EmbeddingSequence>;

    /// Runs the model on explicit embedding vectors. Must not re-lookup the
    /// embeddings of the original ids.
    fn forward_from_embeddings(&self, emb: &EmbeddingSequence) -> Result<DistributionMatrix>;

    /// Native token-input forward pass.
    fn forward(&self, ids: &[TokenId]) -> Result<DistributionMatrix> {
        let emb = self.embed(ids)?;
        self.forward_from_embeddings(&emb)
    }

    /// Next-token distribution given only the beginning-of-sequence context.
    fn bos_distribution(&self) -> Result<Vec<f64>>;

    fn attention_maps(&self, _ids: &[TokenId]) -> Result<AttentionMaps> {
        Err(Error::CapabilityUnsupported {
            backend: self.name().to_string(),
            capability: "attention maps",
        })
    }

    /// Draws `n` stochastic continuations of `prompt`. Identical seeds give
    /// identical lists.
    fn sample_generations(
        &self,
        prompt: &str,
        n: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>>;
}

/// `log Pr(t_i | t_1..t_{i-1})` for every token; the first entry is
/// conditioned on the beginning-of-sequence context.
pub fn token_logprobs<M: LanguageModel + ?Sized>(
    model: &M,
    tokens: &TokenSequence,
) -> Result<Vec<f64>> {
    let ids = tokens.ids();
    let Some(&first) = ids.first() else {
        return Err(Error::EmptyInput);
    };
    let bos = model.bos_distribution()?;
    let first_p = *bos.get(first as usize).ok_or(Error::OutOfVocabulary {
        id: first,
        vocab_size: bos.len(),
    })?;
    let mut out = Vec::with_capacity(ids.len());
    out.push(first_p.ln());
    if ids.len() > 1 {
        let dist = model.forward(&ids[..ids.len() - 1])?;
        for (i, &next) in ids[1..].iter().enumerate() {
            out.push(dist.row(i)[next as usize].ln());
        }
    }
    Ok(out)
}

/// Attention each prompt token receives from the generated-token queries:
/// summed over query positions, averaged over the selected layers and all
/// heads.
pub fn attention_received<M: LanguageModel + ?Sized>(
    model: &M,
    pair: &TokenizedPair,
    config: &AttentionConfig,
) -> Result<AttentionSummary> {
    let maps = model.attention_maps(&pair.ids())?;
    summarize_attention(&maps, pair.boundary(), pair.total(), config)
}

pub(crate) fn summarize_attention(
    maps: &AttentionMaps,
    boundary: usize,
    total: usize,
    config: &AttentionConfig,
) -> Result<AttentionSummary> {
    if boundary >= total {
        return Err(Error::EmptyGeneration);
    }
    let layer_ids: Vec<usize> = match &config.layers {
        Some(sel) => sel.clone(),
        None => (0..maps.layers.len()).collect(),
    };
    let mut received = vec![0.0; boundary];
    let mut n_maps = 0usize;
    for l in layer_ids {
        let heads = maps.layers.get(l).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "attention layer {l} requested, backend has {}",
                maps.layers.len()
            ))
        })?;
        for head in heads {
            if head.nrows() != total || head.ncols() != total {
                return Err(Error::LengthMismatch {
                    left: head.nrows(),
                    right: total,
                });
            }
            for q in boundary..total {
                for (k, acc) in received.iter_mut().enumerate() {
                    *acc += head[[q, k]];
                }
            }
            n_maps += 1;
        }
    }
    if n_maps == 0 {
        return Err(Error::InvalidConfig("no attention heads selected".into()));
    }
    received.iter_mut().for_each(|v| *v /= n_maps as f64);
    Ok(AttentionSummary { received })
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn distribution_rejects_unnormalized_rows() {
        assert!(DistributionMatrix::new(array![[0.5, 0.4]]).is_err());
        assert!(DistributionMatrix::new(array![[1.5, -0.5]]).is_err());
        assert!(DistributionMatrix::new(array![[0.5, 0.5], [0.0, 1.0]]).is_ok());
    }

    #[test]
    fn summary_averages_layers_and_heads() {
        let a = array![[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5]];
        let b = array![[1.0, 0.0, 0.0], [0.1, 0.9, 0.0], [0.6, 0.1, 0.3]];
        let maps = AttentionMaps {
            layers: vec![vec![a.clone()], vec![b.clone()]],
        };
        let s = summarize_attention(&maps, 2, 3, &AttentionConfig::default()).unwrap();
        assert_eq!(s.received.len(), 2);
        assert!((s.received[0] - 0.4).abs() < 1e-12);
        assert!((s.received[1] - 0.2).abs() < 1e-12);

        let only_second = AttentionConfig {
            layers: Some(vec![1]),
        };
        let s = summarize_attention(&maps, 2, 3, &only_second).unwrap();
        assert_eq!(s.received, vec![0.6, 0.1]);

        let bad = AttentionConfig {
            layers: Some(vec![5]),
        };
        assert!(summarize_attention(&maps, 2, 3, &bad).is_err());
    }

    #[test]
    fn pair_requires_generation() {
        let p = TokenSequence::new(vec![1], vec![(0, 1)]).unwrap();
        let g = TokenSequence::default();
        assert!(matches!(
            TokenizedPair::new("a", "", p, g),
            Err(Error::EmptyGeneration)
        ));
    }
}
