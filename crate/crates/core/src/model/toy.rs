// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed-weight single-layer toy language model.
//!
//! Every symbol `k` embeds to the basis vector `u_k` (dimension = vocabulary
//! size). One attention head pools the causal prefix:
//!
//! ```text
//! a[q, k]   = softmax_{k <= q}(s . e_k)
//! h_q       = sum_k a[q, k] e_k
//! logits_q  = W h_q + b
//! ```
//!
//! With a zero salience vector `s` the head is uniform and `h_q` is the plain
//! mean of the prefix embeddings. Column `k` of `W` is the logit contribution
//! of symbol `k`, so the published table reads directly as a transition
//! structure: the distribution after the single-symbol context `[k]` is
//! `softmax(W[:, k] + b)`.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{
    softmax_in_place, AttentionMaps, DistributionMatrix, EmbeddingSequence, LanguageModel, TokenId,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::tagger::Pos;

pub const BOS: &str = "<bos>";

/// Published parameters of a toy model.
#[derive(Debug, Clone)]
pub struct ToyTable {
    /// Symbol per id. Id 0 is the beginning-of-sequence symbol.
    pub vocab: Vec<String>,
    /// Attention salience weight per embedding dimension.
    pub salience: Vec<f64>,
    /// Output bias per vocabulary entry.
    pub bias: Vec<f64>,
    /// Output projection, `vocab x vocab`.
    pub weights: Array2<f64>,
    /// Generation stops after emitting this symbol.
    pub eos: Option<TokenId>,
    pub max_new_tokens: usize,
}

impl ToyTable {
    /// A table over `symbols` (id 0 is prepended as `<bos>`) with zero
    /// weights, zero bias and uniform attention.
    pub fn blank(symbols: &[&str]) -> Self {
        let mut vocab = vec![BOS.to_string()];
        vocab.extend(symbols.iter().map(|s| s.to_string()));
        let v = vocab.len();
        Self {
            vocab,
            salience: vec![0.0; v],
            bias: vec![0.0; v],
            weights: Array2::zeros((v, v)),
            eos: None,
            max_new_tokens: 16,
        }
    }

    pub fn id(&self, symbol: &str) -> TokenId {
        self.vocab
            .iter()
            .position(|s| s == symbol)
            .unwrap_or_else(|| panic!("symbol {symbol:?} not in toy vocabulary")) as TokenId
    }

    /// Sets the logit contribution of `context` towards `next`.
    pub fn set_weight(&mut self, context: &str, next: &str, logit: f64) -> &mut Self {
        let (c, n) = (self.id(context) as usize, self.id(next) as usize);
        self.weights[[n, c]] = logit;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    table: ToyTable,
    index: HashMap<String, TokenId>,
    splitter: Regex,
}

impl ToyLm {
    pub fn new(table: ToyTable) -> Result<Self> {
        let v = table.vocab.len();
        if v == 0 || v > 64 {
            return Err(Error::InvalidConfig(format!(
                "toy vocabulary must hold 1..=64 symbols, got {v}"
            )));
        }
        if table.salience.len() != v || table.bias.len() != v || table.weights.dim() != (v, v) {
            return Err(Error::InvalidConfig("toy table shapes disagree".into()));
        }
        let mut index = HashMap::with_capacity(v);
        for (i, s) in table.vocab.iter().enumerate() {
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate toy symbol {s:?}")));
            }
        }
        Ok(Self {
            table,
            index,
            splitter: Regex::new(r"\w+|[^\w\s]").expect("static regex"),
        })
    }

    /// The model the synthetic fixture is built against.
    pub fn standard() -> Self {
        Self::new(standard_table()).expect("standard toy table is valid")
    }

    pub fn table(&self) -> &ToyTable {
        &self.table
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.table.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let v = self.table.vocab.len();
        match ids.iter().find(|&&id| id as usize >= v) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab_size: v }),
            None => Ok(()),
        }
    }

    /// Causal salience attention over rows of `scores`.
    fn attention(scores: &[f64]) -> Array2<f64> {
        let t = scores.len();
        let mut a = Array2::zeros((t, t));
        for q in 0..t {
            let mut row: Vec<f64> = scores[..=q].to_vec();
            softmax_in_place(&mut row);
            for (k, w) in row.into_iter().enumerate() {
                a[[q, k]] = w;
            }
        }
        a
    }

    fn next_logits(&self, ids: &[TokenId]) -> Vec<f64> {
        // Token path: attention and projection read straight from the table.
        let scores: Vec<f64> = ids
            .iter()
            .map(|&t| self.table.salience[t as usize])
            .collect();
        let mut weights = scores.clone();
        softmax_in_place(&mut weights);
        let mut logits = self.table.bias.clone();
        for (&t, &w) in ids.iter().zip(&weights) {
            let col = self.table.weights.column(t as usize);
            for (l, c) in logits.iter_mut().zip(col) {
                *l += w * c;
            }
        }
        logits
    }
}

impl LanguageModel for ToyLm {
    fn name(&self) -> &str {
        "toy"
    }

    fn vocab_size(&self) -> usize {
        self.table.vocab.len()
    }

    fn embedding_dim(&self) -> usize {
        self.table.vocab.len()
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        for m in self.splitter.find_iter(text) {
            let id = self.id_of(m.as_str()).ok_or_else(|| Error::UnknownSymbol {
                symbol: m.as_str().to_string(),
                offset: m.start(),
            })?;
            ids.push(id);
            offsets.push((m.start(), m.end()));
        }
        TokenSequence::new(ids, offsets)
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        self.check_ids(ids)?;
        Ok(ids
            .iter()
            .map(|&id| self.table.vocab[id as usize].as_str())
            .collect::<Vec<_>>()
            .join(" "))
    }

    fn embed(&self, ids: &[TokenId]) -> Result<EmbeddingSequence> {
        self.check_ids(ids)?;
        let d = self.embedding_dim();
        let mut e = Array2::zeros((ids.len(), d));
        for (row, &id) in ids.iter().enumerate() {
            e[[row, id as usize]] = 1.0;
        }
        Ok(EmbeddingSequence::new(e))
    }

    fn forward_from_embeddings(&self, emb: &EmbeddingSequence) -> Result<DistributionMatrix> {
        let d = self.embedding_dim();
        if emb.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: emb.dim(),
            });
        }
        let e = emb.vectors();
        let salience = Array1::from(self.table.salience.clone());
        let scores: Vec<f64> = e.dot(&salience).to_vec();
        let attn = Self::attention(&scores);
        let hidden = attn.dot(e);
        let mut logits = hidden.dot(&self.table.weights.t());
        let bias = Array1::from(self.table.bias.clone());
        logits += &bias;
        for mut row in logits.rows_mut() {
            let slice = row.as_slice_mut().expect("standard layout");
            softmax_in_place(slice);
        }
        DistributionMatrix::new(logits)
    }

    fn forward(&self, ids: &[TokenId]) -> Result<DistributionMatrix> {
        self.check_ids(ids)?;
        let v = self.vocab_size();
        let mut out = Array2::zeros((ids.len(), v));
        for q in 0..ids.len() {
            let mut logits = self.next_logits(&ids[..=q]);
            softmax_in_place(&mut logits);
            for (j, p) in logits.into_iter().enumerate() {
                out[[q, j]] = p;
            }
        }
        DistributionMatrix::new(out)
    }

    fn bos_distribution(&self) -> Result<Vec<f64>> {
        let mut logits = self.next_logits(&[0]);
        softmax_in_place(&mut logits);
        Ok(logits)
    }

    fn attention_maps(&self, ids: &[TokenId]) -> Result<AttentionMaps> {
        self.check_ids(ids)?;
        let scores: Vec<f64> = ids
            .iter()
            .map(|&t| self.table.salience[t as usize])
            .collect();
        Ok(AttentionMaps {
            layers: vec![vec![Self::attention(&scores)]],
        })
    }

    fn sample_generations(
        &self,
        prompt: &str,
        n: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>> {
        if n == 0 {
            return Err(Error::InvalidSampleCount);
        }
        if temperature.is_nan() || temperature <= 0.0 || temperature.is_infinite() {
            return Err(Error::InvalidTemperature(temperature));
        }
        let prompt_ids = self.tokenize(prompt)?.ids().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ids = prompt_ids.clone();
            let mut generated = Vec::new();
            for _ in 0..self.table.max_new_tokens {
                let mut logits = self.next_logits(&ids);
                logits.iter_mut().for_each(|l| *l /= temperature);
                logits[0] = f64::NEG_INFINITY;
                softmax_in_place(&mut logits);
                let next = sample_index(&logits, rng.random::<f64>()) as TokenId;
                ids.push(next);
                generated.push(next);
                if Some(next) == self.table.eos {
                    break;
                }
            }
            out.push(self.detokenize(&generated)?);
        }
        Ok(out)
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Known subjects of the standard toy with the adjective and noun it
/// associates with each.
pub const KNOWN_SUBJECTS: &[(&str, &str, &str)] = &[
    ("pika", "rocky", "slopes"),
    ("yak", "cold", "plateaus"),
    ("heron", "shallow", "marshes"),
    ("otter", "clear", "rivers"),
    ("ibex", "steep", "cliffs"),
    ("lynx", "dense", "forests"),
    ("gecko", "warm", "deserts"),
    ("puffin", "windy", "islands"),
];

/// Symbols the standard toy carries no structure for.
pub const UNKNOWN_SUBJECTS: &[&str] = &[
    "snakadsau",
    "hornoda",
    "cycloling",
    "zorblat",
    "quenmir",
    "vaxtrel",
    "druumel",
    "plontik",
    "feskarn",
    "wobrani",
];

/// Scaffolding words and their part-of-speech tags.
pub const FUNCTION_WORDS: &[(&str, Pos)] = &[
    ("what", Pos::Pron),
    ("is", Pos::Aux),
    ("the", Pos::Det),
    ("habitat", Pos::Noun),
    ("of", Pos::Adp),
    ("where", Pos::Adv),
    ("does", Pos::Aux),
    ("live", Pos::Verb),
    ("tell", Pos::Verb),
    ("me", Pos::Pron),
    ("about", Pos::Adp),
    ("?", Pos::Punct),
    (".", Pos::Punct),
    ("found", Pos::Verb),
    ("in", Pos::Adp),
    ("lives", Pos::Verb),
    ("near", Pos::Adp),
];

/// Generation scaffolding boosted by the output bias.
const CONNECTIVES: &[&str] = &["is", "found", "in", "lives", "near"];

const ENTITY_SALIENCE: f64 = 3.0;
const CONTENT_SALIENCE: f64 = 1.0;
const CONNECTIVE_BIAS: f64 = 2.0;
const EOS_BIAS: f64 = 1.0;
const FACT_BIAS: f64 = -3.0;
const SUBJECT_BIAS: f64 = -3.0;
const INERT_BIAS: f64 = -8.0;
const FACT_WEIGHT: f64 = 8.0;
const SELF_WEIGHT: f64 = 6.0;

fn standard_table() -> ToyTable {
    let mut symbols: Vec<&str> = FUNCTION_WORDS.iter().map(|(w, _)| *w).collect();
    for (s, adj, noun) in KNOWN_SUBJECTS {
        symbols.extend([*s, *adj, *noun]);
    }
    symbols.extend(UNKNOWN_SUBJECTS);
    let mut t = ToyTable::blank(&symbols);
    t.bias.iter_mut().for_each(|b| *b = INERT_BIAS);
    t.eos = Some(t.id("."));
    t.max_new_tokens = 10;

    for w in CONNECTIVES {
        let i = t.id(w) as usize;
        t.bias[i] = CONNECTIVE_BIAS;
    }
    let dot = t.id(".") as usize;
    t.bias[dot] = EOS_BIAS;
    let habitat = t.id("habitat") as usize;
    t.salience[habitat] = CONTENT_SALIENCE;

    for (s, adj, noun) in KNOWN_SUBJECTS {
        let si = t.id(s) as usize;
        t.salience[si] = ENTITY_SALIENCE;
        t.bias[si] = SUBJECT_BIAS;
        t.set_weight(s, s, SELF_WEIGHT);
        for fact in [adj, noun] {
            let fi = t.id(fact) as usize;
            t.salience[fi] = CONTENT_SALIENCE;
            t.bias[fi] = FACT_BIAS;
            t.set_weight(s, fact, FACT_WEIGHT);
        }
    }
    for u in UNKNOWN_SUBJECTS {
        let ui = t.id(u) as usize;
        t.salience[ui] = ENTITY_SALIENCE;
    }
    t
}

/// Word/tag pairs covering the standard toy vocabulary.
pub fn standard_lexicon() -> Vec<(String, Pos)> {
    let mut lex: Vec<(String, Pos)> = FUNCTION_WORDS
        .iter()
        .map(|(w, p)| (w.to_string(), *p))
        .collect();
    for (s, adj, noun) in KNOWN_SUBJECTS {
        lex.push((s.to_string(), Pos::Propn));
        lex.push((adj.to_string(), Pos::Adj));
        lex.push((noun.to_string(), Pos::Noun));
    }
    lex.extend(UNKNOWN_SUBJECTS.iter().map(|u| (u.to_string(), Pos::Propn)));
    lex
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> ToyLm {
        ToyLm::new(ToyTable::blank(&["a", "b", "c"])).unwrap()
    }

    #[test]
    fn one_symbol_per_word() {
        let lm = abc();
        let t = lm.tokenize("a b a").unwrap();
        assert_eq!(t.ids(), &[1, 2, 1]);
        assert_eq!(t.offsets(), &[(0, 1), (2, 3), (4, 5)]);
        assert!(matches!(lm.tokenize(""), Err(Error::EmptyInput)));
        assert!(matches!(
            lm.tokenize("a zz"),
            Err(Error::UnknownSymbol { offset: 2, .. })
        ));
    }

    #[test]
    fn embedding_is_basis_vector() {
        let lm = abc();
        let e = lm.embed(&[2]).unwrap();
        assert_eq!(e.vectors().row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            lm.embed(&[9]),
            Err(Error::OutOfVocabulary { id: 9, .. })
        ));
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let lm = abc();
        let e = EmbeddingSequence::new(Array2::zeros((2, 3)));
        assert!(matches!(
            lm.forward_from_embeddings(&e),
            Err(Error::DimensionMismatch {
                expected: 4,
                actual: 3
            })
        ));
    }

    #[test]
    fn sampling_preconditions() {
        let lm = abc();
        assert!(matches!(
            lm.sample_generations("a", 1, 0.0, 0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(matches!(
            lm.sample_generations("a", 0, 1.0, 0),
            Err(Error::InvalidSampleCount)
        ));
    }

    #[test]
    fn standard_table_fits_vocab_limit() {
        let lm = ToyLm::standard();
        assert!(lm.vocab_size() <= 64);
        assert_eq!(standard_lexicon().len(), lm.vocab_size() - 1);
    }

    #[test]
    fn sample_index_walks_cumulative_mass() {
        assert_eq!(sample_index(&[0.0, 0.3, 0.7], 0.0), 1);
        assert_eq!(sample_index(&[0.0, 0.3, 0.7], 0.31), 2);
        assert_eq!(sample_index(&[0.0, 0.3, 0.7], 0.9999999), 2);
    }
}
