// SPDX-License-Identifier: MIT OR Apache-2.0

//! Part-of-speech tagging interface and a lookup-table tagger.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Universal POS tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl Pos {
    pub const ALL: [Pos; 17] = [
        Pos::Adj,
        Pos::Adp,
        Pos::Adv,
        Pos::Aux,
        Pos::Cconj,
        Pos::Det,
        Pos::Intj,
        Pos::Noun,
        Pos::Num,
        Pos::Part,
        Pos::Pron,
        Pos::Propn,
        Pos::Punct,
        Pos::Sconj,
        Pos::Sym,
        Pos::Verb,
        Pos::X,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Adj => "ADJ",
            Pos::Adp => "ADP",
            Pos::Adv => "ADV",
            Pos::Aux => "AUX",
            Pos::Cconj => "CCONJ",
            Pos::Det => "DET",
            Pos::Intj => "INTJ",
            Pos::Noun => "NOUN",
            Pos::Num => "NUM",
            Pos::Part => "PART",
            Pos::Pron => "PRON",
            Pos::Propn => "PROPN",
            Pos::Punct => "PUNCT",
            Pos::Sconj => "SCONJ",
            Pos::Sym => "SYM",
            Pos::Verb => "VERB",
            Pos::X => "X",
        }
    }

    /// Heads a noun phrase.
    pub fn is_nominal(self) -> bool {
        matches!(self, Pos::Noun | Pos::Propn)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Pos::ALL
            .into_iter()
            .find(|p| p.as_str() == upper)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown POS tag {s:?}")))
    }
}

/// A word with its byte span in the tagged text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedWord {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub pos: Pos,
}

pub trait PosTagger {
    fn tag(&self, text: &str) -> Vec<TaggedWord>;
}

/// Tags each word by case-insensitive table lookup.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    entries: HashMap<String, Pos>,
    fallback: Pos,
    splitter: Regex,
}

impl LexiconTagger {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Pos)>,
        S: AsRef<str>,
    {
        Self {
            entries: entries
                .into_iter()
                .map(|(w, p)| (w.as_ref().to_lowercase(), p))
                .collect(),
            fallback: Pos::X,
            splitter: Regex::new(r"\w+|[^\w\s]").expect("static regex"),
        }
    }

    /// Tag assigned to words missing from the table (default `X`).
    pub fn with_fallback(mut self, pos: Pos) -> Self {
        self.fallback = pos;
        self
    }

    /// Parses `token<TAB>POS` lines; blank lines and `#` comments are skipped.
    pub fn from_tsv(source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in source.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| Error::Dataset {
                path: "<lexicon>".into(),
                line: n + 1,
                message: "expected token<TAB>POS".into(),
            })?;
            let pos = tag.parse().map_err(|e: Error| Error::Dataset {
                path: "<lexicon>".into(),
                line: n + 1,
                message: e.to_string(),
            })?;
            entries.push((word.to_string(), pos));
        }
        Ok(Self::new(entries))
    }

    pub fn from_tsv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_tsv(&text).map_err(|e| match e {
            Error::Dataset { line, message, .. } => Error::Dataset {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Tagger covering the standard toy vocabulary.
    pub fn standard_toy() -> Self {
        Self::new(crate::model::toy::standard_lexicon())
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, text: &str) -> Vec<TaggedWord> {
        self.splitter
            .find_iter(text)
            .map(|m| {
                let word = m.as_str();
                let pos = self
                    .entries
                    .get(&word.to_lowercase())
                    .copied()
                    .unwrap_or_else(|| {
                        if word.chars().all(|c| !c.is_alphanumeric()) {
                            Pos::Punct
                        } else if word.chars().all(|c| c.is_ascii_digit()) {
                            Pos::Num
                        } else {
                            self.fallback
                        }
                    });
                TaggedWord {
                    text: word.to_string(),
                    start: m.start(),
                    end: m.end(),
                    pos,
                }
            })
            .collect()
    }
}
