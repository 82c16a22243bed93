// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSONL dataset files and the synthetic fixture for the toy backend.
//!
//! A dataset file starts with a `{"schema": 1}` header line followed by one
//! `{id, prompt, text, label, split?}` object per line.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::toy::{KNOWN_SUBJECTS, UNKNOWN_SUBJECTS};
use crate::pipeline::{LabeledExample, ReasoningLabel, Split};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: u32,
}

/// Parses dataset JSONL; `origin` names the source in error messages.
pub fn parse_dataset(source: &str, origin: &str) -> Result<Vec<LabeledExample>> {
    let err = |line: usize, message: String| Error::Dataset {
        path: origin.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut header_allowed = true;
    for (n, raw) in source.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| err(line_no, format!("malformed JSON: {e}")))?;
        if header_allowed && value.get("schema").is_some() {
            header_allowed = false;
            let header: Header = serde_json::from_value(value)
                .map_err(|e| err(line_no, format!("bad header: {e}")))?;
            if header.schema != SCHEMA_VERSION {
                return Err(err(
                    line_no,
                    format!("unsupported schema version {}", header.schema),
                ));
            }
            continue;
        }
        header_allowed = false;
        let example: LabeledExample =
            serde_json::from_value(value).map_err(|e| err(line_no, e.to_string()))?;
        if !seen.insert(example.id.clone()) {
            return Err(err(line_no, format!("duplicate id {:?}", example.id)));
        }
        out.push(example);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn dataset_to_string(examples: &[LabeledExample]) -> Result<String> {
    let mut s = serde_json::to_string(&Header {
        schema: SCHEMA_VERSION,
    })?;
    s.push('\n');
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(dataset_to_string(examples)?.as_bytes())?;
    Ok(())
}

pub fn filter_split(examples: &[LabeledExample], split: Option<Split>) -> Vec<LabeledExample> {
    examples
        .iter()
        .filter(|e| split.is_none() || e.split == split)
        .cloned()
        .collect()
}

const PROMPTS: &[&str] = &[
    "what is the habitat of {s} ?",
    "where does {s} live ?",
    "tell me about {s} .",
];

const TEXTS: &[&str] = &["{s} is found in {a} {n} .", "{s} lives near {a} {n} ."];

/// Examples per class in the fixture.
pub const FIXTURE_PER_CLASS: usize = 48;
/// Validation examples per class; the rest are test.
pub const FIXTURE_VALIDATION_PER_CLASS: usize = 16;

fn fill(template: &str, s: &str, a: &str, n: &str) -> String {
    template
        .replace("{s}", s)
        .replace("{a}", a)
        .replace("{n}", n)
}

/// Balanced three-class dataset for the standard toy model.
///
/// Aligned pairs state the subject's own associations, misaligned pairs state
/// another known subject's, and fabricated pairs ask about symbols the toy
/// model has no structure for.
pub fn generate_synthetic_fixture(seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aligned = Vec::new();
    let mut misaligned = Vec::new();
    for (si, &(s, a, n)) in KNOWN_SUBJECTS.iter().enumerate() {
        for prompt in PROMPTS {
            for text in TEXTS {
                let prompt = prompt.replace("{s}", s);
                aligned.push((prompt.clone(), fill(text, s, a, n)));
                let mut other = rng.random_range(0..KNOWN_SUBJECTS.len() - 1);
                if other >= si {
                    other += 1;
                }
                let (_, oa, on) = KNOWN_SUBJECTS[other];
                misaligned.push((prompt, fill(text, s, oa, on)));
            }
        }
    }
    let mut fabricated = Vec::new();
    for u in UNKNOWN_SUBJECTS {
        for prompt in PROMPTS {
            for text in TEXTS {
                let (_, a, n) = KNOWN_SUBJECTS[rng.random_range(0..KNOWN_SUBJECTS.len())];
                fabricated.push((prompt.replace("{s}", u), fill(text, u, a, n)));
            }
        }
    }
    fabricated.shuffle(&mut rng);
    fabricated.truncate(FIXTURE_PER_CLASS);

    let mut out = Vec::with_capacity(3 * FIXTURE_PER_CLASS);
    for (label, pairs) in [
        (ReasoningLabel::Aligned, aligned),
        (ReasoningLabel::Misaligned, misaligned),
        (ReasoningLabel::Fabricated, fabricated),
    ] {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut split = vec![Split::Test; pairs.len()];
        for &i in order.iter().take(FIXTURE_VALIDATION_PER_CLASS) {
            split[i] = Split::Validation;
        }
        for (i, (prompt, text)) in pairs.into_iter().enumerate() {
            out.push(LabeledExample {
                id: format!("{label}-{i:03}"),
                prompt,
                text,
                label,
                split: Some(split[i]),
            });
        }
    }
    out
}
