// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subject identification: noun chunks from the prompt, scored by the
//! attention their tokens receive during generation, and the positions where
//! the winning chunk recurs in the prompt/generation sequence.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AttentionSummary, TokenId, TokenizedPair};
use crate::tagger::{Pos, PosTagger, TaggedWord};

/// Relative tolerance under which two chunk masses count as tied.
const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NounChunk {
    pub text: String,
    /// Byte span in the prompt.
    pub char_span: (usize, usize),
    /// Prompt token span `[start, end)`; unset until aligned to tokens.
    pub token_span: Option<(usize, usize)>,
    pub attention_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Subject {
    pub tokens: Vec<TokenId>,
    /// Start positions in `(P, G)` of every occurrence, ascending.
    pub occurrences: Vec<usize>,
    /// Subset of `occurrences` located through character spans because the
    /// in-context token ids differ from `tokens`.
    pub realigned: Vec<usize>,
    pub source_chunk: NounChunk,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Maximal `DET? (ADJ|NUM|NOUN|PROPN)*` runs that end on a noun or proper
/// noun. Chunks come back ordered by position with attention unset.
pub fn extract_noun_chunks<T: PosTagger + ?Sized>(
    prompt: &str,
    tagger: &T,
) -> Result<Vec<NounChunk>> {
    if prompt.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let words = tagger.tag(prompt);
    let mut chunks = Vec::new();
    let mut run: Vec<&TaggedWord> = Vec::new();

    let mut close = |run: &mut Vec<&TaggedWord>| {
        while run.last().is_some_and(|w| !w.pos.is_nominal()) {
            run.pop();
        }
        if let (Some(first), Some(last)) = (run.first(), run.last()) {
            let span = (first.start, last.end);
            chunks.push(NounChunk {
                text: prompt[span.0..span.1].to_string(),
                char_span: span,
                token_span: None,
                attention_mass: 0.0,
            });
        }
        run.clear();
    };

    for w in &words {
        match w.pos {
            Pos::Det => {
                close(&mut run);
                run.push(w);
            }
            Pos::Adj | Pos::Num | Pos::Noun | Pos::Propn => run.push(w),
            _ => close(&mut run),
        }
    }
    close(&mut run);

    if chunks.is_empty() {
        return Err(Error::NoSubjectCandidate);
    }
    Ok(chunks)
}

/// Picks the chunk with the most received attention (ties go to the chunk
/// starting latest) and locates its occurrences across `(P, G)`.
pub fn select_subject(
    pair: &TokenizedPair,
    chunks: &[NounChunk],
    attention: &AttentionSummary,
) -> Result<Subject> {
    if chunks.is_empty() {
        return Err(Error::NoSubjectCandidate);
    }
    if attention.len() != pair.boundary() {
        return Err(Error::LengthMismatch {
            left: attention.len(),
            right: pair.boundary(),
        });
    }
    let mut ordered: Vec<&NounChunk> = chunks.iter().collect();
    ordered.sort_by_key(|c| c.char_span);

    let mut best: Option<NounChunk> = None;
    for chunk in ordered {
        let Some(span) = token_span(pair.prompt().offsets(), chunk.char_span) else {
            continue;
        };
        let mass: f64 = attention.received[span.0..span.1].iter().sum();
        let take = match &best {
            None => true,
            Some(b) => {
                let tol = TIE_RTOL * b.attention_mass.abs().max(mass.abs());
                mass >= b.attention_mass - tol
            }
        };
        if take {
            best = Some(NounChunk {
                token_span: Some(span),
                attention_mass: mass,
                ..chunk.clone()
            });
        }
    }
    let chunk = best.ok_or(Error::NoSubjectCandidate)?;
    let (start, end) = chunk.token_span.expect("set above");
    let tokens = pair.prompt().ids()[start..end].to_vec();
    let located = locate(pair, &tokens, &chunk.text)?;
    Ok(Subject {
        tokens,
        occurrences: located.starts,
        realigned: located.realigned,
        source_chunk: chunk,
    })
}

/// Start positions of `subject` in `(P, G)`.
///
/// Exact token-subsequence matches come first; where the text of the subject
/// appears but was tokenized differently in context, the character span is
/// mapped back to a window of the same length through the token offsets.
pub fn find_occurrences(
    pair: &TokenizedPair,
    subject: &[TokenId],
    subject_text: &str,
) -> Result<Vec<usize>> {
    locate(pair, subject, subject_text).map(|l| l.starts)
}

struct Located {
    starts: Vec<usize>,
    realigned: Vec<usize>,
}

fn locate(pair: &TokenizedPair, subject: &[TokenId], subject_text: &str) -> Result<Located> {
    let k = subject.len();
    if k == 0 {
        return Err(Error::EmptyCollection("subject tokens"));
    }
    let ids = pair.ids();
    let mut starts = exact_matches(&ids, subject);
    let mut realigned = Vec::new();

    if !subject_text.is_empty() {
        let m = pair.boundary();
        let mut windows = Vec::new();
        for (start, end) in word_occurrences(pair.prompt_text(), subject_text) {
            if let Some(w) = token_span(pair.prompt().offsets(), (start, end)) {
                windows.push(w);
            }
        }
        for (start, end) in word_occurrences(pair.generation_text(), subject_text) {
            if let Some((a, b)) = token_span(pair.generation().offsets(), (start, end)) {
                windows.push((a + m, b + m));
            }
        }
        for (a, b) in windows {
            let clashes = starts.iter().any(|&s| a < s + k && s < b);
            if b - a == k && !clashes {
                starts.push(a);
                realigned.push(a);
            }
        }
        starts.sort_unstable();
        realigned.sort_unstable();
    }

    if starts.is_empty() {
        return Err(Error::SubjectNotLocated(subject_text.to_string()));
    }
    Ok(Located { starts, realigned })
}

/// Every start index where `pattern` occurs in `seq`, overlapping allowed.
pub fn exact_matches(seq: &[TokenId], pattern: &[TokenId]) -> Vec<usize> {
    if pattern.is_empty() || pattern.len() > seq.len() {
        return Vec::new();
    }
    seq.windows(pattern.len())
        .enumerate()
        .filter(|(_, w)| *w == pattern)
        .map(|(i, _)| i)
        .collect()
}

/// Tokens whose byte span overlaps `span`, as `[first, last + 1)`.
fn token_span(offsets: &[(usize, usize)], span: (usize, usize)) -> Option<(usize, usize)> {
    let mut hit = offsets
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < span.1 && span.0 < e)
        .map(|(i, _)| i);
    let first = hit.next()?;
    let last = hit.next_back().unwrap_or(first);
    Some((first, last + 1))
}

/// Byte spans of whole-word occurrences of `needle` in `haystack`.
fn word_occurrences(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    haystack
        .match_indices(needle)
        .filter(|(i, _)| {
            let before = haystack[..*i].chars().next_back();
            let after = haystack[i + needle.len()..].chars().next();
            !is_word(before) && !is_word(after)
        })
        .map(|(i, _)| (i, i + needle.len()))
        .collect()
}
