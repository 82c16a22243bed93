// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-stage workflow and the evaluation protocol.
//!
//! Stage 1 (knowledge test) flags text as fabricated when the knowledge score
//! falls below `tau`. Everything else goes to stage 2, where an alignment
//! score at or above `theta` means misaligned.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    alignment_score, calibrate_alignment_threshold, AlignmentConfig, AlignmentScore,
};
use crate::calibration::{ks_threshold, CalibrationResult};
use crate::error::{Error, Result};
use crate::model::{attention_received, AttentionConfig, LanguageModel, TokenizedPair};
use crate::probe::{model_knowledge_score, MksResult, ProbeConfig};
use crate::subject::{extract_noun_chunks, select_subject, Subject};
use crate::tagger::PosTagger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningLabel {
    Aligned,
    Misaligned,
    Fabricated,
}

impl ReasoningLabel {
    pub const ALL: [ReasoningLabel; 3] = [
        ReasoningLabel::Aligned,
        ReasoningLabel::Misaligned,
        ReasoningLabel::Fabricated,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningLabel::Aligned => "aligned",
            ReasoningLabel::Misaligned => "misaligned",
            ReasoningLabel::Fabricated => "fabricated",
        }
    }

    pub fn binary(self) -> BinaryLabel {
        match self {
            ReasoningLabel::Aligned => BinaryLabel::Faithful,
            _ => BinaryLabel::Hallucinated,
        }
    }
}

impl fmt::Display for ReasoningLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Faithful,
    Hallucinated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub id: String,
    pub prompt: String,
    pub text: String,
    pub label: ReasoningLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub tau: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Aligned,
    Misaligned,
    Fabricated,
    Unclassifiable,
}

impl Prediction {
    pub fn label(self) -> Option<ReasoningLabel> {
        match self {
            Prediction::Aligned => Some(ReasoningLabel::Aligned),
            Prediction::Misaligned => Some(ReasoningLabel::Misaligned),
            Prediction::Fabricated => Some(ReasoningLabel::Fabricated),
            Prediction::Unclassifiable => None,
        }
    }
}

impl From<ReasoningLabel> for Prediction {
    fn from(l: ReasoningLabel) -> Self {
        match l {
            ReasoningLabel::Aligned => Prediction::Aligned,
            ReasoningLabel::Misaligned => Prediction::Misaligned,
            ReasoningLabel::Fabricated => Prediction::Fabricated,
        }
    }
}

/// One line of the per-example results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub id: String,
    pub actual: ReasoningLabel,
    pub predicted: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mks: Option<MksResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentScore>,
    pub tau_used: f64,
    pub theta_used: f64,
}

/// Result of the knowledge test on one pair.
#[derive(Debug, Clone)]
pub struct KnowledgeReport {
    pub pair: TokenizedPair,
    pub subject: Subject,
    pub mks: MksResult,
}

/// The model, tagger and settings both stages run with.
pub struct Workflow<'a, M: ?Sized, T: ?Sized> {
    pub model: &'a M,
    pub tagger: &'a T,
    pub probe: &'a ProbeConfig,
    pub attention: &'a AttentionConfig,
    pub alignment: &'a AlignmentConfig,
}

impl<M, T> Workflow<'_, M, T>
where
    M: LanguageModel + ?Sized,
    T: PosTagger + ?Sized,
{
    /// Subject identification, perturbation and scoring.
    pub fn knowledge_test(&self, prompt: &str, text: &str) -> Result<KnowledgeReport> {
        let pair = TokenizedPair::from_texts(self.model, prompt, text)?;
        let chunks = extract_noun_chunks(prompt, self.tagger)?;
        let attention = attention_received(self.model, &pair, self.attention)?;
        let subject = select_subject(&pair, &chunks, &attention)?;
        let mks = model_knowledge_score(&pair, &subject, self.model, self.tagger, self.probe)?;
        Ok(KnowledgeReport { pair, subject, mks })
    }

    pub fn alignment_test(&self, pair: &TokenizedPair) -> Result<AlignmentScore> {
        alignment_score(pair, self.model, self.alignment)
    }

    /// Runs both stages. Stage 2 is skipped for fabricated predictions;
    /// pairs without a subject or scorable tokens come back unclassifiable.
    pub fn classify(
        &self,
        example: &LabeledExample,
        thresholds: &Thresholds,
    ) -> Result<ClassificationOutcome> {
        let mut outcome = ClassificationOutcome {
            id: example.id.clone(),
            actual: example.label,
            predicted: Prediction::Unclassifiable,
            reason: None,
            subject: None,
            mks: None,
            alignment: None,
            tau_used: thresholds.tau,
            theta_used: thresholds.theta,
        };
        let report = match self.knowledge_test(&example.prompt, &example.text) {
            Ok(r) => r,
            Err(
                e @ (Error::NoSubjectCandidate
                | Error::NoScorableTokens
                | Error::SubjectNotLocated(_)
                | Error::OverlappingOccurrences { .. }),
            ) => {
                outcome.reason = Some(e.to_string());
                return Ok(outcome);
            }
            Err(e) => return Err(e),
        };
        outcome.subject = Some(report.subject.source_chunk.text.clone());
        let score = report.mks.score;
        outcome.mks = Some(report.mks);
        if score < thresholds.tau {
            outcome.predicted = Prediction::Fabricated;
            return Ok(outcome);
        }
        let alignment = self.alignment_test(&report.pair)?;
        outcome.predicted = if alignment.overall >= thresholds.theta {
            Prediction::Misaligned
        } else {
            Prediction::Aligned
        };
        outcome.alignment = Some(alignment);
        Ok(outcome)
    }
}

/// Scores gathered on validation data and the thresholds chosen from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub knowledge: CalibrationResult,
    pub theta: f64,
    pub fabricated_scores: Vec<f64>,
    pub other_scores: Vec<f64>,
    pub aligned_alignment: Vec<f64>,
    pub misaligned_alignment: Vec<f64>,
    /// Ids the knowledge test could not score.
    pub skipped: Vec<String>,
}

impl ThresholdCalibration {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            tau: self.knowledge.tau,
            theta: self.theta,
        }
    }
}

impl<M, T> Workflow<'_, M, T>
where
    M: LanguageModel + ?Sized,
    T: PosTagger + ?Sized,
{
    /// Picks `tau` by the KS construction on knowledge scores (fabricated vs
    /// the rest) and `theta` by balanced accuracy on alignment scores of the
    /// aligned and misaligned examples.
    pub fn calibrate(&self, examples: &[LabeledExample]) -> Result<ThresholdCalibration> {
        let mut fabricated = Vec::new();
        let mut other = Vec::new();
        let mut aligned = Vec::new();
        let mut misaligned = Vec::new();
        let mut skipped = Vec::new();
        for ex in examples {
            let report = match self.knowledge_test(&ex.prompt, &ex.text) {
                Ok(r) => r,
                Err(
                    Error::NoSubjectCandidate
                    | Error::NoScorableTokens
                    | Error::SubjectNotLocated(_)
                    | Error::OverlappingOccurrences { .. },
                ) => {
                    skipped.push(ex.id.clone());
                    continue;
                }
                Err(e) => return Err(e),
            };
            match ex.label {
                ReasoningLabel::Fabricated => fabricated.push(report.mks.score),
                label => {
                    other.push(report.mks.score);
                    let score = self.alignment_test(&report.pair)?.overall;
                    if label == ReasoningLabel::Aligned {
                        aligned.push(score);
                    } else {
                        misaligned.push(score);
                    }
                }
            }
        }
        let knowledge = ks_threshold(&fabricated, &other)?;
        let theta = calibrate_alignment_threshold(&aligned, &misaligned)?;
        Ok(ThresholdCalibration {
            knowledge,
            theta,
            fabricated_scores: fabricated,
            other_scores: other,
            aligned_alignment: aligned,
            misaligned_alignment: misaligned,
            skipped,
        })
    }
}

/// Counts indexed `[predicted][actual]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[usize; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn record(&mut self, predicted: ReasoningLabel, actual: ReasoningLabel) {
        self.counts[predicted.index()][actual.index()] += 1;
    }

    pub fn column_total(&self, actual: ReasoningLabel) -> usize {
        (0..3).map(|p| self.counts[p][actual.index()]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Percent of each actual class predicted as each class; empty columns are
    /// all zero.
    pub fn column_percentages(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for a in ReasoningLabel::ALL {
            let total = self.column_total(a);
            if total == 0 {
                continue;
            }
            for p in ReasoningLabel::ALL {
                out[p.index()][a.index()] =
                    100.0 * self.counts[p.index()][a.index()] as f64 / total as f64;
            }
        }
        out
    }

    /// Binary collapse: aligned must be predicted aligned; misaligned and
    /// fabricated count as correct when predicted as either hallucinated type.
    pub fn binary_summary(&self) -> BinarySummary {
        let correct = |a: ReasoningLabel| -> usize {
            ReasoningLabel::ALL
                .into_iter()
                .filter(|p| p.binary() == a.binary())
                .map(|p| self.counts[p.index()][a.index()])
                .sum()
        };
        let pct = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let per: Vec<(usize, usize)> = ReasoningLabel::ALL
            .into_iter()
            .map(|a| (correct(a), self.column_total(a)))
            .collect();
        let (num, den) = per.iter().fold((0, 0), |(n, d), &(c, t)| (n + c, d + t));
        BinarySummary {
            aligned: pct(per[0].0, per[0].1),
            misaligned: pct(per[1].0, per[1].1),
            fabricated: pct(per[2].0, per[2].1),
            overall: pct(num, den),
        }
    }

    /// Long-format CSV: `predicted,actual,count,percent`.
    pub fn to_csv(&self) -> String {
        let pct = self.column_percentages();
        let mut s = String::from("predicted,actual,count,percent\n");
        for p in ReasoningLabel::ALL {
            for a in ReasoningLabel::ALL {
                s.push_str(&format!(
                    "{},{},{},{:.2}\n",
                    p,
                    a,
                    self.counts[p.index()][a.index()],
                    pct[p.index()][a.index()]
                ));
            }
        }
        s
    }
}

/// Class-wise accuracy under the binary collapse, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarySummary {
    pub aligned: f64,
    pub misaligned: f64,
    pub fabricated: f64,
    /// Pooled over examples.
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub matrix: ConfusionMatrix,
    pub column_percentages: [[f64; 3]; 3],
    /// Per actual class; excluded from the matrix.
    pub unclassifiable: [usize; 3],
    pub binary: BinarySummary,
    /// Three-way per-class accuracy (diagonal of the percentage matrix).
    pub class_accuracy: [f64; 3],
}

impl Evaluation {
    pub fn from_matrix(matrix: ConfusionMatrix, unclassifiable: [usize; 3]) -> Self {
        let column_percentages = matrix.column_percentages();
        let class_accuracy = [0, 1, 2].map(|i| column_percentages[i][i]);
        Self {
            binary: matrix.binary_summary(),
            column_percentages,
            class_accuracy,
            unclassifiable,
            matrix,
        }
    }
}

/// Tallies `outcomes` against `dataset`. Every dataset example needs exactly
/// one outcome with the same actual label.
pub fn evaluate(
    dataset: &[LabeledExample],
    outcomes: &[ClassificationOutcome],
) -> Result<Evaluation> {
    let mut by_id: HashMap<&str, &ClassificationOutcome> = HashMap::with_capacity(outcomes.len());
    for o in outcomes {
        if by_id.insert(o.id.as_str(), o).is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate outcome for id {:?}",
                o.id
            )));
        }
    }
    let mut matrix = ConfusionMatrix::default();
    let mut unclassifiable = [0usize; 3];
    for ex in dataset {
        let o = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("no outcome for example {:?}", ex.id)))?;
        if o.actual != ex.label {
            return Err(Error::InvalidConfig(format!(
                "label mismatch for {:?}: dataset says {}, outcome says {}",
                ex.id, ex.label, o.actual
            )));
        }
        match o.predicted.label() {
            Some(p) => matrix.record(p, ex.label),
            None => unclassifiable[ex.label.index()] += 1,
        }
    }
    Ok(Evaluation::from_matrix(matrix, unclassifiable))
}
