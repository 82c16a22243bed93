// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hallucination reasoning for generated text.
//!
//! Classifies a `(prompt, text)` pair as *aligned*, *misaligned* or
//! *fabricated* in two stages:
//!
//! 1. A knowledge test perturbs the embeddings of the prompt's subject and
//!    measures how much the model's next-token distributions over the text
//!    shift ([`probe`]). Little shift means the model had no knowledge to
//!    lose, so the text is fabricated.
//! 2. Pairs that pass are checked for consistency against fresh samples from
//!    the model ([`alignment`]).
//!
//! Thresholds for both stages are calibrated on labeled validation data
//! ([`calibration`], [`alignment::calibrate_alignment_threshold`]).

pub mod alignment;
pub mod calibration;
pub mod config;
pub mod dataset;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod subject;
pub mod tagger;

pub use error::{Error, Result};
pub use model::{LanguageModel, TokenizedPair, ToyLm};
pub use pipeline::{
    evaluate, ClassificationOutcome, ConfusionMatrix, Evaluation, LabeledExample, Prediction,
    ReasoningLabel, Thresholds, Workflow,
};
pub use probe::{MksResult, ProbeConfig};
