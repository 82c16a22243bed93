// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration.
//!
//! Loaded from an optional TOML file, then overridden by `KNOWPROBE_*`
//! environment variables: `KNOWPROBE_<SECTION>_<KEY>=<value>`, e.g.
//! `KNOWPROBE_PROBE_SIGMA_PRIME=0.2` or `KNOWPROBE_MODEL_BACKEND=toy`. Values
//! are parsed as TOML literals where possible and taken as strings otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::error::{Error, Result};
use crate::model::{AttentionConfig, LanguageModel, ToyLm};
use crate::pipeline::Thresholds;
use crate::probe::ProbeConfig;
use crate::tagger::{LexiconTagger, PosTagger};

pub const ENV_PREFIX: &str = "KNOWPROBE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_model_name")]
    pub name: String,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_layers: Option<Vec<usize>>,
}

fn default_backend() -> String {
    "toy".into()
}

fn default_model_name() -> String {
    "standard".into()
}

fn default_device() -> String {
    "cpu".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            name: default_model_name(),
            device: default_device(),
            attention_layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggerConfig {
    /// `toy` (built-in table for the toy vocabulary) or `lexicon`.
    #[serde(default = "default_backend")]
    pub backend: String,
    /// TSV lexicon for the `lexicon` backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub tagger: TaggerConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        toml::from_str(source).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// File (if any), then process environment overrides, then validation.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        let cfg = base.with_overrides(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `KNOWPROBE_<SECTION>_<KEY>` pairs; other variables are ignored.
    pub fn with_overrides<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc =
            toml::Table::try_from(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let k = k.as_ref();
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        vars.sort();
        for (key, raw) in vars {
            let (section, field) = key.split_once('_').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{ENV_PREFIX}{} names no section key",
                    key.to_uppercase()
                ))
            })?;
            let table = doc
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("{section} is not a section")))?;
            table.insert(field.to_string(), parse_literal(&raw));
        }
        doc.try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        self.alignment.validate()?;
        match self.tagger.backend.as_str() {
            "toy" => {}
            "lexicon" if self.tagger.lexicon.is_some() => {}
            "lexicon" => {
                return Err(Error::InvalidConfig(
                    "tagger.backend = \"lexicon\" needs tagger.lexicon".into(),
                ))
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown tagger backend {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            layers: self.model.attention_layers.clone(),
        }
    }

    pub fn build_model(&self) -> Result<Box<dyn LanguageModel>> {
        match self.model.backend.as_str() {
            "toy" => Ok(Box::new(ToyLm::standard())),
            other => Err(Error::InvalidConfig(format!(
                "model backend {other:?} is not available in this build (supported: toy)"
            ))),
        }
    }

    pub fn build_tagger(&self) -> Result<Box<dyn PosTagger>> {
        match (self.tagger.backend.as_str(), &self.tagger.lexicon) {
            ("toy", _) => Ok(Box::new(LexiconTagger::standard_toy())),
            ("lexicon", Some(path)) => Ok(Box::new(LexiconTagger::from_tsv_file(path)?)),
            (other, _) => Err(Error::InvalidConfig(format!(
                "unknown tagger backend {other:?}"
            ))),
        }
    }

    /// Both thresholds, when configured.
    pub fn thresholds(&self) -> Option<Thresholds> {
        Some(Thresholds {
            tau: self.thresholds.tau?,
            theta: self.thresholds.theta?,
        })
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn load_thresholds(path: impl AsRef<Path>) -> Result<Thresholds> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_thresholds(path: impl AsRef<Path>, t: &Thresholds) -> Result<()> {
    let mut s = serde_json::to_string_pretty(t)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
