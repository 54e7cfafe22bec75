//! Declarative run configuration.
//!
//! A config file is a JSON object overriding any subset of the defaults.
//! The resolved configuration, defaults included, is what runs and what
//! manifests store.

use std::path::Path;

use anyhow::{bail, Context, Result};
use atdkt_core::data::Vocab;
use atdkt_core::model::ModelConfig;
use atdkt_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `num_kcs`, `num_questions` and `max_len` of 0 are filled from the
    /// prepared data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Random-search trials per fold over `train.grid`; `null` trains the
    /// model settings as given.
    pub search_budget: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::new(64, 0, 0);
        model.max_len = 0;
        RunConfig {
            model,
            train: TrainConfig::default(),
            search_budget: None,
        }
    }
}

/// Overlays `patch` on `base`. Keys absent from `base` are rejected so
/// that typos cannot silently fall back to defaults.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = format!("{path}.{k}");
                let Some(slot) = b.get_mut(&k) else {
                    bail!("unknown setting `{}`", &here[1..]);
                };
                // Optional settings default to null and take any value.
                if slot.is_null() {
                    *slot = v;
                } else {
                    merge(slot, v, &here)?;
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// `base` with the JSON object `text` laid over it.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let patch: Value = serde_json::from_str(text).context("not valid JSON")?;
    if !patch.is_object() {
        bail!("expected a JSON object");
    }
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, patch, "")?;
    serde_json::from_value(merged).context("a setting has a value of the wrong type")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        overlay(&RunConfig::default(), text)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read {}", p.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// Fills the data-dependent sizes and validates the result.
    pub fn resolve(mut self, vocab: Vocab, max_len: usize) -> Result<Self> {
        let m = &mut self.model;
        if m.num_kcs == 0 {
            m.num_kcs = vocab.kcs;
        }
        if m.num_questions == 0 {
            m.num_questions = vocab.questions;
        }
        if m.max_len == 0 {
            m.max_len = max_len;
        }
        if m.num_kcs < vocab.kcs || m.num_questions < vocab.questions {
            bail!(
                "model vocabulary {}x{} is smaller than the data's {}x{}",
                m.num_kcs,
                m.num_questions,
                vocab.kcs,
                vocab.questions
            );
        }
        if m.max_len < max_len {
            bail!(
                "model max_len {} is below the data's chunk length {max_len}",
                m.max_len
            );
        }
        m.validate()?;
        self.train.validate()?;
        if let Some(b) = self.search_budget {
            if b == 0 {
                bail!("search_budget must be at least 1");
            }
            self.train.grid.validate()?;
        }
        Ok(self)
    }
}
