//! Run configuration documents.
//!
//! A run config is TOML with `[model]`, `[train]`, `[ensemble]` and `[paths]`
//! sections. `[model]` and `[train]` may name a `preset`; the preset's values
//! are laid down first and any keys given next to it override them. The
//! resolved document (presets expanded, no `preset` keys) is what gets echoed
//! into run directories, so feeding it back reproduces the run.

use std::path::{Path, PathBuf};

use diac_core::inference::EnsembleConfig;
use diac_core::model::ModelConfig;
use diac_core::training::TrainConfig;
use diac_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub passes_per_model: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let d = EnsembleConfig::default();
        Self { passes_per_model: d.passes_per_model, dropout_p: d.dropout_p, seed: d.seed }
    }
}

impl EnsembleSection {
    pub fn to_config(&self, passes: usize) -> EnsembleConfig {
        EnsembleConfig { passes_per_model: passes, dropout_p: self.dropout_p, seed: self.seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleSection,
    pub paths: PathsSection,
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

fn section(doc: &mut Table, name: &str) -> Result<Table> {
    match doc.remove(name) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(config_err(format!("[{name}] must be a table"))),
    }
}

fn take_preset(table: &mut Table, section: &str) -> Result<Option<String>> {
    match table.remove("preset") {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(config_err(format!("[{section}] preset must be a string"))),
    }
}

/// Serializes `base`, overlays `overrides` key by key and deserializes the result.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, overrides: Table, section: &str) -> Result<T> {
    let mut table = Table::try_from(base).map_err(config_err)?;
    table.extend(overrides);
    // keys that are unset in the base (optional fields) are simply absent
    Value::Table(table).try_into().map_err(|e| config_err(format!("[{section}]: {e}")))
}

impl RunConfig {
    /// Parses a config document. `train_preset` (from the command line) wins
    /// over a preset named in the document.
    pub fn parse(text: &str, train_preset: Option<&str>) -> Result<Self> {
        let mut doc: Table = text.parse().map_err(|e| config_err(format!("config parse error: {e}")))?;
        let mut model = section(&mut doc, "model")?;
        let mut train = section(&mut doc, "train")?;
        let ensemble = section(&mut doc, "ensemble")?;
        let paths = section(&mut doc, "paths")?;
        if let Some(key) = doc.keys().next() {
            return Err(config_err(format!("unknown config key or section `{key}`")));
        }
        let model_base = ModelConfig::preset(take_preset(&mut model, "model")?.as_deref().unwrap_or("full"))?;
        let doc_preset = take_preset(&mut train, "train")?;
        let train_base = TrainConfig::preset(train_preset.or(doc_preset.as_deref()).unwrap_or("table1-primary"))?;
        let cfg = Self {
            model: overlay(&model_base, model, "model")?,
            train: overlay(&train_base, train, "train")?,
            ensemble: overlay(&EnsembleSection::default(), ensemble, "ensemble")?,
            paths: Value::Table(paths).try_into().map_err(|e| config_err(format!("[paths]: {e}")))?,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, train_preset: Option<&str>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, train_preset)
    }

    /// Fully expanded TOML document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
