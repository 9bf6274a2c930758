//! Run configuration: a TOML or JSON file whose sections mirror the library
//! configs. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use urm_core::evaluator::LabelMode;
use urm_core::pipeline::GraphConfig;
use urm_core::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub posts: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub identity: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub max_size: usize,
    pub min_count: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { max_size: 20_000, min_count: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub labels: LabelMode,
    pub ks: Vec<usize>,
    pub max_pos: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { labels: LabelMode::Author, ks: vec![1, 5, 10, 20, 50], max_pos: 20 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub vocab: VocabSection,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// `.json` files parse as JSON, everything else as TOML.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|m| CliError::data(format!("invalid config: {m}")).with_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepochs = 2\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nope]\n").is_err());
        let c: RunConfig = toml::from_str("[train]\nepochs = 2\n[train.model]\nembed_dim = 16\n").unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.model.embed_dim, 16);
    }

    #[test]
    fn json_and_toml_agree() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let back: RunConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
