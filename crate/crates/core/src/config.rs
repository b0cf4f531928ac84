//! Pipeline configuration, loadable from TOML or JSON. Every section is
//! optional and falls back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::FlagParams;
use crate::detector::ScaleSpaceParams;
use crate::error::{Error, Result};
use crate::knn::IndexParams;
use crate::pairwise::MatchParams;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub detector: ScaleSpaceParams,
    pub index: IndexParams,
    pub matching: MatchParams,
    pub flags: FlagParams,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.index.validate()?;
        self.matching.validate()?;
        self.flags.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// `.json` files are read as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
