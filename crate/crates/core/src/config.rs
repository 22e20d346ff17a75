//! Run configuration: one JSON file with an explicit schema version feeds
//! every CLI subcommand.

use crate::corpus::CorpusConfig;
use crate::crc64::crc64;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of samples held out by the sample-id-hash split. The default
    /// corpus (576 samples) yields exactly 512 train / 64 held-out pairs.
    pub held_out_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { held_out_fraction: 1.0 / 9.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return Err(Error::Config(format!(
                "held_out_fraction ({}) must lie in (0, 1)",
                self.held_out_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Override both the corpus and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Stable hash of the canonical JSON encoding; stored in checkpoints.
    pub fn hash(&self) -> u64 {
        crc64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_json_pretty();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_fields_are_schema_violations() {
        let text = r#"{ "schema_version": 1, "corpus": { "bogus_field": 3 } }"#;
        let err = serde_json::from_str::<RunConfig>(text);
        assert!(err.is_err());
    }

    #[test]
    fn wrong_schema_version_is_a_version_mismatch() {
        let cfg = RunConfig { schema_version: 9, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::VersionMismatch { found: 9, expected: 1 })));
    }

    #[test]
    fn seed_override_hits_both_seeds() {
        let cfg = RunConfig::default().with_seed(777);
        assert_eq!(cfg.corpus.seed, 777);
        assert_eq!(cfg.train.seed, 777);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::default().with_seed(1234);
        assert_ne!(a.hash(), b.hash());
    }
}
