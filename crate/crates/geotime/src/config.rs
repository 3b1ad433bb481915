//! Run configuration: one schema-checked JSON document whose sections mirror
//! the per-module config types, so an experiment is fully described by a
//! single file plus a seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SplitThresholds, SyntheticWorldConfig};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::retrieval::RerankConfig;
use crate::trainer::TrainerConfig;
use crate::{Error, Result};

/// Query-time retrieval knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub rerank_geo: RerankConfig,
    pub rerank_time: RerankConfig,
    /// Results returned per query.
    pub k: usize,
    /// Use the day-by-hour time gallery instead of the 288 bin centers.
    pub fine_time_grid: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            rerank_geo: RerankConfig::geo(),
            rerank_time: RerankConfig::time(),
            k: 10,
            fine_time_grid: false,
        }
    }
}

impl RetrievalSection {
    pub fn validate(&self) -> Result<()> {
        self.rerank_geo.validate()?;
        self.rerank_time.validate()?;
        if self.k == 0 {
            return Err(Error::Config("retrieval.k must be positive".into()));
        }
        Ok(())
    }
}

/// Dataset-side settings: the synthetic world and the curation split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synthetic: SyntheticWorldConfig,
    pub curation: SplitThresholds,
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.curation.validate()
    }
}

/// Filesystem defaults used when a command's flags leave them unset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory that training writes checkpoints and the loss log into.
    pub out_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out_dir: "runs/geotime".into(),
        }
    }
}

/// The full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub data: DataSection,
    pub retrieval: RetrievalSection,
    pub evaluation: EvalConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.data.validate()?;
        self.retrieval.validate()?;
        self.evaluation.validate()?;
        if self.paths.out_dir.is_empty() {
            return Err(Error::Config("paths.out_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config encoding failed: {e}")))
    }
}

/// Parses and validates a run config, reporting the JSON path of the first
/// offending field on schema errors.
pub fn parse_run_config(json: &str, origin: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(json);
    let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let inner = e.inner();
        Error::Parse {
            path: origin.to_string(),
            line: inner.line(),
            msg: format!("at `{}`: {}", e.path(), inner),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a run config file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_json_pretty().unwrap();
        let back = parse_run_config(&json, "<test>").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn a_partial_document_fills_in_defaults() {
        let cfg = parse_run_config(r#"{"seed": 5}"#, "<test>").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model, ModelConfig::default());

        let cfg = parse_run_config(r#"{"model": {"d": 32, "heads": 2}}"#, "<test>").unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.nside, ModelConfig::default().nside);
        assert_eq!(cfg.trainer, TrainerConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = parse_run_config(r#"{"trainer": {"schedule": {"lr_maxx": 1.0}}}"#, "<test>")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trainer.schedule"), "path missing: {msg}");
        assert!(msg.contains("lr_maxx"), "field missing: {msg}");

        let err = parse_run_config(r#"{"extra": 1}"#, "<test>").unwrap_err();
        assert!(err.to_string().contains("extra"));
    }

    #[test]
    fn invalid_values_fail_validation_with_the_field_named() {
        let err = parse_run_config(r#"{"model": {"tau": -0.5}}"#, "<test>").unwrap_err();
        assert!(err.to_string().contains("tau"), "got: {err}");

        let err = parse_run_config(r#"{"retrieval": {"k": 0}}"#, "<test>").unwrap_err();
        assert!(err.to_string().contains("retrieval.k"), "got: {err}");

        let err =
            parse_run_config(r#"{"data": {"curation": {"t_high": 0.3, "t_low": 0.5}}}"#, "<test>")
                .unwrap_err();
        assert!(err.to_string().contains("t_low"), "got: {err}");
    }

    #[test]
    fn file_loading_distinguishes_io_from_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.json");
        assert!(matches!(
            load_run_config(&missing).unwrap_err(),
            Error::Io { .. }
        ));

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{\n  \"seed\": }").unwrap();
        match load_run_config(&bad).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
