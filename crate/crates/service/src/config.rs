//! Engine configuration, read from a TOML file.
//!
//! ```toml
//! root_directory = "./agents"
//! mode = "hybrid"
//! k = 5
//! chunk_size = 32
//! fanin = 8
//! budget_tokens = 4096
//! threshold_source = "fixed_half"
//!
//! [cost_params]
//! lambda1 = 0.05
//! lambda2 = 1.0
//! t_rag = 0.4
//! t_rlm = 8.0
//!
//! [backend]
//! backend_kind = "mock"
//!
//! [anchor_weights]
//! soul = 0.3
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anchorage_core::anchors::AnchorKind;
use anchorage_core::backend::BackendConfig;
use anchorage_core::drift::{DEFAULT_DRIFT_THRESHOLD, DEFAULT_PROJECTION_SEED};
use anchorage_core::engine::{EngineMode, EngineSettings};
use anchorage_core::router::{CostParams, ThresholdSource};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub root_directory: PathBuf,
    pub mode: EngineMode,
    pub k: usize,
    pub chunk_size: usize,
    pub fanin: usize,
    pub budget_tokens: usize,
    pub max_output_tokens: usize,
    pub cost_params: CostParams,
    pub threshold_source: ThresholdSource,
    pub backend: BackendConfig,
    /// Keyed by anchor slug (`soul`, `memory`, ...) or file name.
    pub anchor_weights: BTreeMap<String, f64>,
    /// Keep plaintext queries in the route history, not just their hashes.
    pub store_query_text: bool,
    pub drift_threshold: u32,
    pub projection_seed: u64,
    /// Engine mode used to answer drift probes.
    pub probe_mode: EngineMode,
    /// How long a turn waits for the agent's previous turn before giving up.
    pub turn_wait_ms: u64,
    /// Persist the vector index next to each agent after every turn.
    pub index_snapshot: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let settings = EngineSettings::default();
        Self {
            root_directory: PathBuf::from("agents"),
            mode: EngineMode::Hybrid,
            k: settings.k,
            chunk_size: settings.chunk_size,
            fanin: settings.fanin,
            budget_tokens: settings.context_budget,
            max_output_tokens: settings.max_output_tokens,
            cost_params: CostParams::default(),
            threshold_source: ThresholdSource::FixedHalf,
            backend: BackendConfig::default(),
            anchor_weights: BTreeMap::new(),
            store_query_text: false,
            drift_threshold: DEFAULT_DRIFT_THRESHOLD,
            projection_seed: DEFAULT_PROJECTION_SEED,
            probe_mode: EngineMode::Hybrid,
            turn_wait_ms: 2000,
            index_snapshot: false,
        }
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = toml::from_str(&text).map_err(|e| ConfigError::Syntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn settings(&self) -> EngineSettings {
        EngineSettings {
            k: self.k,
            chunk_size: self.chunk_size,
            fanin: self.fanin,
            context_budget: self.budget_tokens,
            max_output_tokens: self.max_output_tokens,
        }
    }

    pub fn turn_wait(&self) -> Duration {
        Duration::from_millis(self.turn_wait_ms)
    }

    pub fn weights(&self) -> Result<BTreeMap<AnchorKind, f64>, ConfigError> {
        self.anchor_weights
            .iter()
            .map(|(name, w)| {
                let kind: AnchorKind = name
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("unknown anchor {name:?} in anchor_weights")))?;
                if !(0.0..=1.0).contains(w) {
                    return Err(ConfigError::Invalid(format!("weight for {name} must be in [0, 1]")));
                }
                Ok((kind, *w))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.settings()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cost_params
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.backend
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weights()?;
        if self.drift_threshold as usize > anchorage_core::drift::HASH_BITS {
            return Err(ConfigError::Invalid("drift_threshold exceeds the hash width".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EngineConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchorage.toml");
        std::fs::write(
            &path,
            "mode = \"rag\"\nk = 3\nthreshold_source = \"derived_boundary\"\n\
             [cost_params]\nlambda1 = 0.1\nlambda2 = 2.0\nt_rag = 0.5\nt_rlm = 4.0\n\
             [anchor_weights]\nsoul = 0.5\n\"SALIENCE.md\" = 0.2\n",
        )
        .unwrap();
        let c = EngineConfig::load(&path).unwrap();
        assert_eq!(c.mode, EngineMode::Rag);
        assert_eq!(c.k, 3);
        assert_eq!(c.chunk_size, 32);
        assert_eq!(c.threshold_source, ThresholdSource::DerivedBoundary);
        assert_eq!(c.weights().unwrap()[&AnchorKind::Salience], 0.2);
    }

    #[test]
    fn rejects_bad_values() {
        let c = EngineConfig {
            fanin: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = EngineConfig::default();
        c.anchor_weights.insert("bogus".into(), 0.1);
        assert!(c.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "unknown_key = 1\n").unwrap();
        assert!(matches!(EngineConfig::load(&path), Err(ConfigError::Syntax { .. })));
    }
}
