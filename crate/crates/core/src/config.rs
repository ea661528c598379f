//! TOML configuration with one table per component. Every key is optional.
//!
//! ```toml
//! [db]
//! host = "localhost"
//! dbname = "tpcds"
//!
//! [llm]
//! backend = "remote"
//! model_id = "gpt-4o"
//!
//! [mcts]
//! iter_max = 8
//!
//! [equiv]
//! seeds = [1, 2, 3]
//!
//! [bench]
//! jobs = 1
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::db::DbConfig;
use crate::equiv::EquivConfig;
use crate::llm::LlmConfig;
use crate::mcts::MctsConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub db: DbConfig,
    pub llm: LlmConfig,
    pub mcts: MctsConfig,
    pub equiv: EquivConfig,
    pub bench: BenchConfig,
}

impl FromStr for Config {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

impl Config {
    /// Reads `path`. A relative `llm.script` is taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c: Config = text.parse()?;
        if let (Some(script), Some(dir)) = (&c.llm.script, path.parent()) {
            if script.is_relative() {
                c.llm.script = Some(dir.join(script));
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.llm.validate().map_err(|e| invalid(&e))?;
        self.mcts.validate().map_err(|e| invalid(&e))?;
        self.equiv.validate().map_err(|e| invalid(&e))?;
        if self.mcts.k > self.llm.top_k_limit {
            return Err(ConfigError::Invalid(format!(
                "mcts.k = {} exceeds llm.top_k_limit = {}",
                self.mcts.k, self.llm.top_k_limit
            )));
        }
        if self.bench.jobs == 0 {
            return Err(ConfigError::Invalid("bench.jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::BenchMode;
    use crate::llm::BackendKind;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_str("").unwrap(), Config::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c = Config::from_str(
            r#"
            [db]
            port = 5433
            dbname = "tpcds"
            [llm]
            backend = "remote"
            price_per_million_tokens = 5.0
            [mcts]
            iter_max = 20
            theta = 0.6
            [equiv]
            seeds = [7]
            [bench]
            jobs = 4
            mode = "ensemble+mcts"
            "#,
        )
        .unwrap();
        assert_eq!((c.db.port, c.db.dbname.as_str()), (5433, "tpcds"));
        assert_eq!(c.llm.backend, BackendKind::Remote);
        assert_eq!(c.llm.price_per_million_tokens, 5.0);
        assert_eq!((c.mcts.iter_max, c.mcts.theta, c.mcts.k), (20, 0.6, 2));
        assert_eq!(c.equiv.seeds, vec![7]);
        assert_eq!((c.bench.jobs, c.bench.mode), (4, BenchMode::EnsembleMcts));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            Config::from_str("[llm]\ntemperature = 0.5"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_str("[mcts]\nk = 9"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_str("[equiv]\nseeds = []"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_str("[bench]\njobs = 0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_str("[nope]\nx = 1"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            Config::from_str("[mcts]\nk = \"two\""),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn round_trips_and_resolves_script_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Config::default();
        c.llm.script = Some("script.json".into());
        c.mcts.iter_max = 3;
        let path = dir.path().join("lithe.toml");
        std::fs::write(&path, c.to_toml()).unwrap();
        let back = Config::from_file(&path).unwrap();
        assert_eq!(back.mcts.iter_max, 3);
        assert_eq!(back.llm.script, Some(dir.path().join("script.json")));
        assert!(matches!(
            Config::from_file(&dir.path().join("missing.toml")),
            Err(ConfigError::Io { .. })
        ));
    }
}
