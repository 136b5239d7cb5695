//! JSON run configuration.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Secrets are never stored in the file: the HTTP backend names the
//! environment variable that holds its key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{BiasType, ChoiceSource};
use crate::exec::ExecMode;
use crate::lexicon::{self, Lexicon, LexiconError, DEFAULT_SHARE_THRESHOLD};
use crate::preamble::PreambleKind;
use crate::scoring::HttpConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    /// Probability-table backend loaded from a JSON file.
    Synthetic { table: PathBuf },
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconPaths {
    pub names: PathBuf,
    pub occupations: PathBuf,
    pub descriptions: PathBuf,
    #[serde(default = "default_threshold")]
    pub share_threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_SHARE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSpec {
    pub source: ChoiceSource,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SelectionSpec {
    #[default]
    Perplexity,
    Random {
        #[serde(default = "default_seeds")]
        seeds: Vec<u64>,
    },
}

pub fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_kinds() -> Vec<PreambleKind> {
    PreambleKind::GENERATED.to_vec()
}
fn default_n_max() -> usize {
    10
}
fn default_candidate_count() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSpec,
    #[serde(default)]
    pub exec: ExecMode,
    /// Bundled lexicon when absent.
    #[serde(default)]
    pub lexicon: Option<LexiconPaths>,
    #[serde(default)]
    pub crows_pairs: Option<PathBuf>,
    /// `None` keeps every bias type.
    #[serde(default = "default_bias_type")]
    pub bias_type: Option<BiasType>,
    #[serde(default)]
    pub downstream: Vec<DownstreamSpec>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<PreambleKind>,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_candidate_count")]
    pub candidate_count: usize,
    #[serde(default)]
    pub generation_seed: u64,
    /// Generate all kinds from shared draws so the i-th candidates share an
    /// occupation.
    #[serde(default = "default_true")]
    pub chained: bool,
    #[serde(default)]
    pub selection: SelectionSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Demonstrations placed before the intervention instruction.
    #[serde(default)]
    pub intervention_demos: Vec<String>,
    #[serde(default)]
    pub notes: Option<String>,
}

fn default_bias_type() -> Option<BiasType> {
    Some(BiasType::Gender)
}

/// A parsed config plus the hash of its exact bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub config_hash: String,
    pub path: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config = Self::from_json(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(LoadedConfig {
            config,
            config_hash: hex::encode(Sha256::digest(&bytes)),
            path: path.to_path_buf(),
        })
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendSpec::Synthetic { table } = &mut self.backend {
            fix(table);
        }
        if let Some(l) = &mut self.lexicon {
            fix(&mut l.names);
            fix(&mut l.occupations);
            fix(&mut l.descriptions);
        }
        if let Some(p) = &mut self.crows_pairs {
            fix(p);
        }
        for d in &mut self.downstream {
            fix(&mut d.path);
        }
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.cache {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_max == 0 {
            return Err(ConfigError::Invalid("n_max must be at least 1".into()));
        }
        if self.candidate_count < self.n_max {
            return Err(ConfigError::Invalid(format!(
                "n_max {} exceeds candidate_count {}",
                self.n_max, self.candidate_count
            )));
        }
        if let Some(k) = self.kinds.iter().find(|k| !PreambleKind::GENERATED.contains(k)) {
            return Err(ConfigError::Invalid(format!("`{k}` is not a generated preamble kind")));
        }
        if let SelectionSpec::Random { seeds } = &self.selection {
            if seeds.is_empty() {
                return Err(ConfigError::Invalid("random selection needs at least one seed".into()));
            }
        }
        if let BackendSpec::Http(h) = &self.backend {
            if h.parallelism == 0 {
                return Err(ConfigError::Invalid("backend parallelism must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn load_lexicon(&self) -> Result<Lexicon, LexiconError> {
        match &self.lexicon {
            None => Ok(lexicon::bundled()),
            Some(l) => lexicon::load_lexicon_files(&l.names, &l.occupations, &l.descriptions, l.share_threshold),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_json(r#"{"backend": {"kind": "synthetic", "table": "t.json"}}"#).unwrap();
        assert_eq!(c.kinds, PreambleKind::GENERATED.to_vec());
        assert_eq!((c.n_max, c.candidate_count, c.chained), (10, 200, true));
        assert_eq!(c.selection, SelectionSpec::Perplexity);
        assert_eq!(c.bias_type, Some(BiasType::Gender));
        c.validate().unwrap();
    }

    #[test]
    fn http_and_random() {
        let c = RunConfig::from_json(
            r#"{"backend": {"kind": "http", "endpoint": "http://h/v1/completions", "model": "m", "api_key_env": "KEY", "boundary": "pad-space"},
                "selection": {"mode": "random"}, "bias_type": null}"#,
        )
        .unwrap();
        assert_eq!(c.selection, SelectionSpec::Random { seeds: vec![0, 1, 2] });
        assert_eq!(c.bias_type, None);
        match c.backend {
            BackendSpec::Http(h) => assert_eq!(h.api_key_env.as_deref(), Some("KEY")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid() {
        let mut c = RunConfig::from_json(r#"{"backend": {"kind": "synthetic", "table": "t"}, "n_max": 5, "candidate_count": 4}"#).unwrap();
        assert!(c.validate().is_err());
        c.candidate_count = 5;
        c.kinds.push(PreambleKind::Instruct);
        assert!(c.validate().is_err());
        assert!(RunConfig::from_json(r#"{"backend": {"kind": "synthetic", "table": "t"}, "typo": 1}"#).is_err());
    }

    #[test]
    fn relative_paths() {
        let mut c = RunConfig::from_json(r#"{"backend": {"kind": "synthetic", "table": "t.json"}, "output_dir": "/abs"}"#).unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.backend, BackendSpec::Synthetic { table: PathBuf::from("/cfg/t.json") });
        assert_eq!(c.output_dir, PathBuf::from("/abs"));
    }
}
