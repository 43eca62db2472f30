//! Run configuration: one JSON file plus dotted-key overrides such as
//! `--retrieve.K 50`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::EmbeddingConfig;
use crate::eval::{Amount, BenchConfig, Mode, PipelineConfig, SyntheticSpec};
use crate::hhindex::{Aggregation, IndexMode};
use crate::retrieve::GateParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("override {key:?}: {reason}")]
    BadOverride { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub capacity: Option<usize>,
    pub capacity_pct: Option<f64>,
    pub chunk_size: usize,
    pub mode: IndexMode,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            capacity: None,
            capacity_pct: None,
            chunk_size: 64,
            mode: IndexMode::PerDoc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub m: Option<usize>,
    pub m_pct: Option<f64>,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            m: None,
            m_pct: None,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub k_probe: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub aggregation: Aggregation,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        let gate = GateParams::default();
        Self {
            k_probe: 3,
            k: 50,
            alpha: gate.alpha,
            beta: gate.beta,
            aggregation: Aggregation::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<Mode>,
    /// Depths to evaluate; empty means just `retrieve.K`.
    pub ks: Vec<usize>,
    pub silhouette_max_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            ks: Vec::new(),
            silhouette_max_points: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            m_values: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub embedding: EmbeddingConfig,
    pub stream: StreamConfig,
    pub cluster: ClusterConfig,
    pub retrieve: RetrieveConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub synthetic: SyntheticSpec,
    pub paths: PathsConfig,
}

pub const DEFAULT_CAPACITY_PCT: f64 = 10.0;
pub const DEFAULT_M_PCT: f64 = 5.0;

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Applies `(dotted.key, value)` overrides. Values are parsed as JSON
    /// when possible and taken as strings otherwise. Setting one of
    /// `capacity`/`capacity_pct` (or `m`/`m_pct`) clears the other.
    pub fn apply_overrides(&self, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut root = serde_json::to_value(self).map_err(|e| invalid(e.to_string()))?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut root, key, value)?;
            let sibling = match key.as_str() {
                "stream.capacity" => Some("stream.capacity_pct"),
                "stream.capacity_pct" => Some("stream.capacity"),
                "cluster.m" => Some("cluster.m_pct"),
                "cluster.m_pct" => Some("cluster.m"),
                _ => None,
            };
            if let Some(other) = sibling {
                set_path(&mut root, other, Value::Null)?;
            }
        }
        serde_json::from_value(root).map_err(|e| ConfigError::BadOverride {
            key: overrides
                .iter()
                .map(|(k, _)| k.as_str())
                .collect::<Vec<_>>()
                .join(","),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.embedding
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.stream.capacity.is_some() && self.stream.capacity_pct.is_some() {
            return Err(invalid(
                "set only one of stream.capacity and stream.capacity_pct",
            ));
        }
        if self.cluster.m.is_some() && self.cluster.m_pct.is_some() {
            return Err(invalid("set only one of cluster.m and cluster.m_pct"));
        }
        if self.stream.capacity == Some(0) || self.cluster.m == Some(0) {
            return Err(invalid("capacity and m must be at least 1"));
        }
        for pct in [self.stream.capacity_pct, self.cluster.m_pct]
            .into_iter()
            .flatten()
        {
            if !(pct > 0.0 && pct <= 100.0) {
                return Err(invalid(format!("percentage {pct} outside (0, 100]")));
            }
        }
        if self.stream.chunk_size == 0 {
            return Err(invalid("stream.chunk_size must be at least 1"));
        }
        if self.retrieve.k == 0 || self.retrieve.k_probe == 0 {
            return Err(invalid(
                "retrieve.K and retrieve.k_probe must be at least 1",
            ));
        }
        GateParams::new(self.retrieve.alpha, self.retrieve.beta)
            .map_err(|e| invalid(e.to_string()))?;
        if self.cluster.tol.is_nan() || self.cluster.tol < 0.0 {
            return Err(invalid("cluster.tol must be non-negative"));
        }
        Ok(())
    }

    pub fn capacity(&self) -> Amount {
        match (self.stream.capacity, self.stream.capacity_pct) {
            (Some(n), _) => Amount::Count(n),
            (None, Some(p)) => Amount::Percent(p),
            (None, None) => Amount::Percent(DEFAULT_CAPACITY_PCT),
        }
    }

    pub fn clusters(&self) -> Amount {
        match (self.cluster.m, self.cluster.m_pct) {
            (Some(n), _) => Amount::Count(n),
            (None, Some(p)) => Amount::Percent(p),
            (None, None) => Amount::Percent(DEFAULT_M_PCT),
        }
    }

    pub fn gate(&self) -> GateParams {
        GateParams {
            alpha: self.retrieve.alpha,
            beta: self.retrieve.beta,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            embedding: self.embedding.clone(),
            capacity: self.capacity(),
            chunk_size: self.stream.chunk_size,
            index_mode: self.stream.mode,
            aggregation: self.retrieve.aggregation,
            clusters: self.clusters(),
            kmeans_seed: self.cluster.seed,
            max_iters: self.cluster.max_iters,
            tol: self.cluster.tol,
            k_probe: self.retrieve.k_probe,
            k: self.retrieve.k,
            gate: self.gate(),
            silhouette_max_points: self.eval.silhouette_max_points,
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring `paths.output_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.paths.output_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(ConfigError::UnknownKey(key.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.capacity(), Amount::Percent(10.0));
        assert_eq!(c.clusters(), Amount::Percent(5.0));
        assert_eq!(c.retrieve.k, 50);
    }

    #[test]
    fn overrides_apply_and_clear_siblings() {
        let c = RunConfig::default()
            .apply_overrides(&ov(&[("retrieve.K", "7"), ("stream.capacity_pct", "25")]))
            .unwrap();
        assert_eq!(c.retrieve.k, 7);
        assert_eq!(c.capacity(), Amount::Percent(25.0));
        let c = c
            .apply_overrides(&ov(&[("stream.capacity", "100")]))
            .unwrap();
        assert_eq!(c.stream.capacity_pct, None);
        assert_eq!(c.capacity(), Amount::Count(100));
        let c = c
            .apply_overrides(&ov(&[
                ("paths.corpus", "/tmp/c.jsonl"),
                ("stream.mode", "chunk_max"),
            ]))
            .unwrap();
        assert_eq!(c.paths.corpus.as_deref(), Some(Path::new("/tmp/c.jsonl")));
        assert_eq!(c.stream.mode, IndexMode::ChunkMax);
    }

    #[test]
    fn bad_overrides() {
        let c = RunConfig::default();
        assert!(matches!(
            c.apply_overrides(&ov(&[("retrieve.bogus", "1")])),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            c.apply_overrides(&ov(&[("retrieve.K", "many")])),
            Err(ConfigError::BadOverride { .. })
        ));
    }

    #[test]
    fn both_capacity_forms_rejected() {
        let c: RunConfig =
            serde_json::from_str(r#"{"stream": {"capacity": 10, "capacity_pct": 5}}"#).unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str(r#"{"cluster": {"m": 4}}"#).unwrap();
        assert_eq!(c.clusters(), Amount::Count(4));
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"retrieve": {"k": 5}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.apply_overrides(&ov(&[("cluster.seed", "1")])).unwrap();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = a
            .apply_overrides(&ov(&[("paths.output_dir", "elsewhere")]))
            .unwrap();
        assert_eq!(a.hash(), c.hash());
    }
}
