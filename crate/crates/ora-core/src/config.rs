//! Flat key=value run configuration.
//!
//! One `RunConfig` type covers every subcommand: a config file plus
//! `--set key=value` overrides merge into a single map, any key outside
//! the master list is rejected, and each command reads the keys it needs.
//! Environment variables are never consulted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::objectives::ObjectiveKind;

/// Every key any subcommand understands.
pub const KNOWN_KEYS: &[&str] = &[
    // shared
    "seed", "out",
    // synth
    "profile", "n_patients", "n_codes", "n_numeric", "latent_dim",
    "window_lo", "window_hi", "events", "truth",
    "task_classification", "task_timetoevent", "task_regression",
    "prediction_fraction", "tasks_out",
    // vocabulary
    "k", "use_ontology", "ontology", "vocab",
    // discretizer
    "grids", "time_bins", "value_bins", "min_count",
    // model
    "preset", "d_model", "layers", "heads", "context_length", "d_head",
    // pretraining
    "objective", "lr", "batch_positions", "steps",
    // embed / probe / evaluate
    "checkpoint", "dataset", "task", "embeddings",
    "l2", "max_iter", "survival_bins", "split_fraction", "predictions",
    "metrics", "task_name", "bootstrap",
    // report
    "metrics_ntp", "metrics_tpp", "metrics_ora",
    // params
    "params_numeric", "params_nonnumeric",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = file {
            let text =
                std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or(Error::Parse {
                    line: idx + 1,
                    message: format!("expected key=value, got {line:?}"),
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            map.insert(key.clone(), value.clone());
        }
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(RunConfig { map })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        let owned: Vec<(String, String)> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self::from_sources(None, &owned)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.map.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key {key:?}")))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse::<T>()
            .map_err(|_| Error::Config(format!("config key {key:?} has invalid value {raw:?}")))
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let raw = self.require(key)?;
        self.parse(key, raw)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn objective(&self) -> Result<ObjectiveKind> {
        self.require("objective")?.parse()
    }

    /// Backbone from `preset` plus individual overrides. The big preset is
    /// for parameter arithmetic; `allow_paper_preset=false` rejects it.
    pub fn backbone(&self, allow_paper_preset: bool) -> Result<BackboneConfig> {
        let mut cfg = match self.get("preset") {
            None | Some("desk") => BackboneConfig::desk(),
            Some("paper-transformer") => {
                if !allow_paper_preset {
                    return Err(Error::Config(
                        "preset \"paper-transformer\" is for parameter-count arithmetic only; \
                         it cannot be trained"
                            .into(),
                    ));
                }
                BackboneConfig::paper_transformer()
            }
            Some(other) => {
                return Err(Error::Config(format!("unknown preset {other:?}")));
            }
        };
        if let Some(v) = self.get("d_model") {
            cfg.d_model = self.parse("d_model", v)?;
        }
        if let Some(v) = self.get("layers") {
            cfg.layers = self.parse("layers", v)?;
        }
        if let Some(v) = self.get("heads") {
            cfg.heads = self.parse("heads", v)?;
        }
        if let Some(v) = self.get("context_length") {
            cfg.context_length = self.parse("context_length", v)?;
        }
        if let Some(v) = self.get("d_head") {
            cfg.d_head = self.parse("d_head", v)?;
        }
        if let Some(v) = self.get("time_bins") {
            cfg.time_bins = self.parse("time_bins", v)?;
        }
        if let Some(v) = self.get("value_bins") {
            cfg.value_bins = self.parse("value_bins", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` rendering of the merged config, for hashing.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.kv");
        std::fs::write(&path, "# comment\nseed=7\nsteps=100\n").unwrap();
        let cfg = RunConfig::from_sources(
            Some(&path),
            &[("steps".into(), "250".into()), ("lr".into(), "0.01".into())],
        )
        .unwrap();
        assert_eq!(cfg.get_u64("seed", 0).unwrap(), 7);
        assert_eq!(cfg.get_usize("steps", 0).unwrap(), 250);
        assert_eq!(cfg.get_f64("lr", 0.0).unwrap(), 0.01);
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = RunConfig::from_pairs(&[("stepz", "9")]).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn paper_preset_gated() {
        let cfg = RunConfig::from_pairs(&[("preset", "paper-transformer")]).unwrap();
        assert!(cfg.backbone(false).is_err());
        let b = cfg.backbone(true).unwrap();
        assert_eq!(b.d_model, 768);
        assert_eq!(b.layers, 11);
        assert_eq!(b.heads, 12);
        assert_eq!(b.context_length, 8192);
        assert_eq!(b.d_head, 512);
        assert_eq!(b.time_bins, 8);
        assert_eq!(b.value_bins, 10);
    }

    #[test]
    fn desk_defaults_with_overrides() {
        let cfg = RunConfig::from_pairs(&[("d_model", "32"), ("heads", "4")]).unwrap();
        let b = cfg.backbone(false).unwrap();
        assert_eq!(b.d_model, 32);
        assert_eq!(b.heads, 4);
        assert_eq!(b.layers, BackboneConfig::desk().layers);
    }

    #[test]
    fn canonical_is_sorted_and_stable() {
        let a = RunConfig::from_pairs(&[("seed", "1"), ("lr", "0.1")]).unwrap();
        let b = RunConfig::from_pairs(&[("lr", "0.1"), ("seed", "1")]).unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.canonical(), "lr=0.1\nseed=1\n");
    }
}
