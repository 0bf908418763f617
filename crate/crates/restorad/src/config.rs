//! Run configuration: one TOML file with `key=value` command-line overrides.
//! Every field has a default, unknown keys are rejected, and the resolved
//! config is echoed into the output directory next to its fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::critic::CriticConfig;
use crate::evaluation::EvalConfig;
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::synthesis::SynthParams;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override '{0}' is not of the form section.key=value")]
    BadOverride(String),
    #[error("override path '{0}' does not exist in the config")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Repartition file produced by `prepare`.
    pub repartition: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
    pub synth: SynthParams,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            data: DataSection::default(),
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            train: TrainConfig::default(),
            synth: SynthParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Weights live in the train section; convenience accessor.
    pub fn weights(&self) -> &LossWeights {
        &self.train.weights
    }

    /// Read a TOML file and apply `key=value` overrides (dotted paths, e.g.
    /// `train.lr=1e-4`).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&body, overrides)
    }

    pub fn from_toml_str(body: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Value =
            toml::from_str(body).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Short content fingerprint of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex_prefix(&digest, 12)
    }

    /// Echo the resolved config into the output directory.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir).map_err(|source| ConfigError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join("resolved_config.toml");
        let body = toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        std::fs::write(&path, body).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Parse an override value with the loosest sensible typing: bool, integer,
/// float, then string.
fn parse_scalar(raw: &str) -> toml::Value {
    if raw == "true" || raw == "false" {
        return toml::Value::Boolean(raw == "true");
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, item: &str) -> Result<(), ConfigError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(item.to_string()))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride(item.to_string()));
    }
    let mut cursor = root;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .as_table_mut()
            .and_then(|t| {
                if !t.contains_key(*seg) {
                    t.insert(seg.to_string(), toml::Value::Table(Default::default()));
                }
                t.get_mut(*seg)
            })
            .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
    table.insert(segments[segments.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_toml() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 5e-5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.d_steps_per_g_step, 2);
        assert_eq!(cfg.generator.input_size, 64);
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = RunConfig::from_toml_str(
            "output_dir = \"x\"\n",
            &[
                "train.lr=0.001".into(),
                "train.batch_size=8".into(),
                "train.include_unlabeled=false".into(),
                "generator.patch_grid_n=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.batch_size, 8);
        assert!(!cfg.train.include_unlabeled);
        assert_eq!(cfg.generator.patch_grid_n, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[trainer]\nlr = 1.0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["train.learning=1.0".into()]).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.train.lr = 1e-4;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 12);
    }
}
