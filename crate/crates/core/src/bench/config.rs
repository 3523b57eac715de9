use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BenchError;
use crate::adapt::AdaptConfig;
use crate::agent::TrainConfig;
use crate::nn::Architecture;
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

/// Everything a CLI run needs. Missing fields take the defaults below;
/// unknown keys anywhere are an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::with_image_size(32),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Recursively writes `patch` over `base`. Keys absent from `base` are kept
/// so the strict deserializer can reject them.
fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a JSON document, filling every omitted field (including
    /// fields inside a partially given section) from [`RunConfig::default`].
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let patch: Value = serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        if !patch.is_object() {
            return Err(BenchError::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::default()).expect("default config serializes");
        overlay(&mut merged, patch);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.world.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.architecture()?;
        Ok(())
    }

    /// The network profile for the configured frame size.
    pub fn architecture(&self) -> Result<Architecture, BenchError> {
        [Architecture::desk(), Architecture::paper()]
            .into_iter()
            .find(|a| a.image_size() == self.world.image_size)
            .ok_or_else(|| {
                BenchError::Config(format!(
                    "world.image_size {} has no network profile (use 32 or 84)",
                    self.world.image_size
                ))
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().eval.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = RunConfig::from_json(r#"{"world": {"horizon": 40}, "adapt": {"episodes": 3}}"#).unwrap();
        assert_eq!(c.world.horizon, 40);
        assert_eq!(c.world.image_size, 32);
        assert_eq!(c.adapt.episodes, 3);
        assert_eq!(c.adapt.batch, 32);
    }

    #[test]
    fn unknown_keys_fail_at_any_depth() {
        for doc in [r#"{"wrold": {}}"#, r#"{"adapt": {"lr_stm": 1.0}}"#, r#"{"eval": {"seed": [1]}}"#] {
            let err = RunConfig::from_json(doc).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{doc}: {err}");
        }
    }

    #[test]
    fn unsupported_image_size_is_rejected() {
        assert!(RunConfig::from_json(r#"{"world": {"image_size": 40}}"#).is_err());
        let paper = RunConfig::from_json(r#"{"world": {"image_size": 84}}"#).unwrap();
        assert_eq!(paper.architecture().unwrap().name, "paper");
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
