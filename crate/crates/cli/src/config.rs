//! Run configuration: TOML file with sections, every key optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use dada_core::attack::AttackConfig;
use dada_core::experiment::BenchmarkConfig;
use serde::{Deserialize, Serialize};

use crate::error::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset root written by `gen-data`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            output: "out".into(),
        }
    }
}

impl Paths {
    /// Relative paths are taken against `root`.
    pub fn resolved(&self, root: &Path) -> Paths {
        let r = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        Paths {
            data: r(&self.data),
            checkpoints: r(&self.checkpoints),
            output: r(&self.output),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for training, synthesis and region sampling.
    pub seed: u64,
    pub paths: Paths,
    pub benchmark: BenchmarkConfig,
    pub attack: AttackConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back.to_toml(), cfg.to_toml());
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[attack]\nalpha = 0.005\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.attack.alpha, 0.005);
        assert_eq!(cfg.attack.inner_iters, AttackConfig::default().inner_iters);
        assert_eq!(cfg.benchmark.n_images, 600);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[attack]\nalpah = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[benchmark.toy]\nsize2 = 3\n").is_err());
    }
}
