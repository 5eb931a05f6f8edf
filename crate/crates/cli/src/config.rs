//! Run configuration: one TOML file with a section per stage.

use std::path::Path;

use anyhow::Context;
use deltaedit::evaluation::EvalConfig;
use deltaedit::relevance::{FilterConfig, RelevanceConfig};
use deltaedit::store::fnv1a64;
use deltaedit::training::TrainConfig;
use deltaedit::world::WorldConfig;
use serde::{Deserialize, Serialize};

/// The authoritative seed is the top-level one; it is copied into every
/// section on resolution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub relevance: RelevanceConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.relevance.seed = self.seed;
        self.eval.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Digest of the resolved config plus the subcommand's own inputs.
pub fn run_digest(command: &str, config: &RunConfig, inputs: &[String]) -> u64 {
    let mut text = format!("{command}\n{}", config.to_toml());
    for i in inputs {
        text.push('\n');
        text.push_str(i);
    }
    fnv1a64(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default().resolve(Some(7));
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, 7);
    }

    #[test]
    fn partial_files_fill_defaults_and_reject_unknown_keys() {
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nsteps = 10\nmode = \"naive\"\n").unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch_size, 64);
        assert!(toml::from_str::<RunConfig>("[train]\nstepz = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[world]\nclip = 1\n").is_err());
        let c: RunConfig = toml::from_str("[world.layout]\ncoarse_layers = 2\ncoarse_dim = 8\nmedium_layers = 2\nmedium_dim = 8\nfine_dim = 16\n").unwrap();
        assert_eq!(c.world.layout.total(), 48);
    }

    #[test]
    fn digest_tracks_inputs() {
        let c = RunConfig::default();
        assert_eq!(run_digest("train", &c, &[]), run_digest("train", &c, &[]));
        assert_ne!(run_digest("train", &c, &[]), run_digest("eval", &c, &[]));
        assert_ne!(run_digest("train", &c, &["a".into()]), run_digest("train", &c, &["b".into()]));
    }
}
