//! Run configuration: TOML file, overlaid on built-in defaults, then on
//! command-line flags.

use std::path::{Path, PathBuf};

use demoret::container::Pooling;
use demoret::eval::{EvalOptions, ExperimentConfig, ModelSettings, SyntheticSpec};
use demoret::index::FilterMode;
use demoret::nn::{Activation, Similarity};
use demoret::proxy::ProxyConfig;
use demoret::train::TrainConfig;
use demoret::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every sub-seed (label, init, shuffle, synth) is derived from this.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub paths: Paths,
    pub model: ModelSection,
    pub proxy: ProxyConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalSection,
    pub synth: SyntheticSpec,
}

/// Inputs; unset paths fall back to the conventional file in the output dir.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train: Vec<PathBuf>,
    pub dev: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    /// Subset of the container's kept layers to train on; all when unset.
    pub layers: Option<Vec<u16>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelSettings::default();
        Self {
            hidden_dim: m.hidden_dim,
            embed_dim: m.embed_dim,
            pooling: m.pooling,
            activation: m.activation,
            layers: None,
        }
    }
}

impl ModelSection {
    pub fn settings(&self) -> ModelSettings {
        ModelSettings {
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            pooling: self.pooling,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub filter: FilterMode,
    pub similarity: Similarity,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            k: e.k,
            filter: e.filter,
            similarity: e.similarity,
        }
    }
}

const SEEDED_SECTIONS: [&str; 3] = ["proxy", "train", "synth"];

impl RunConfig {
    /// Defaults, overlaid with `path` when given. Keys missing from the file
    /// keep their defaults; unknown keys are rejected.
    pub fn load(path: Option<&Path>) -> demoret::Result<Self> {
        let mut merged = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("cannot encode defaults: {e}")))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Table = text
                .parse()
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            for section in SEEDED_SECTIONS {
                if user.get(section).and_then(|s| s.get("seed")).is_some() {
                    return Err(Error::Config(format!(
                        "{}: `{section}.seed` is derived from the top-level `seed`",
                        path.display()
                    )));
                }
            }
            overlay(&mut merged, user);
        }
        let source = path.map_or("defaults".into(), |p| p.display().to_string());
        let mut cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("{source}: {e}")))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.proxy.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k: self.retrieval.k,
            filter: self.retrieval.filter,
            similarity: self.retrieval.similarity,
            proxy: self.proxy.clone(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            model: self.model.settings(),
            proxy: self.proxy.clone(),
            train: self.train.clone(),
            eval: self.eval_options(),
        }
    }

    /// Loadable TOML; section seeds are left implicit.
    pub fn to_toml(&self) -> demoret::Result<String> {
        let encode = |e: toml::ser::Error| Error::Config(format!("cannot encode config: {e}"));
        let mut table = toml::Table::try_from(self).map_err(encode)?;
        for section in SEEDED_SECTIONS {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove("seed");
            }
        }
        toml::to_string(&table).map_err(encode)
    }
}

/// Recursively replaces `base` entries with `user` ones; tables merge.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
