//! Pipeline configuration file.
//!
//! Every field has a default, so `{}` is a complete config. Unknown keys are
//! rejected at every nesting level. Relative paths are resolved against the
//! directory holding the config file.
//!
//! Stage seeds are not read from the nested sections: each stage derives its
//! own from the top-level `seed` (see [`crate::seed`]), so a single `--seed`
//! reproduces or varies the whole run.

use crate::corpus::DEFAULT_K;
use crate::embedder::EmbedderConfig;
use crate::labeling::PairMode;
use crate::probes::{PrelabelConfig, ProbeHyper};
use crate::reward::RmHyper;
use crate::rlkf::{PpoConfig, ToyEnvConfig, ToyRmConfig};
use crate::scorers::{Scorer, ScorerSet};
use crate::seed::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: at `{key}`: {message}")]
    Parse { path: String, key: String, message: String },
    #[error("config {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub questions: PathBuf,
    pub generations: PathBuf,
    pub gold: Option<PathBuf>,
    pub activations_manifest: Option<PathBuf>,
    pub activations_bin: Option<PathBuf>,
    /// JSONL of non-factual pairs mixed into reward-model training.
    pub general_pairs: Option<PathBuf>,
    /// Embedding cache; overrides `embedder.cache_dir` when set.
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            questions: "questions.jsonl".into(),
            generations: "generations.jsonl".into(),
            gold: None,
            activations_manifest: None,
            activations_bin: None,
            general_pairs: None,
            cache_dir: None,
            output_dir: "out".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.questions);
        join(&mut self.generations);
        join(&mut self.output_dir);
        for p in [
            &mut self.gold,
            &mut self.activations_manifest,
            &mut self.activations_bin,
            &mut self.general_pairs,
            &mut self.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub embedder: EmbedderConfig,
    pub k: usize,
    pub prelabel: PrelabelConfig,
    /// Scorers summed into the labeling total. The probe scorer only
    /// contributes once a probe model exists.
    pub scorers: ScorerSet,
    pub probe: ProbeHyper,
    /// Training seeds per grid cell.
    pub probe_seeds: usize,
    pub pair_mode: PairMode,
    pub rm: RmHyper,
    /// Fraction of questions whose pairs are held out for `rm-eval`.
    pub rm_test_fraction: f64,
    pub toy_env: ToyEnvConfig,
    pub toy_rm: ToyRmConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            embedder: EmbedderConfig::default(),
            k: DEFAULT_K,
            prelabel: PrelabelConfig::default(),
            scorers: Scorer::ALL.into(),
            probe: ProbeHyper::default(),
            probe_seeds: 5,
            pair_mode: PairMode::default(),
            rm: RmHyper::default(),
            rm_test_fraction: 0.2,
            toy_env: ToyEnvConfig::default(),
            toy_rm: ToyRmConfig::default(),
            ppo: PpoConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 2 {
            return Err(format!("k must be >= 2, got {}", self.k));
        }
        if self.scorers.is_empty() {
            return Err("`scorers` must not be empty".into());
        }
        if self.probe_seeds == 0 {
            return Err("probe_seeds must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rm_test_fraction) {
            return Err("rm_test_fraction must be in [0, 1)".into());
        }
        if self.paths.activations_manifest.is_some() != self.paths.activations_bin.is_some() {
            return Err("activations_manifest and activations_bin must be set together".into());
        }
        self.prelabel.validate().map_err(|e| e.to_string())?;
        self.embedder.validate().map_err(|e| e.to_string())?;
        self.rm.validate().map_err(|e| e.to_string())?;
        self.toy_rm.hyper.validate().map_err(|e| e.to_string())?;
        self.ppo.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Embedder settings with the `paths.cache_dir` override applied.
    pub fn embedder_config(&self) -> EmbedderConfig {
        let mut e = self.embedder.clone();
        if let Some(dir) = &self.paths.cache_dir {
            e.cache_dir = Some(dir.clone());
        }
        e
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn probe_hyper(&self) -> ProbeHyper {
        ProbeHyper {
            seed: self.stage_seed("probe"),
            ..self.probe.clone()
        }
    }

    /// Seeds for the probe grid; the first is also used for the saved model.
    pub fn probe_grid_seeds(&self) -> Vec<u64> {
        let base = self.stage_seed("probe");
        (0..self.probe_seeds as u64).map(|i| derive_seed(base, &i.to_string())).collect()
    }

    pub fn rm_hyper(&self) -> RmHyper {
        RmHyper {
            seed: self.stage_seed("rm"),
            ..self.rm.clone()
        }
    }

    pub fn toy_env_config(&self) -> ToyEnvConfig {
        ToyEnvConfig {
            seed: self.stage_seed("toy-env"),
            ..self.toy_env.clone()
        }
    }

    pub fn toy_rm_config(&self) -> ToyRmConfig {
        let mut c = self.toy_rm.clone();
        c.hyper.seed = self.stage_seed("toy-rm");
        c
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            seed: self.stage_seed("ppo"),
            ..self.ppo.clone()
        }
    }
}

/// Parses a config from JSON text; `origin` only labels error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<PipelineConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate().map_err(|message| ConfigError::Invalid {
        path: origin.to_string(),
        message,
    })?;
    Ok(cfg)
}

/// Reads a config file and resolves its relative paths against the file's
/// directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cfg = parse_config(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.paths.resolve(base);
    Ok(cfg)
}
