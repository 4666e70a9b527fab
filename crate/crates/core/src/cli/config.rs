//! Experiment configuration: every module config under one TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::eval::ComponentEvalConfig;
use crate::model::ModelConfig;
use crate::scoring::ScoreFn;
use crate::train::{ClosedSetConfig, FinetuneConfig, GradcheckConfig};

/// Sizes of the generated splits and the held-out outlier protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Templates in the held-out outlier bank, disjoint from the training bank.
    pub test_bank_size: usize,
    /// Paste probability for held-out scenes.
    pub test_p_out: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 50,
            test_bank_size: 50,
            test_p_out: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Scoring functions written by `score` when none is named.
    pub score_fns: Vec<ScoreFn>,
    pub components: ComponentEvalConfig,
    /// Class-probability level counted as a specialization event.
    pub conf_threshold: f64,
    pub k_clusters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_fns: ScoreFn::ALL.to_vec(),
            components: ComponentEvalConfig::default(),
            conf_threshold: 0.98,
            k_clusters: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub splits: SplitConfig,
    pub model: ModelConfig,
    pub train: ClosedSetConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            splits: SplitConfig::default(),
            model: ModelConfig::default(),
            train: ClosedSetConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.eval.components.validate()?;
        if self.data.classes != self.model.classes || self.data.in_channels != self.model.in_channels {
            return Err(Error::Config(format!(
                "data ({} classes, {} channels) and model ({} classes, {} channels) disagree",
                self.data.classes, self.data.in_channels, self.model.classes, self.model.in_channels
            )));
        }
        if self.splits.train_scenes == 0 || self.splits.test_scenes == 0 || self.splits.test_bank_size == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.splits.test_p_out) {
            return Err(Error::Config("splits.test_p_out must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.eval.conf_threshold) {
            return Err(Error::Config("eval.conf_threshold must be in [0, 1)".into()));
        }
        if self.eval.k_clusters == 0 || self.eval.score_fns.is_empty() {
            return Err(Error::Config("eval.k_clusters and eval.score_fns must be non-empty".into()));
        }
        Ok(())
    }

    /// Every field written out, defaults included.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved document with `output` cleared, so the hash
    /// names the experiment rather than where it was written.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        Ok(hex(&Sha256::digest(c.resolved_toml()?.as_bytes())))
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn write_beside(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved_config.toml"), self.resolved_toml()?)?;
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
