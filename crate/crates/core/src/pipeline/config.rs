use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Removal,
    Enhancement,
    Off,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Removal => "removal",
            Mode::Enhancement => "enhancement",
            Mode::Off => "off",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "removal" => Ok(Mode::Removal),
            "enhancement" => Ok(Mode::Enhancement),
            "off" => Ok(Mode::Off),
            _ => Err(Error::Config(format!(
                "mode `{s}` is not one of removal, enhancement, off"
            ))),
        }
    }
}

/// Which documents the concept head, extractor and reversal network see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptPool {
    /// Every concept-labeled document of the corpus. Task labels are not used.
    Corpus,
    /// The biased training split only.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CureHyper {
    pub tau: f64,
    pub lambda: f64,
    pub margin: f64,
    pub mode: Mode,
    /// Weight of the margin loss during joint task training.
    pub joint_margin_weight: f64,
}

impl Default for CureHyper {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda: 1.0,
            margin: 0.0,
            mode: Mode::Removal,
            joint_margin_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub epochs_concept: usize,
    pub epochs_extractor: usize,
    pub epochs_debias: usize,
    pub epochs_task: usize,
    pub batch_size: usize,
    pub lr_extractor: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    /// Reversal-network steps per extractor step.
    pub alternation: usize,
    /// Fraction of training pairs whose hinge term must be zero for the
    /// debiasing stage to stop early.
    pub hinge_target: f64,
    pub concept_pool: ConceptPool,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            epochs_concept: 5,
            epochs_extractor: 25,
            epochs_debias: 5,
            epochs_task: 5,
            batch_size: 16,
            lr_extractor: 1e-4,
            lr_heads: 3e-4,
            weight_decay: 0.01,
            alternation: 1,
            hinge_target: 0.95,
            concept_pool: ConceptPool::Corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// The extractor's transformer layer sees each embedding as this many
    /// tokens of width `dim / tokens`.
    pub tokens: usize,
    /// Init scale of the projections that write into residual streams of the
    /// extractor and reversal network. Zero makes both exact identities.
    pub residual_init: f64,
    /// SwiGLU hidden width of the debiasing module; 0 means `dim / 3`.
    pub debias_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokens: 2,
            residual_init: 0.1,
            debias_hidden: 0,
        }
    }
}

impl ModelConfig {
    pub fn hidden_for(&self, dim: usize) -> usize {
        if self.debias_hidden == 0 {
            (dim / 3).max(1)
        } else {
            self.debias_hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k: usize,
    pub iid_holdout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            k: 2,
            iid_holdout_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Labeled JSONL corpus. When absent the synthetic spec is generated and
    /// labeled offline.
    pub corpus: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub cure: CureHyper,
    pub schedule: StageSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            cure: CureHyper::default(),
            schedule: StageSchedule::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = |msg: String| Err(Error::Config(msg));
        if s.batch_size == 0 {
            return bad("schedule.batch_size must be at least 1".into());
        }
        if !(s.lr_extractor > 0.0 && s.lr_heads > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if s.alternation == 0 {
            return bad("schedule.alternation must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.cure.margin) {
            return bad(format!("cure.margin {} is outside [0, 1]", self.cure.margin));
        }
        if self.cure.tau < 0.0 || self.cure.lambda < 0.0 {
            return bad("cure.tau and cure.lambda must be non-negative".into());
        }
        let d = self.encoder.dim;
        if self.model.tokens == 0 || d % self.model.tokens != 0 {
            return bad(format!(
                "model.tokens = {} must divide encoder.dim = {d}",
                self.model.tokens
            ));
        }
        self.data.synthetic.validate()
    }
}
