//! Run configuration file (TOML). Every section is optional and falls back
//! to the defaults below; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};
use crate::objective::ClipConfig;
use crate::policy::{Architecture, FeatureMap, Vocabulary};
use crate::shaping::{ShapingConfig, ShapingMode};
use crate::tasks::TierMix;
use crate::trainer::pretrain::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Fit the scripted verbose policy first.
    PretrainVerbose,
    /// Random hidden layer, zero output layer.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Linear,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub prompts_per_batch: usize,
    pub samples_per_prompt: usize,
    pub budget: usize,
    pub lr: f64,
    pub total_samples: usize,
    pub tier_mix: TierMix,
    pub init: InitKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 0,
            prompts_per_batch: 8,
            samples_per_prompt: 4,
            budget: 128,
            lr: 2e-4,
            total_samples: 6400,
            tier_mix: TierMix::Mixed,
            init: InitKind::PretrainVerbose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub arch: ArchKind,
    pub hidden_units: usize,
    pub window: usize,
    pub buckets: usize,
    pub temperature: f64,
    pub init_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            arch: ArchKind::Hidden,
            hidden_units: 64,
            window: 13,
            buckets: 4,
            temperature: 1.0,
            init_scale: 0.3,
        }
    }
}

impl PolicySection {
    pub fn architecture(&self) -> Architecture {
        match self.arch {
            ArchKind::Linear => Architecture::Linear,
            ArchKind::Hidden => Architecture::Hidden {
                units: self.hidden_units,
            },
        }
    }
}

/// Shaping knobs for training runs. Same fields as [`ShapingConfig`] but
/// with a top-rate suited to ~20-token responses (`τ = 0.01` would give
/// `k = 0` everywhere).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingSection {
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mode: ShapingMode,
}

impl Default for ShapingSection {
    fn default() -> Self {
        ShapingSection {
            tau: 0.2,
            beta1: 0.4,
            beta2: 0.4,
            mode: ShapingMode::FullCes,
        }
    }
}

impl ShapingSection {
    pub fn config(&self) -> ShapingConfig {
        ShapingConfig {
            tau: self.tau,
            beta1: self.beta1,
            beta2: self.beta2,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub questions: usize,
    pub generations: usize,
    pub temperature: f64,
    pub seed: u64,
    pub tier_mix: TierMix,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            questions: 200,
            generations: 4,
            temperature: 0.4,
            seed: 1234,
            tier_mix: TierMix::Mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub rollouts: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            metrics: PathBuf::from("metrics.jsonl"),
            checkpoint: PathBuf::from("policy.ckpt"),
            rollouts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub policy: PolicySection,
    pub pretrain: PretrainConfig,
    pub shaping: ShapingSection,
    pub clip: ClipConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

fn script_len(filler_run: usize, ruminations: usize) -> usize {
    crate::tasks::PROMPT_WIDTH + 3 + ruminations * (filler_run + 2)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CesError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CesError::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let positive = [
            ("train.prompts_per_batch", t.prompts_per_batch),
            ("train.budget", t.budget),
            ("policy.window", self.policy.window),
            ("policy.buckets", self.policy.buckets),
            ("eval.generations", self.eval.generations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CesError::Config(format!("{name} must be positive")));
            }
        }
        if t.samples_per_prompt < 2 {
            return Err(CesError::Config("train.samples_per_prompt must be at least 2".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CesError::Config("train.lr must be positive".into()));
        }
        if self.policy.arch == ArchKind::Hidden && self.policy.hidden_units == 0 {
            return Err(CesError::Config("policy.hidden_units must be positive".into()));
        }
        if !(self.policy.temperature.is_finite() && self.policy.temperature > 0.0)
            || !(self.eval.temperature.is_finite() && self.eval.temperature > 0.0) {
            return Err(CesError::Config("temperatures must be positive".into()));
        }
        self.shaping.config().validate()?;
        self.clip.validate()?;
        self.pretrain.validate()?;
        if t.init == InitKind::PretrainVerbose {
            let p = &self.pretrain;
            if p.filler_run + 2 > self.policy.window {
                return Err(CesError::Config(
                    "pretrain.filler_run + 2 must not exceed policy.window".into(),
                ));
            }
            if script_len(p.filler_run, p.max_ruminations) > t.budget {
                return Err(CesError::Config(
                    "longest scripted response exceeds train.budget".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::arithmetic()
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::new(
            self.vocab().size(),
            self.policy.window,
            self.policy.buckets,
            self.train.budget,
        )
    }

    pub fn samples_per_step(&self) -> usize {
        self.train.prompts_per_batch * self.train.samples_per_prompt
    }

    pub fn total_steps(&self) -> usize {
        self.train.total_samples / self.samples_per_step()
    }
}
