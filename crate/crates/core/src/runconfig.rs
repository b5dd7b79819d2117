//! Run configuration: `key = value` pairs under `[model]`, `[train]`,
//! `[distill]`, `[prune]` and `[bench]`. Unknown keys are rejected and
//! every key has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::read_file;
use crate::config::ModelConfig;
use crate::distill::{CosineMode, Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::prune::{PruneConfig, Reduction, Threshold};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub prune: PruneSection,
    pub bench: BenchSection,
}

/// Data generation, shared optimizer settings and teacher training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub dataset_size: usize,
    pub noise: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_warmup_epochs: usize,
    /// 0 uses every logical CPU.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_size: 500,
            noise: 0.3,
            batch_size: 32,
            weight_decay: 0.05,
            min_lr: 1e-6,
            teacher_epochs: 30,
            teacher_lr: 1e-3,
            teacher_warmup_epochs: 2,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub lambda: f64,
    pub cosine: CosineMode,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            cosine: CosineMode::PerToken,
            epochs: 50,
            lr: 5e-4,
            warmup_epochs: 5,
            warmup_lr: 1e-5,
            finetune_epochs: 20,
            finetune_lr: 5e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    #[default]
    Absolute,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub reg_coeff: f64,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub reduction: Reduction,
    pub regularize_epochs: usize,
    pub regularize_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            reg_coeff: 1e-4,
            threshold: 1e-4,
            threshold_mode: ThresholdMode::Absolute,
            reduction: Reduction::Sum,
            regularize_epochs: 10,
            regularize_lr: 5e-5,
            finetune_epochs: 10,
            finetune_lr: 5e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub warmups: usize,
    pub runs: usize,
    pub threads: usize,
    pub batch: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            warmups: 30,
            runs: 100,
            threads: 1,
            batch: 1,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::ConfigParse(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    fn base(&self, phase: Phase) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            weight_decay: self.train.weight_decay,
            min_lr: self.train.min_lr,
            seed: self.train.seed,
            ..TrainConfig::new(phase)
        }
    }

    pub fn teacher_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.teacher_epochs,
            lr: self.train.teacher_lr,
            warmup_epochs: self.train.teacher_warmup_epochs,
            ..self.base(Phase::Teacher)
        }
    }

    pub fn distill_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.distill.epochs,
            lr: self.distill.lr,
            warmup_epochs: self.distill.warmup_epochs,
            warmup_lr: self.distill.warmup_lr,
            lambda: self.distill.lambda,
            cosine: self.distill.cosine,
            ..self.base(Phase::Distill)
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.distill.finetune_epochs,
            lr: self.distill.finetune_lr,
            warmup_epochs: 0,
            ..self.base(Phase::Finetune)
        }
    }

    pub fn threshold(&self) -> Threshold {
        match self.prune.threshold_mode {
            ThresholdMode::Absolute => Threshold::Absolute(self.prune.threshold),
            ThresholdMode::Relative => Threshold::Relative(self.prune.threshold),
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            regularize: TrainConfig {
                epochs: self.prune.regularize_epochs,
                lr: self.prune.regularize_lr,
                warmup_epochs: 0,
                reg_coeff: self.prune.reg_coeff,
                reduction: self.prune.reduction,
                ..self.base(Phase::PruneRegularize)
            },
            threshold: self.threshold(),
            finetune: TrainConfig {
                epochs: self.prune.finetune_epochs,
                lr: self.prune.finetune_lr,
                warmup_epochs: 0,
                ..self.base(Phase::PruneFinetune)
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.distill.lambda, 1.0);
        assert_eq!(c.prune.reg_coeff, 1e-4);
        assert_eq!(c.prune.threshold, 1e-4);
        assert_eq!(c.train.weight_decay, 0.05);
        assert_eq!(c.distill.lr, 5e-4);
        assert_eq!((c.distill.warmup_epochs, c.distill.warmup_lr), (5, 1e-5));
        assert_eq!(c.distill.finetune_lr, 5e-5);
        assert_eq!((c.distill.epochs, c.distill.finetune_epochs), (50, 20));
        assert_eq!((c.bench.warmups, c.bench.runs, c.bench.threads), (30, 100, 1));
        assert_eq!(c.threshold(), Threshold::Absolute(1e-4));
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.model = ModelConfig::deit_tiny();
        c.distill.cosine = CosineMode::Flatten;
        c.prune.threshold_mode = ThresholdMode::Relative;
        c.prune.reduction = Reduction::Mean;
        c.train.seed = 42;
        let text = c.render().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert!(text.contains("[prune]"));
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::parse("[prune]\nthreshold = 0.3\nthreshold_mode = \"relative\"\n").unwrap();
        assert_eq!(c.threshold(), Threshold::Relative(0.3));
        assert_eq!(c.model, ModelConfig::desk());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        assert!(RunConfig::parse("[prune]\nthreshhold = 1\n").is_err());
        assert!(RunConfig::parse("[optimizer]\nlr = 1\n").is_err());
        assert!(RunConfig::parse("[model]\ndim = 30\nheads = 4\nhead_dim = 8\n").is_err());
    }

    #[test]
    fn phase_configs_pick_up_sections() {
        let c = RunConfig::parse("[train]\nbatch_size = 8\nseed = 3\n[distill]\nlambda = 0.5\n").unwrap();
        let d = c.distill_config();
        assert_eq!((d.phase, d.batch_size, d.seed, d.lambda), (Phase::Distill, 8, 3, 0.5));
        let p = c.prune_config();
        assert_eq!(p.regularize.reg_coeff, 1e-4);
        assert_eq!(p.finetune.phase, Phase::PruneFinetune);
        assert_eq!(c.teacher_config().phase, Phase::Teacher);
    }
}
