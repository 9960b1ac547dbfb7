//! Experiment configuration file.
//!
//! One JSON document with a section per stage. Unknown keys are rejected.
//! Relative paths are resolved against the directory holding the file.
//! Per-stage seeds are derived from the root `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use inrmark_core::codec::{DecoderConfig, EncoderConfig, OptimizerKind, PretrainConfig, StrengthPhase};
use inrmark_core::finetune::{FinetuneConfig, Resolution};
use inrmark_core::optim::AdamConfig;
use inrmark_core::siren::{FitOptions, InrConfig};
use inrmark_core::DistortionSpec;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit: Option<FitSection>,
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub embed: Option<EmbedSection>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub image: PathBuf,
    #[serde(default = "defaults::hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "defaults::hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "defaults::omega")]
    pub first_layer_omega: f64,
    #[serde(default = "defaults::fit_steps")]
    pub steps: usize,
    #[serde(default = "defaults::fit_lr")]
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Folder of PNG/JPEG images.
    pub dataset: PathBuf,
    /// Images (taken from the end of the sorted listing) kept out of training.
    #[serde(default)]
    pub held_out: usize,
    #[serde(default = "defaults::pretrain_resolution")]
    pub resolution: usize,
    #[serde(default = "defaults::message_bits")]
    pub message_bits: usize,
    #[serde(default = "defaults::strength")]
    pub strength: f64,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "defaults::pretrain_lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::min_lr")]
    pub min_learning_rate: f64,
    #[serde(default = "defaults::pretrain_epochs")]
    pub epochs: usize,
    /// Strength phases run before the main `epochs`.
    #[serde(default)]
    pub warmup: Vec<StrengthPhase>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::pretrain_pool")]
    pub pool: Vec<DistortionSpec>,
    #[serde(default = "defaults::decoder_widths")]
    pub decoder_widths: Vec<usize>,
    #[serde(default = "defaults::decoder_strides")]
    pub decoder_strides: Vec<usize>,
    #[serde(default = "defaults::encoder_tile")]
    pub encoder_tile: usize,
    #[serde(default = "defaults::encoder_tile_channels")]
    pub encoder_tile_channels: usize,
    #[serde(default = "defaults::encoder_hidden")]
    pub encoder_hidden: usize,
    /// Write the resumable training state every this many epochs.
    #[serde(default = "defaults::save_every")]
    pub save_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    pub fit_checkpoint: PathBuf,
    pub decoder_checkpoint: PathBuf,
    #[serde(default = "defaults::resolutions")]
    pub resolutions: Vec<Resolution>,
    #[serde(default = "defaults::eval_pool")]
    pub pool: Vec<DistortionSpec>,
    #[serde(default = "defaults::lambda_msg")]
    pub lambda_msg: f64,
    #[serde(default = "defaults::lambda_img")]
    pub lambda_img: f64,
    #[serde(default = "defaults::finetune_lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::finetune_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default = "defaults::eval_trials")]
    pub eval_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Output of `embed`.
    pub checkpoint: PathBuf,
    #[serde(default = "defaults::resolutions")]
    pub resolutions: Vec<Resolution>,
    #[serde(default = "defaults::eval_pool")]
    pub attacks: Vec<DistortionSpec>,
    #[serde(default = "defaults::eval_trials")]
    pub trials: usize,
}

mod defaults {
    use super::*;

    pub fn hidden_layers() -> usize {
        InrConfig::default().hidden_layers
    }
    pub fn hidden_width() -> usize {
        InrConfig::default().hidden_width
    }
    pub fn omega() -> f64 {
        InrConfig::default().first_layer_omega
    }
    pub fn fit_steps() -> usize {
        FitOptions::default().steps
    }
    pub fn fit_lr() -> f64 {
        FitOptions::default().adam.learning_rate
    }
    pub fn pretrain_resolution() -> usize {
        PretrainConfig::default().resolution
    }
    pub fn message_bits() -> usize {
        PretrainConfig::default().message_bits
    }
    pub fn strength() -> f64 {
        PretrainConfig::default().strength
    }
    pub fn optimizer() -> OptimizerKind {
        PretrainConfig::default().optimizer
    }
    pub fn pretrain_lr() -> f64 {
        PretrainConfig::default().learning_rate
    }
    pub fn min_lr() -> f64 {
        PretrainConfig::default().min_learning_rate
    }
    pub fn pretrain_epochs() -> usize {
        PretrainConfig::default().epochs
    }
    pub fn batch_size() -> usize {
        PretrainConfig::default().batch_size
    }
    pub fn pretrain_pool() -> Vec<DistortionSpec> {
        PretrainConfig::default().pool
    }
    pub fn decoder_widths() -> Vec<usize> {
        DecoderConfig::default().widths
    }
    pub fn decoder_strides() -> Vec<usize> {
        DecoderConfig::default().strides
    }
    pub fn encoder_tile() -> usize {
        EncoderConfig::default().tile
    }
    pub fn encoder_tile_channels() -> usize {
        EncoderConfig::default().tile_channels
    }
    pub fn encoder_hidden() -> usize {
        EncoderConfig::default().hidden
    }
    pub fn save_every() -> usize {
        10
    }
    pub fn resolutions() -> Vec<Resolution> {
        FinetuneConfig::default().resolutions
    }
    pub fn eval_pool() -> Vec<DistortionSpec> {
        FinetuneConfig::default().pool
    }
    pub fn lambda_msg() -> f64 {
        FinetuneConfig::default().lambda_msg
    }
    pub fn lambda_img() -> f64 {
        FinetuneConfig::default().lambda_img
    }
    pub fn finetune_lr() -> f64 {
        FinetuneConfig::default().learning_rate
    }
    pub fn finetune_epochs() -> usize {
        FinetuneConfig::default().epochs
    }
    pub fn eval_every() -> usize {
        FinetuneConfig::default().eval_every
    }
    pub fn eval_trials() -> usize {
        FinetuneConfig::default().eval_trials
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSeed {
    Fit = 1,
    Pretrain = 2,
    Embed = 3,
    Evaluate = 4,
    Attack = 5,
}

/// Independent per-stage seed derived from the root seed.
pub fn stage_seed(root: u64, stage: StageSeed) -> u64 {
    inrmark_core::derive_seed(root, stage as u64)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))
    }

    /// Loads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(msg) => PipelineError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(s) = &mut self.fit {
            fix(&mut s.image);
        }
        if let Some(s) = &mut self.pretrain {
            fix(&mut s.dataset);
        }
        if let Some(s) = &mut self.embed {
            fix(&mut s.fit_checkpoint);
            fix(&mut s.decoder_checkpoint);
        }
        if let Some(s) = &mut self.evaluate {
            fix(&mut s.checkpoint);
        }
    }

    pub fn fit_section(&self) -> Result<&FitSection> {
        self.fit.as_ref().ok_or_else(|| missing("fit"))
    }

    pub fn pretrain_section(&self) -> Result<&PretrainSection> {
        self.pretrain.as_ref().ok_or_else(|| missing("pretrain"))
    }

    pub fn embed_section(&self) -> Result<&EmbedSection> {
        self.embed.as_ref().ok_or_else(|| missing("embed"))
    }

    pub fn evaluate_section(&self) -> Result<&EvaluateSection> {
        self.evaluate.as_ref().ok_or_else(|| missing("evaluate"))
    }

    pub fn inr_config(&self) -> Result<InrConfig> {
        let s = self.fit_section()?;
        let cfg = InrConfig {
            hidden_layers: s.hidden_layers,
            hidden_width: s.hidden_width,
            first_layer_omega: s.first_layer_omega,
            seed: stage_seed(self.seed, StageSeed::Fit),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fit_options(&self) -> Result<FitOptions> {
        let s = self.fit_section()?;
        if !(s.learning_rate > 0.0) {
            return Err(PipelineError::Config("fit.learning_rate must be positive".into()));
        }
        Ok(FitOptions {
            adam: AdamConfig::with_lr(s.learning_rate),
            steps: s.steps,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let s = self.pretrain_section()?;
        let cfg = PretrainConfig {
            resolution: s.resolution,
            message_bits: s.message_bits,
            strength: s.strength,
            optimizer: s.optimizer,
            learning_rate: s.learning_rate,
            min_learning_rate: s.min_learning_rate,
            epochs: s.epochs,
            warmup: s.warmup.clone(),
            batch_size: s.batch_size,
            pool: s.pool.clone(),
            decoder: DecoderConfig {
                message_bits: s.message_bits,
                widths: s.decoder_widths.clone(),
                strides: s.decoder_strides.clone(),
                sync_period: s.encoder_tile,
                canonical_size: Some(s.resolution),
            },
            encoder: EncoderConfig {
                message_bits: s.message_bits,
                tile: s.encoder_tile,
                tile_channels: s.encoder_tile_channels,
                hidden: s.encoder_hidden,
            },
            seed: stage_seed(self.seed, StageSeed::Pretrain),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let s = self.embed_section()?;
        let cfg = FinetuneConfig {
            resolutions: s.resolutions.clone(),
            pool: s.pool.clone(),
            lambda_msg: s.lambda_msg,
            lambda_img: s.lambda_img,
            learning_rate: s.learning_rate,
            epochs: s.epochs,
            eval_every: s.eval_every,
            eval_trials: s.eval_trials,
            seed: stage_seed(self.seed, StageSeed::Embed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn missing(section: &str) -> PipelineError {
    PipelineError::Config(format!("config has no \"{section}\" section"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        let err = ExperimentConfig::from_json(r#"{"fit": {"image": "a.png", "widht": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
    }

    #[test]
    fn shipped_desk_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
        let cfg = ExperimentConfig::load(&path).unwrap();
        cfg.inr_config().unwrap();
        cfg.fit_options().unwrap();
        assert_eq!(cfg.pretrain_config().unwrap().total_epochs(), 80);
        assert_eq!(cfg.finetune_config().unwrap().epochs, 600);
    }

    #[test]
    fn defaults_fill_sections() {
        let cfg = ExperimentConfig::from_json(r#"{"fit": {"image": "a.png"}, "pretrain": {"dataset": "d"}}"#).unwrap();
        assert_eq!(cfg.inr_config().unwrap().hidden_width, 256);
        assert_eq!(cfg.fit_options().unwrap().steps, 5000);
        let p = cfg.pretrain_config().unwrap();
        assert_eq!(p.message_bits, 30);
        assert_eq!(p.pool.len(), 7);
        assert!(cfg.finetune_config().is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let a = stage_seed(7, StageSeed::Fit);
        assert_eq!(a, stage_seed(7, StageSeed::Fit));
        assert_ne!(a, stage_seed(7, StageSeed::Pretrain));
        assert_ne!(a, stage_seed(8, StageSeed::Fit));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = ExperimentConfig::from_json(r#"{"fit": {"image": "a.png"}, "evaluate": {"checkpoint": "/abs/w.ckpt"}}"#).unwrap();
        cfg.resolve_paths(Path::new("/runs/x"));
        assert_eq!(cfg.fit.unwrap().image, PathBuf::from("/runs/x/a.png"));
        assert_eq!(cfg.evaluate.unwrap().checkpoint, PathBuf::from("/abs/w.ckpt"));
    }

    #[test]
    fn attack_specs_parse_in_config() {
        let cfg = ExperimentConfig::from_json(
            r#"{"embed": {"fit_checkpoint": "f", "decoder_checkpoint": "d", "resolutions": [[64,64],[80,80]], "pool": ["identity", "gn:0.05", "resize:0.5"]}}"#,
        )
        .unwrap();
        let f = cfg.finetune_config().unwrap();
        assert_eq!(f.resolutions, vec![(64, 64), (80, 80)]);
        assert_eq!(f.pool[1], DistortionSpec::gaussian_noise(0.05));
        assert!(ExperimentConfig::from_json(r#"{"embed": {"fit_checkpoint": "f", "decoder_checkpoint": "d", "pool": ["blur:3"]}}"#).is_err());
    }
}
