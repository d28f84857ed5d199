//! Run configuration, loaded from JSON with every field defaulted.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::backbone::{LrSchedule, ModelShape};
use crate::data::DatasetSpec;
use crate::loss::Normalization;
use crate::selection::{ConfusionSource, SelectionMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Seed for model initialization, anchors, sampling and augmentation.
    pub seed: u64,

    pub lambda_s: f32,
    pub lambda_u: f32,
    pub lambda_ctr: f32,

    pub tau: f32,
    /// Confidence threshold for memory-bank admission and unlabeled
    /// contrastive pixels.
    pub phi: f32,
    pub bank_capacity: usize,
    pub top_k: usize,
    pub prototype_alpha: f32,
    pub ema_decay: f32,

    pub base_lr: f32,
    pub momentum: f32,
    pub lr_power: f32,
    /// Use `1 - (t/T)^power` instead of `(1 - t/T)^power`.
    pub literal_poly: bool,
    pub batch_size: usize,
    pub max_iter: usize,

    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Dropout probability inside the projection head.
    pub dropout: f32,

    /// Steps of prototype accumulation before matching and contrastive
    /// losses start.
    pub warmup: usize,
    pub rematch_every: usize,
    pub eval_every: usize,
    /// Per-class cap on contrastive pixels sampled per step.
    pub samples_per_class: usize,

    pub normalization: Normalization,
    pub selection: SelectionMode,
    pub confusion: ConfusionSource,
    pub contrastive: bool,
    /// Apply contrastive losses to Gen-Student only.
    pub contrastive_gen_only: bool,
    /// Gen-Teacher supervises both students; Pro-Teacher is unused.
    pub single_teacher: bool,

    pub augment: AugmentConfig,
    /// Classes summarized as the tail; defaults to those rarer than `1 / C`.
    pub tail_classes: Option<Vec<usize>>,
    pub max_consecutive_skips: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::desk_scale(0),
            seed: 0,
            lambda_s: 1.0,
            lambda_u: 1.0,
            lambda_ctr: 0.1,
            tau: 0.5,
            phi: 0.95,
            bank_capacity: 256,
            top_k: 32,
            prototype_alpha: 0.99,
            ema_decay: 0.99,
            base_lr: 0.01,
            momentum: 0.9,
            lr_power: 0.9,
            literal_poly: false,
            batch_size: 4,
            max_iter: 3000,
            hidden_dim: 32,
            feature_dim: 16,
            dropout: 0.0,
            warmup: 500,
            rematch_every: 50,
            eval_every: 250,
            samples_per_class: 64,
            normalization: Normalization::AllPixels,
            selection: SelectionMode::ConsHmis,
            confusion: ConfusionSource::PerBatch,
            contrastive: true,
            contrastive_gen_only: false,
            single_teacher: false,
            augment: AugmentConfig::default(),
            tail_classes: None,
            max_consecutive_skips: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Supervised-only variant of this config.
    pub fn supervised_baseline(&self) -> Self {
        Self { lambda_u: 0.0, lambda_ctr: 0.0, ..self.clone() }
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.dataset.validate() {
            problems.push(e.to_string());
        }
        let c = self.dataset.num_classes;
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_u", self.lambda_u), ("lambda_ctr", self.lambda_ctr)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            problems.push(format!("phi must lie in (0, 1), got {}", self.phi));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("prototype_alpha", self.prototype_alpha),
            ("ema_decay", self.ema_decay),
            ("momentum", self.momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            problems.push(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if !(self.lr_power >= 0.0 && self.lr_power.is_finite()) {
            problems.push(format!("lr_power must be >= 0, got {}", self.lr_power));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("hidden_dim", self.hidden_dim),
            ("bank_capacity", self.bank_capacity),
            ("rematch_every", self.rematch_every),
            ("eval_every", self.eval_every),
            ("max_consecutive_skips", self.max_consecutive_skips),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.feature_dim < 2 {
            problems.push(format!("feature_dim must be at least 2, got {}", self.feature_dim));
        }
        if self.contrastive && c < 2 {
            problems.push("contrastive learning needs at least 2 classes".into());
        }
        if let Some(tail) = &self.tail_classes {
            if let Some(bad) = tail.iter().find(|&&t| t >= c) {
                problems.push(format!("tail class {bad} out of range for {c} classes"));
            }
        }
        if let ConfusionSource::Ema { decay } = self.confusion {
            if !(0.0..=1.0).contains(&decay) {
                problems.push(format!("confusion decay must lie in [0, 1], got {decay}"));
            }
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) {
            problems.push(format!("augment.flip_prob must lie in [0, 1], got {}", a.flip_prob));
        }
        if !(a.area_ratio.0 > 0.0 && a.area_ratio.0 <= a.area_ratio.1 && a.area_ratio.1 <= 1.0) {
            problems.push("augment.area_ratio must satisfy 0 < lo <= hi <= 1".into());
        }
        if !(a.aspect_ratio.0 > 0.0 && a.aspect_ratio.0 <= a.aspect_ratio.1) {
            problems.push("augment.aspect_ratio must satisfy 0 < lo <= hi".into());
        }
        if a.jitter < 0.0 {
            problems.push("augment.jitter must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            in_channels: self.dataset.channels,
            hidden: self.hidden_dim,
            classes: self.dataset.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            power: self.lr_power,
            max_iter: self.max_iter,
            literal: self.literal_poly,
        }
    }

    pub fn tail(&self) -> Vec<usize> {
        self.tail_classes
            .clone()
            .unwrap_or_else(|| crate::metrics::default_tail_classes(&self.dataset.class_frequencies))
    }

    /// Whether the unlabeled branch runs at all.
    pub fn uses_unlabeled(&self) -> bool {
        self.lambda_u > 0.0 || self.uses_contrastive()
    }

    pub fn uses_contrastive(&self) -> bool {
        self.contrastive && self.lambda_ctr > 0.0
    }
}
