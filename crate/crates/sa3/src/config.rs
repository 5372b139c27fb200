//! JSON run configuration. Every field is optional; omitted fields take
//! the desk-scale defaults. Command-line flags are applied afterwards.

use std::path::{Path, PathBuf};

use sa3_core::model::AttentionMode;
use sa3_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LOG_INTERVAL: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lambda_dc: f64,
    pub lambda_ic: f64,
    pub lambda_cls: f64,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub total_iters: usize,
    pub batch_per_domain: usize,
    pub seed: u64,
    pub attention: String,
    pub source_only: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda_dc: t.lambda_dc,
            lambda_ic: t.lambda_ic,
            lambda_cls: t.lambda_cls,
            base_lr: t.base_lr,
            lr_milestones: t.lr_milestones,
            lr_factor: t.lr_factor,
            momentum: t.momentum,
            total_iters: t.total_iters,
            batch_per_domain: t.batch_per_domain,
            seed: t.seed,
            attention: t.attention_mode.as_str().to_string(),
            source_only: t.source_only,
            data: None,
            out: None,
            log_interval: DEFAULT_LOG_INTERVAL,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn attention_mode(&self) -> Result<AttentionMode> {
        AttentionMode::parse(&self.attention).map_err(|_| {
            Error::validation("attention", format!("{:?} is not one of none, fixed_k, cis", self.attention))
        })
    }

    /// Checks every field and converts to the trainer's configuration.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lambda_dc: self.lambda_dc,
            lambda_ic: self.lambda_ic,
            lambda_cls: self.lambda_cls,
            base_lr: self.base_lr,
            lr_milestones: self.lr_milestones.clone(),
            lr_factor: self.lr_factor,
            momentum: self.momentum,
            total_iters: self.total_iters,
            batch_per_domain: self.batch_per_domain,
            seed: self.seed,
            attention_mode: self.attention_mode()?,
            source_only: self.source_only,
        };
        cfg.validate().map_err(|e| Error::validation("config", e.to_string()))?;
        if self.log_interval == 0 {
            return Err(Error::validation("log_interval", "must be at least 1"));
        }
        Ok(cfg)
    }
}
