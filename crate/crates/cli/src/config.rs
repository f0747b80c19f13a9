//! Flat JSON run configuration. Every key is optional with a documented
//! default; unknown keys are a hard error.

use std::path::Path;

use serde::Deserialize;

use sscd_core::fusion::DiffMode;
use sscd_core::model::{AttnKind, FusionKind, ModelConfig};
use sscd_core::train::TrainConfig;

use crate::CliError;

fn d_depths() -> [usize; 4] {
    [1, 1, 1, 1]
}
fn d_channels() -> [usize; 4] {
    [8, 16, 32, 64]
}
fn d_heads() -> [usize; 4] {
    [1, 2, 4, 8]
}
fn d_gamma() -> usize {
    2
}
fn d_input_size() -> usize {
    64
}
fn d_num_classes() -> usize {
    2
}
fn d_decoder_dim() -> usize {
    32
}
fn d_attention() -> String {
    "sparse".into()
}
fn d_fusion() -> String {
    "ceff".into()
}
fn d_lr0() -> f64 {
    4.1e-4
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_batch_size() -> usize {
    4
}
fn d_epochs() -> usize {
    30
}
fn d_val_fraction() -> f64 {
    0.2
}
fn d_true() -> bool {
    true
}

/// Merged model + training configuration with flat keys.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_depths")]
    pub stage_depths: [usize; 4],
    #[serde(default = "d_channels")]
    pub stage_channels: [usize; 4],
    #[serde(default = "d_heads")]
    pub stage_heads: [usize; 4],
    #[serde(default = "d_gamma")]
    pub gamma: usize,
    #[serde(default = "d_input_size")]
    pub input_size: usize,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default = "d_decoder_dim")]
    pub decoder_dim: usize,
    /// "sparse" or "dense"
    #[serde(default = "d_attention")]
    pub attention: String,
    /// "ceff", "subtract", "add", or "concat"
    #[serde(default = "d_fusion")]
    pub fusion: String,
    #[serde(default)]
    pub hard_clip: bool,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Omitted: one is drawn from entropy and printed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "d_true")]
    pub flip: bool,
    #[serde(default)]
    pub scale_crop: bool,
    #[serde(default)]
    pub blur: bool,
    #[serde(default)]
    pub color_jitter: bool,
    /// Tail fraction of the training directory held out for validation
    /// when no separate validation directory is given.
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {}", path.display(), e))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config()?
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.train_config(0)
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::Validation(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let attention = match self.attention.as_str() {
            "sparse" => AttnKind::Sparse,
            "dense" => AttnKind::Dense,
            other => {
                return Err(CliError::Validation(format!(
                    "unknown attention kind '{}' (expected sparse|dense)",
                    other
                )))
            }
        };
        let fusion = match self.fusion.as_str() {
            "ceff" => FusionKind::Ceff,
            other => FusionKind::Diff(
                DiffMode::parse(other).map_err(|e| CliError::Validation(e.to_string()))?,
            ),
        };
        Ok(ModelConfig {
            stage_depths: self.stage_depths,
            stage_channels: self.stage_channels,
            stage_heads: self.stage_heads,
            gamma: self.gamma,
            input_size: self.input_size,
            num_classes: self.num_classes,
            decoder_dim: self.decoder_dim,
            attention,
            fusion,
            hard_clip: self.hard_clip,
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            flip: self.flip,
            scale_crop: self.scale_crop,
            blur: self.blur,
            color_jitter: self.color_jitter,
        }
    }
}
