//! Lightweight retention compressor.
//!
//! A single pre-norm transformer block with bidirectional multi-head
//! attention over the concatenated visual and text tokens, an identity path
//! from the raw block input to its output, and a logistic token classifier
//! over the visual positions. Gradients are derived by hand per layer and
//! certified against finite differences by [`grad_check`].

mod gradcheck;
mod model;
mod params;
mod select;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{GhmConfig, LossArm};

pub use gradcheck::{grad_check, grad_check_suite, grad_check_with, random_case, GradCheckDraw, GradCheckReport};
pub use model::{backward, forward, forward_cached, ForwardCache, ForwardOutput};
pub use params::{init_params, read_params, write_params, CompressorParams, TENSOR_NAMES};
pub use select::{adapt_dim, ratio_to_r, select_top_r};
pub use train::{
    batch_objective, train, validation_split, write_history_csv, EpochRecord, Objective, TrainItem,
    TrainOutcome,
};

/// Where initial block weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    #[default]
    Random,
    /// Parameter file whose block weights are copied (classifier excluded).
    Donor(PathBuf),
}

/// Scope over which gradient density is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DensityScope {
    #[default]
    Batch,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Rotary position encoding on queries and keys.
    pub use_positions: bool,
    /// Ignore the text stream entirely.
    pub no_text: bool,
    pub init: InitSource,
    pub init_std: f64,
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub ghm: GhmConfig,
    pub loss: LossArm,
    pub density_scope: DensityScope,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig {
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            use_positions: false,
            no_text: false,
            init: InitSource::Random,
            init_std: 0.02,
            epochs: 30,
            lr0: 0.003,
            batch_size: 16,
            alpha: 1.0,
            ghm: GhmConfig::default(),
            loss: LossArm::default(),
            density_scope: DensityScope::Batch,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.use_positions && !(self.d_model / self.heads).is_multiple_of(2) {
            return Err(Error::InvalidConfig("rotary positions need an even head width".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
        }
        self.ghm.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Cosine-decayed learning rate at `step` of `total`.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        let t = step as f64 / total.max(1) as f64;
        self.lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    }
}
