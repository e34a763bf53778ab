//! End-to-end training for the layered codec.
//!
//! Training minimizes a rate–distortion objective over randomly sampled
//! multi-scale pyramids. A run proceeds in stages:
//!
//! 1. [`TrainStage::PretrainBl`] — train the base-layer codec alone on
//!    single-layer pyramids (rate + distortion for layer 0).
//! 2. [`TrainStage::PretrainLiff`] — train the implicit predictor as a pure
//!    upsampler (distortion only, base layer frozen).
//! 3. [`TrainStage::PretrainRc`] — train the residual codec with the
//!    predictor and base layer frozen.
//! 4. [`TrainStage::Joint`] — train predictor and residual codec together;
//!    the base layer stays frozen throughout all enhancement stages.
//!
//! The loss tape is built per sample by [`loss::combined_rd_loss`], gradients
//! are averaged over a batch, and parameters are updated with [`optim::Adam`].
//! All randomness derives from a single seed: step `s` uses a ChaCha20 stream
//! `s + 1` (stream 0 is reserved for model initialization), so a resumed run
//! continues exactly where a continuous run would be.

pub mod loss;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use loss::{combined_rd_loss, LayerTerms, LossBreakdown};
pub use optim::Adam;
pub use sampler::{load_dataset, sample_pyramid};
pub use trainer::{write_log, StepRecord, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distortion scale: mean squared error on `[0, 1]` samples is multiplied by
/// `255^2` so reported distortions refer to 8-bit amplitude units.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

/// Which parameter groups a training stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStage {
    /// Base-layer codec only, on single-layer pyramids.
    PretrainBl,
    /// Implicit predictor as an upsampler; no rate terms.
    PretrainLiff,
    /// Residual codec; predictor and base layer frozen.
    PretrainRc,
    /// Predictor and residual codec together; base layer frozen.
    Joint,
}

impl TrainStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainStage::PretrainBl => "pretrain-bl",
            TrainStage::PretrainLiff => "pretrain-liff",
            TrainStage::PretrainRc => "pretrain-rc",
            TrainStage::Joint => "joint",
        }
    }

    /// Stages other than base-layer pretraining start from an existing
    /// base-layer checkpoint.
    pub fn needs_base(&self) -> bool {
        !matches!(self, TrainStage::PretrainBl)
    }
}

impl std::str::FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain-bl" => Ok(TrainStage::PretrainBl),
            "pretrain-liff" => Ok(TrainStage::PretrainLiff),
            "pretrain-rc" => Ok(TrainStage::PretrainRc),
            "joint" => Ok(TrainStage::Joint),
            other => Err(Error::invalid(format!(
                "unknown training stage {other:?}; expected one of \
                 pretrain-bl, pretrain-liff, pretrain-rc, joint"
            ))),
        }
    }
}

/// Hyper-parameters of a training run. Serialized into checkpoints so a run
/// can be resumed from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: TrainStage,
    /// Rate–distortion trade-off weight on the scaled distortion term.
    pub lambda: f64,
    /// Number of enhancement layers per sampled pyramid (ignored by
    /// `pretrain-bl`, which always samples single-layer pyramids).
    pub layers: usize,
    /// Total steps the run should reach.
    pub steps: u64,
    pub batch_size: usize,
    /// Square crop side; clamped to the image if it is smaller.
    pub crop_size: usize,
    /// Per-layer scale factors are drawn uniformly from this range.
    pub scale_min: f64,
    pub scale_max: f64,
    pub lr: f64,
    /// Steps per plateau window; the learning rate halves when a window's
    /// mean loss fails to improve on the best previous window. `0` disables
    /// the schedule.
    pub plateau_window: u64,
    pub min_lr: f64,
    /// Seed for model initialization and all per-step randomness.
    pub seed: u64,
    /// Emit a progress record every this many steps (the final step is
    /// always emitted). `0` means only the final step.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: TrainStage::Joint,
            lambda: 0.01,
            layers: 3,
            steps: 0,
            batch_size: 8,
            crop_size: 128,
            scale_min: 1.2,
            scale_max: 2.0,
            lr: 1e-4,
            plateau_window: 500,
            min_lr: 1e-6,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if self.stage != TrainStage::PretrainBl && self.layers == 0 {
            return Err(Error::invalid(
                "enhancement stages need at least one enhancement layer",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.crop_size == 0 {
            return Err(Error::invalid("crop_size must be positive"));
        }
        if !(self.scale_min > 1.0) {
            return Err(Error::invalid("scale_min must be greater than 1"));
        }
        if !(self.scale_max >= self.scale_min) {
            return Err(Error::invalid("scale_max must be at least scale_min"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return Err(Error::invalid("min_lr must be in (0, lr]"));
        }
        Ok(())
    }
}
