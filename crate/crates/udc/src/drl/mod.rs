//! Discrete representation learning: the second-stage core that aligns
//! collaborative and textual disease representations in a shared residual
//! code space.
//!
//! Both branches encode into the same codebook, a condition calibrator
//! modulates the quantized vector with same-visit context, a bilinear
//! contrastive head ties representations to next-visit targets, and the
//! codebooks themselves are maintained by a cross-view EMA distillation
//! rather than by gradient.

pub mod calibrate;
pub mod distill;
pub mod loss;
pub mod quantizer;
pub mod train;

pub use calibrate::ConditionCalibrator;
pub use distill::{codebook_ema_update, DistillState, EmaBatchItem, Normalizer};
pub use loss::{
    commitment_loss, contrastive_losses, synthetic_negative, target_representation, ContrastiveBatch,
    ContrastiveOut, LossBreakdown,
};
pub use quantizer::{quantize_residual, Codebook, QuantizationResult};
pub use train::{
    load_drl, save_drl, substitute_embedding, substituted_table, total_loss, total_loss_unquantized, train_drl,
    DrlData, DrlEpochLog, DrlModel, DrlSample, DrlTrainLog,
};

use crate::error::{Result, UdcError};

/// Ablation switches, one per removable mechanism.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Skip condition-aware calibration entirely.
    pub nco: bool,
    /// Drop the task-aware contrastive objective.
    pub nt: bool,
    /// Keep only synthetic negatives in contrastive denominators.
    pub nm: bool,
    /// Keep only in-batch domain negatives in contrastive denominators.
    pub ns: bool,
    /// Replace cross-view distillation with plain single-branch EMA.
    pub ncd: bool,
}

/// How the EMA normalizer n_i is maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaNormalizerMode {
    /// EMA of assignment counts; c_i = o_i / n_i is a proper centroid.
    Count,
    /// Verbatim vector accumulation with elementwise guarded division.
    Literal,
}

/// Which vector a code is pulled toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaTargetMode {
    /// Level-l codes move toward their level-l residual inputs.
    Residual,
    /// Every assigned code moves toward the full code sum z.
    LiteralZ,
}

/// Which z feeds the EMA when `LiteralZ` is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaZSource {
    /// The plain code sum, before calibration.
    Pre,
    /// The calibrated vector.
    Post,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrlConfig {
    pub levels: usize,
    pub codes_per_level: usize,
    pub dim: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub eta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub heads: usize,
    pub seed: u64,
    pub flags: AblationFlags,
    pub include_positive_in_denominator: bool,
    pub ema_normalizer: EmaNormalizerMode,
    pub ema_target: EmaTargetMode,
    pub ema_z_source: EmaZSource,
    pub dead_code_floor: f64,
}

impl Default for DrlConfig {
    fn default() -> Self {
        DrlConfig {
            levels: 4,
            codes_per_level: 64,
            dim: 128,
            alpha: 0.25,
            kappa: 0.99,
            eta: 0.2,
            epochs: 50,
            lr: 1e-3,
            batch: 16,
            heads: 4,
            seed: 0,
            flags: AblationFlags::default(),
            include_positive_in_denominator: false,
            ema_normalizer: EmaNormalizerMode::Count,
            ema_target: EmaTargetMode::Residual,
            ema_z_source: EmaZSource::Pre,
            dead_code_floor: 1e-3,
        }
    }
}

impl DrlConfig {
    pub fn with_dim(dim: usize) -> Self {
        DrlConfig { dim, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codes_per_level == 0 || self.dim == 0 {
            return Err(UdcError::Config("codebook needs positive levels, codes, and width".into()));
        }
        if self.alpha <= 0.0 {
            return Err(UdcError::Config(format!("commitment weight must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(UdcError::Config(format!("decay rate must lie in [0,1], got {}", self.kappa)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(UdcError::Config(format!("rarity threshold must lie in (0,1), got {}", self.eta)));
        }
        if self.batch == 0 {
            return Err(UdcError::Config("batch size must be positive".into()));
        }
        if self.heads == 0 {
            return Err(UdcError::Config("attention needs at least one head".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(UdcError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.flags.nm && self.flags.ns {
            return Err(UdcError::Config(
                "the synthetic-only and domain-only contrastive ablations cannot be combined: no denominator would remain".into(),
            ));
        }
        if self.dead_code_floor <= 0.0 {
            return Err(UdcError::Config("dead-code floor must be positive".into()));
        }
        Ok(())
    }
}
