//! Desk-scale implementation of a three-stage healthcare prediction pipeline.
//!
//! Stage 1 pretrains a collaborative sequence model (`pcm`) on longitudinal
//! EHR-shaped records. Stage 2 (`drl`) aligns the learned collaborative
//! disease embeddings with frozen text embeddings (`textemb`) in a shared
//! residual-quantized code space, using condition-aware calibration,
//! task-aware contrastive calibration, and a co-teacher EMA codebook update.
//! Stage 3 substitutes text-derived representations for rare diseases and
//! fine-tunes the predictor. Everything runs on an in-crate f64 tensor and
//! reverse-mode autodiff substrate (`numerics`) so results are deterministic
//! and gradient-checkable.

pub mod checkpoint;
pub mod drl;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pcm;
pub mod pipeline;
pub mod rng;
pub mod textemb;

pub use error::{Result, UdcError};
