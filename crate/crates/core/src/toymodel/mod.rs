//! Desk-scale retake model.
//!
//! Synthetic blob scenes are rendered directly at the latent token grid
//! (RGB mapped to `[-1, 1]` stands in for VAE latents). A two-block
//! transformer with camera-conditioned attention is trained with the
//! flow-matching objective to produce the target-trajectory video from the
//! source video and both trajectories.

mod dataset;
mod eval;
mod model;
mod scene;
mod train;

pub use dataset::{make_dataset, render_latents, ToyBatchItem};
pub use eval::{
    blob_localization_error, brightest_token, evaluate_pose_proxy, generate_target, KindReport, PoseProxyReport,
};
pub use model::{ModelCache, ModelInput, PhasePath, ToyModel, D_LATENT};
pub use scene::{render_scene, Blob, MovingBlob, SyntheticScene};
pub use train::{
    load_checkpoint, save_checkpoint, train, train_overfit, validation_loss, LogEntry, TrainOutcome, ValidationSet,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowError, TimestepSampler};
use crate::geometry::{GeometryError, Intrinsics};
use crate::roce::{ApplyTo, RoceError};
use crate::rope::RopeError;
use crate::tensor_io::TensorIoError;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite training loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Roce(#[from] RoceError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shapes, data generation, optimization and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub f: usize,
    pub h: usize,
    pub w: usize,
    /// Video frames per latent frame.
    pub stride: usize,
    pub heads: usize,
    pub d_head: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub phase_hidden: usize,
    pub apply_to: ApplyTo,
    pub image_size: u32,
    pub focal: f64,
    pub blobs: usize,
    pub train_items: usize,
    pub val_items: usize,
    pub loc_items: usize,
    pub identity_ratio: f64,
    pub reverse_ratio: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub sample_steps: usize,
    pub seed: u64,
    pub no_camera: bool,
    pub freeze_non_attention: bool,
    pub timestep: TimestepSampler,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            f: 4,
            h: 6,
            w: 6,
            stride: 4,
            heads: 2,
            d_head: 48,
            blocks: 2,
            ff_mult: 2,
            phase_hidden: 64,
            apply_to: ApplyTo::Both,
            image_size: 96,
            focal: 96.0,
            blobs: 6,
            train_items: 2048,
            val_items: 64,
            loc_items: 16,
            identity_ratio: 0.1,
            reverse_ratio: 0.25,
            lr: 1e-4,
            batch: 8,
            steps: 2000,
            eval_every: 250,
            sample_steps: crate::flow::DEFAULT_SAMPLE_STEPS,
            seed: 0,
            no_camera: false,
            freeze_non_attention: false,
            timestep: TimestepSampler::Uniform,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::Config(m.to_string()));
        if self.f == 0 || self.h == 0 || self.w == 0 {
            return bad("empty token grid");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if self.heads == 0 || self.d_head == 0 || !self.d_head.is_multiple_of(6) {
            return bad("d_head must be a positive multiple of 6");
        }
        if self.blocks == 0 || self.ff_mult == 0 || self.phase_hidden == 0 {
            return bad("blocks, ff_mult and phase_hidden must be positive");
        }
        if !(0.0..=1.0).contains(&self.identity_ratio) || !(0.0..=1.0).contains(&self.reverse_ratio) {
            return bad("ratios must lie in [0, 1]");
        }
        if self.train_items == 0 || self.batch == 0 {
            return bad("need at least one training item and a positive batch");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.sample_steps == 0 {
            return bad("sample_steps must be positive");
        }
        self.intrinsics()?;
        Ok(())
    }

    /// Tokens per video block.
    pub fn tokens(&self) -> usize {
        self.f * self.h * self.w
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn video_frames(&self) -> usize {
        (self.f - 1) * self.stride + 1
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, GeometryError> {
        Intrinsics::centered(self.focal, self.image_size)
    }

    pub fn trainable_mask(&self, store: &crate::nn::ParamStore<f32>) -> Vec<bool> {
        store
            .entries()
            .iter()
            .map(|e| !(self.no_camera && e.role.is_phase()) && !(self.freeze_non_attention && !e.role.is_attention()))
            .collect()
    }
}
