//! Two-branch ViT encoders fused by alternating cross-attention, with a
//! small regression head predicting the nightlight proxy.
//!
//! Shapes under the default configuration: each `3×224×224` image becomes
//! 49 patches of `32×32×3 = 3072` values, projected to 256 and prefixed with
//! a CLS token (`50×256`). Two pre-norm encoder layers keep that shape.
//! Fusion runs `sat' = CA(sat, sv)` then `sv' = CA(sv, sat')` and the head
//! reads the CLS row of `sv'`.

mod forward;
mod layout;
mod metrics;
mod train;
mod trained;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{seeded_rng, NumericsError, ParamSet};

pub use forward::{patchify, Session};
pub use layout::{
    AttentionParams, Branch, CrossParams, EncoderLayerParams, EncoderParams, FusionRound, HeadParams, Layout, Linear, Norm,
};
pub use metrics::{pearson, r_squared};
pub use train::{train, EpochStats, Sample, TrainConfig, TrainReport};
pub use trained::{LabelNorm, TrainedModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("R² is undefined when every target is equal")]
    ConstantTarget,
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}

/// Which image streams feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Fused,
    SatelliteOnly,
    StreetViewOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub hidden_dim: usize,
    pub num_encoder_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
    /// Each round is one satellite→street-view and one street-view→satellite
    /// cross-attention.
    pub fusion_rounds: usize,
    pub head_hidden: usize,
    pub layer_norm_eps: f64,
    pub modality: Modality,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 224,
            patch_side: 32,
            hidden_dim: 256,
            num_encoder_layers: 2,
            num_heads: 8,
            mlp_ratio: 4,
            dropout_rate: 0.2,
            fusion_rounds: 1,
            head_hidden: 64,
            layer_norm_eps: 1e-5,
            modality: Modality::Fused,
        }
    }
}

pub const CHANNELS: usize = 3;

impl ModelConfig {
    /// Reduced dimensions for desk-scale training runs.
    pub fn desk() -> Self {
        ModelConfig { image_side: 64, patch_side: 16, hidden_dim: 64, num_heads: 4, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return bad(format!("image side {} is not a multiple of patch side {}", self.image_side, self.patch_side));
        }
        if self.num_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!("hidden dim {} is not divisible by {} heads", self.hidden_dim, self.num_heads));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 {
            return bad("mlp ratio and head width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.modality == Modality::Fused && self.fusion_rounds == 0 {
            return bad("fused modality needs at least one fusion round".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer norm eps must be positive".into());
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Tokens per sequence: CLS plus one per patch.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_side * self.patch_side
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn uses(&self, branch: Branch) -> bool {
        match (self.modality, branch) {
            (Modality::Fused, _) => true,
            (Modality::SatelliteOnly, Branch::Satellite) => true,
            (Modality::StreetViewOnly, Branch::StreetView) => true,
            _ => false,
        }
    }
}

/// Model configuration, parameter layout and parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamSet,
}

impl FusionModel {
    /// Fresh model: truncated-normal(0.02) projections, zero biases, unit
    /// layer-norm gains, zero CLS and positional embeddings.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let layout = Layout::build(&config, &mut params, &mut rng)?;
        Ok(FusionModel { config, layout, params })
    }

    /// Replaces every parameter with the checkpoint's values; names and
    /// shapes must match the layout exactly.
    pub fn from_params(config: ModelConfig, loaded: ParamSet) -> Result<Self, ModelError> {
        let mut model = FusionModel::new(config, 0)?;
        if loaded.names() != model.params.names() {
            return Err(ModelError::CheckpointMismatch(format!(
                "expected {} parameters in layout order, found {}",
                model.params.len(),
                loaded.len()
            )));
        }
        for (i, (name, t)) in loaded.iter().enumerate() {
            let slot = &mut model.params.tensors_mut()[i];
            if slot.shape() != t.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    /// Inference score for one preprocessed image pair (`3×S×S` each).
    pub fn predict(
        &self,
        sat: &crate::numerics::Tensor,
        sv: &crate::numerics::Tensor,
    ) -> Result<f64, ModelError> {
        let mut session = Session::eval(self);
        session.predict(sat, sv)
    }
}
