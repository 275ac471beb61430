use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{preprocess, PreprocessPolicy, RgbImage};
use crate::numerics::{load_checkpoint, save_checkpoint, Tensor};

use super::forward::Session;
use super::{FusionModel, ModelConfig, ModelError};

/// Affine map between raw labels and the standardized units the model is
/// trained in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub mean: f64,
    /// Population standard deviation; 1 when the fitted labels are constant.
    pub std: f64,
}

impl LabelNorm {
    pub fn fit(labels: impl Iterator<Item = f64>) -> LabelNorm {
        let v: Vec<f64> = labels.collect();
        if v.is_empty() {
            return LabelNorm { mean: 0.0, std: 1.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        // identical labels can leave a rounding-level variance behind
        let std = if var.sqrt() > 1e-12 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };
        LabelNorm { mean, std }
    }

    pub fn to_z(&self, label: f64) -> f64 {
        (label - self.mean) / self.std
    }

    pub fn from_z(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    label_norm: LabelNorm,
    sat_policy: PreprocessPolicy,
    sv_policy: PreprocessPolicy,
}

/// A model bundled with everything needed to score raw images in label
/// units: the preprocessing policy of each branch and the label scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: FusionModel,
    pub label_norm: LabelNorm,
    pub sat_policy: PreprocessPolicy,
    pub sv_policy: PreprocessPolicy,
}

impl TrainedModel {
    pub fn new(
        model: FusionModel,
        label_norm: LabelNorm,
        sat_policy: PreprocessPolicy,
        sv_policy: PreprocessPolicy,
    ) -> Result<Self, ModelError> {
        for p in [&sat_policy, &sv_policy] {
            p.validate()?;
            if p.target_side != model.config.image_side {
                return Err(ModelError::Config(format!(
                    "preprocessing side {} does not match model image side {}",
                    p.target_side, model.config.image_side
                )));
            }
        }
        Ok(TrainedModel { model, label_norm, sat_policy, sv_policy })
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let meta = Meta {
            model: self.model.config.clone(),
            label_norm: self.label_norm,
            sat_policy: self.sat_policy.clone(),
            sv_policy: self.sv_policy.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| ModelError::Contract(e.to_string()))?;
        Ok(save_checkpoint(dir, &self.model.params, meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let (params, meta) = load_checkpoint(dir)?;
        let meta: Meta = serde_json::from_value(meta)
            .map_err(|e| ModelError::CheckpointMismatch(format!("checkpoint metadata: {e}")))?;
        let model = FusionModel::from_params(meta.model, params)?;
        TrainedModel::new(model, meta.label_norm, meta.sat_policy, meta.sv_policy)
    }

    pub fn prepare(&self, sat: &RgbImage, sv: &RgbImage) -> (Tensor, Tensor) {
        (preprocess(sat, &self.sat_policy), preprocess(sv, &self.sv_policy))
    }

    /// Score in label units for already preprocessed tensors.
    pub fn score_tensors(&self, session: &mut Session<'_>, sat: &Tensor, sv: &Tensor) -> Result<f64, ModelError> {
        Ok(self.label_norm.from_z(session.predict(sat, sv)?))
    }

    /// Score in label units for one raw image pair.
    pub fn score(&self, sat: &RgbImage, sv: &RgbImage) -> Result<f64, ModelError> {
        let (a, b) = self.prepare(sat, sv);
        let mut session = Session::eval(&self.model);
        self.score_tensors(&mut session, &a, &b)
    }
}
