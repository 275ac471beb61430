use crate::numerics::{truncated_normal, ParamId, ParamSet, Rng, Tensor};

use super::{ModelConfig, ModelError};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Satellite,
    StreetView,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Satellite => "sat",
            Branch::StreetView => "sv",
        }
    }
}

/// `y = x·w + b` with `w` stored `in×out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: Norm,
    pub attn: AttentionParams,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_norm: Norm,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

/// Pre-norm cross-attention block: separate norms for the query stream and
/// the key/value stream, then attention with a residual to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossParams {
    pub ln_q: Norm,
    pub ln_kv: Norm,
    pub attn: AttentionParams,
}

/// One alternation: satellite attends to street view, then street view
/// attends to the updated satellite sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionRound {
    pub sat_from_sv: CrossParams,
    pub sv_from_sat: CrossParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub sat: Option<EncoderParams>,
    pub sv: Option<EncoderParams>,
    pub rounds: Vec<FusionRound>,
    pub head: HeadParams,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> Result<ParamId, ModelError> {
        Ok(self.params.insert(name, t)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear, ModelError> {
        let w = truncated_normal(&[fan_in, fan_out], INIT_STD, self.rng);
        Ok(Linear {
            w: self.add(format!("{name}.w"), w)?,
            b: self.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm, ModelError> {
        Ok(Norm {
            gamma: self.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: self.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttentionParams, ModelError> {
        Ok(AttentionParams {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            out: self.linear(&format!("{name}.out"), d, d)?,
        })
    }

    fn encoder(&mut self, branch: Branch, cfg: &ModelConfig) -> Result<EncoderParams, ModelError> {
        let p = branch.prefix();
        let d = cfg.hidden_dim;
        let patch_norm = self.norm(&format!("{p}.embed.norm"), cfg.patch_dim())?;
        let patch_proj = self.linear(&format!("{p}.embed.proj"), cfg.patch_dim(), d)?;
        let cls = self.add(format!("{p}.embed.cls"), Tensor::zeros(&[1, d]))?;
        let pos = self.add(format!("{p}.embed.pos"), Tensor::zeros(&[cfg.seq_len(), d]))?;
        let mut layers = Vec::with_capacity(cfg.num_encoder_layers);
        for i in 0..cfg.num_encoder_layers {
            let n = format!("{p}.layer{i}");
            layers.push(EncoderLayerParams {
                ln1: self.norm(&format!("{n}.ln1"), d)?,
                attn: self.attention(&format!("{n}.attn"), d)?,
                ln2: self.norm(&format!("{n}.ln2"), d)?,
                fc1: self.linear(&format!("{n}.fc1"), d, d * cfg.mlp_ratio)?,
                fc2: self.linear(&format!("{n}.fc2"), d * cfg.mlp_ratio, d)?,
            });
        }
        Ok(EncoderParams { patch_norm, patch_proj, cls, pos, layers })
    }

    fn cross(&mut self, name: &str, d: usize) -> Result<CrossParams, ModelError> {
        Ok(CrossParams {
            ln_q: self.norm(&format!("{name}.ln_q"), d)?,
            ln_kv: self.norm(&format!("{name}.ln_kv"), d)?,
            attn: self.attention(&format!("{name}.attn"), d)?,
        })
    }
}

impl Layout {
    /// Registers every parameter in a fixed order; checkpoint loading relies
    /// on that order.
    pub fn build(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Layout, ModelError> {
        let mut b = Builder { params, rng };
        let sat = if cfg.uses(Branch::Satellite) { Some(b.encoder(Branch::Satellite, cfg)?) } else { None };
        let sv = if cfg.uses(Branch::StreetView) { Some(b.encoder(Branch::StreetView, cfg)?) } else { None };
        let mut rounds = Vec::new();
        if sat.is_some() && sv.is_some() {
            for r in 0..cfg.fusion_rounds {
                rounds.push(FusionRound {
                    sat_from_sv: b.cross(&format!("fuse{r}.sat_from_sv"), cfg.hidden_dim)?,
                    sv_from_sat: b.cross(&format!("fuse{r}.sv_from_sat"), cfg.hidden_dim)?,
                });
            }
        }
        let head = HeadParams {
            fc1: b.linear("head.fc1", cfg.hidden_dim, cfg.head_hidden)?,
            fc2: b.linear("head.fc2", cfg.head_hidden, 1)?,
        };
        Ok(Layout { sat, sv, rounds, head })
    }

    pub fn encoder(&self, branch: Branch) -> Option<&EncoderParams> {
        match branch {
            Branch::Satellite => self.sat.as_ref(),
            Branch::StreetView => self.sv.as_ref(),
        }
    }
}
