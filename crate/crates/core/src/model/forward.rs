use crate::numerics::{dropout_mask, NumericsError, Rng, Tape, Tensor, Var};

use super::layout::{AttentionParams, Branch, CrossParams, EncoderLayerParams, Linear, Norm};
use super::{FusionModel, ModelError, CHANNELS};

/// A forward pass over one tape with the model's parameters bound to it.
///
/// In eval mode parameters are constants and dropout is off; in train mode
/// they are leaves and dropout draws from the session's generator.
pub struct Session<'m> {
    model: &'m FusionModel,
    pub tape: Tape,
    vars: Vec<Var>,
    mark: usize,
    rng: Option<Rng>,
    attention_log: Option<Vec<Tensor>>,
}

impl<'m> Session<'m> {
    pub fn eval(model: &'m FusionModel) -> Self {
        let mut tape = Tape::new();
        let vars = model.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let mark = tape.len();
        Session { model, tape, vars, mark, rng: None, attention_log: None }
    }

    pub fn train(model: &'m FusionModel, rng: Rng) -> Self {
        let mut tape = Tape::new();
        let vars = model.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let mark = tape.len();
        Session { model, tape, vars, mark, rng: Some(rng), attention_log: None }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Keep a copy of every attention distribution computed from now on.
    pub fn record_attention(&mut self) {
        self.attention_log = Some(Vec::new());
    }

    pub fn attention_maps(&self) -> &[Tensor] {
        self.attention_log.as_deref().unwrap_or(&[])
    }

    /// Drops everything recorded after parameter binding.
    pub fn reset(&mut self) {
        self.tape.truncate(self.mark);
        if let Some(log) = &mut self.attention_log {
            log.clear();
        }
    }

    pub fn into_rng(self) -> Option<Rng> {
        self.rng
    }

    pub fn param(&self, id: crate::numerics::ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of `loss` in parameter order.
    pub fn param_gradients(&self, loss: Var) -> Result<Vec<Tensor>, ModelError> {
        let mut grads = self.tape.backward(loss)?;
        self.vars
            .iter()
            .map(|v| grads.take(*v).ok_or_else(|| ModelError::Contract("parameters are not differentiable in eval mode".into())))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    fn linear(&mut self, l: Linear, x: Var) -> Result<Var, NumericsError> {
        let y = self.tape.matmul(x, self.vars[l.w.0])?;
        self.tape.add_row(y, self.vars[l.b.0])
    }

    fn norm(&mut self, n: Norm, x: Var) -> Result<Var, NumericsError> {
        let eps = self.model.config.layer_norm_eps;
        self.tape.layer_norm(x, self.vars[n.gamma.0], self.vars[n.beta.0], eps)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, NumericsError> {
        let rate = self.model.config.dropout_rate;
        match &mut self.rng {
            Some(rng) if rate > 0.0 => {
                let mask = dropout_mask(self.tape.value(x).shape(), rate, rng)?;
                self.tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn encoder_params(&self, branch: Branch) -> Result<&'m super::layout::EncoderParams, ModelError> {
        self.model
            .layout
            .encoder(branch)
            .ok_or_else(|| ModelError::Contract(format!("{branch:?} branch is not part of this model")))
    }

    /// Image `3×S×S` → `(1+P)×D`: per-patch layer norm and projection,
    /// CLS prepended, positional embedding added.
    pub fn patch_embed(&mut self, branch: Branch, img: &Tensor) -> Result<Var, ModelError> {
        let enc = self.encoder_params(branch)?;
        let patches = patchify(img, self.model.config.image_side, self.model.config.patch_side)?;
        let x = self.tape.constant(patches);
        let x = self.norm(enc.patch_norm, x)?;
        let x = self.linear(enc.patch_proj, x)?;
        let seq = self.tape.concat(&[self.vars[enc.cls.0], x])?;
        Ok(self.tape.add(seq, self.vars[enc.pos.0])?)
    }

    /// Multi-head attention of `queries` over `keys_values`, including the
    /// output projection but not the residual.
    pub fn attention(&mut self, p: AttentionParams, queries: Var, keys_values: Var) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let (heads, dh) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.linear(p.q, queries)?;
        let k = self.linear(p.k, keys_values)?;
        let v = self.linear(p.v, keys_values)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let scores = self.tape.scale(scores, scale);
            let weights = self.tape.softmax_rows(scores)?;
            if let Some(log) = &mut self.attention_log {
                log.push(self.tape.value(weights).clone());
            }
            let weights = self.dropout(weights)?;
            outs.push(self.tape.matmul(weights, vh)?);
        }
        let merged = self.tape.concat_cols(&outs)?;
        Ok(self.linear(p.out, merged)?)
    }

    /// `query + Attn(LN_q(query), LN_kv(kv))`.
    pub fn cross_attention(&mut self, p: &CrossParams, query: Var, kv: Var) -> Result<Var, ModelError> {
        let (qv, kvv) = (self.tape.value(query).shape(), self.tape.value(kv).shape());
        if qv.len() != 2 || kvv.len() != 2 || qv[1] != kvv[1] || qv[1] != self.model.config.hidden_dim {
            return Err(NumericsError::Shape(format!("cross-attention between {qv:?} and {kvv:?}")).into());
        }
        let qn = self.norm(p.ln_q, query)?;
        let kvn = self.norm(p.ln_kv, kv)?;
        let a = self.attention(p.attn, qn, kvn)?;
        Ok(self.tape.add(query, a)?)
    }

    /// First half of an encoder layer: `s + MHSA(LN1(s))`.
    pub fn self_attention_block(&mut self, layer: &EncoderLayerParams, s: Var) -> Result<Var, ModelError> {
        let shared = CrossParams { ln_q: layer.ln1, ln_kv: layer.ln1, attn: layer.attn };
        self.cross_attention(&shared, s, s)
    }

    /// Pre-norm transformer block with a GELU MLP.
    pub fn encoder_layer(&mut self, layer: &EncoderLayerParams, s: Var) -> Result<Var, ModelError> {
        let s = self.self_attention_block(layer, s)?;
        let h = self.norm(layer.ln2, s)?;
        let h = self.linear(layer.fc1, h)?;
        let h = self.tape.gelu(h);
        let h = self.linear(layer.fc2, h)?;
        let h = self.dropout(h)?;
        Ok(self.tape.add(s, h)?)
    }

    pub fn vit_encode(&mut self, branch: Branch, img: &Tensor) -> Result<Var, ModelError> {
        let enc = self.encoder_params(branch)?;
        let mut s = self.patch_embed(branch, img)?;
        for layer in &enc.layers {
            s = self.encoder_layer(layer, s)?;
        }
        Ok(s)
    }

    /// Alternating fusion; returns the street-view stream after the last
    /// round.
    pub fn fuse(&mut self, sat: Var, sv: Var) -> Result<Var, ModelError> {
        let (mut a, mut b) = (sat, sv);
        for round in &self.model.layout.rounds {
            a = self.cross_attention(&round.sat_from_sv, a, b)?;
            b = self.cross_attention(&round.sv_from_sat, b, a)?;
        }
        Ok(b)
    }

    /// CLS row → Linear → ReLU → Linear, giving a `1×1` score.
    pub fn head(&mut self, seq: Var) -> Result<Var, ModelError> {
        let head = self.model.layout.head;
        let cls = self.tape.slice_rows(seq, 0, 1)?;
        let h = self.linear(head.fc1, cls)?;
        let h = self.tape.relu(h);
        Ok(self.linear(head.fc2, h)?)
    }

    /// Score node for one pair, honouring the configured modality.
    pub fn forward(&mut self, sat: &Tensor, sv: &Tensor) -> Result<Var, ModelError> {
        let rep = match (self.model.layout.sat.is_some(), self.model.layout.sv.is_some()) {
            (true, true) => {
                let a = self.vit_encode(Branch::Satellite, sat)?;
                let b = self.vit_encode(Branch::StreetView, sv)?;
                self.fuse(a, b)?
            }
            (true, false) => self.vit_encode(Branch::Satellite, sat)?,
            (false, true) => self.vit_encode(Branch::StreetView, sv)?,
            (false, false) => return Err(ModelError::Contract("model has no encoder".into())),
        };
        self.head(rep)
    }

    /// Runs [`Session::forward`], returns the scalar and clears the tape.
    pub fn predict(&mut self, sat: &Tensor, sv: &Tensor) -> Result<f64, ModelError> {
        let out = self.forward(sat, sv);
        let score = out.map(|v| self.tape.value(v).item());
        self.reset();
        score
    }
}

/// `3×S×S` image → `P×(3·p·p)` rows, patches in row-major grid order and
/// each row laid out channel, then row, then column.
pub fn patchify(img: &Tensor, side: usize, patch: usize) -> Result<Tensor, NumericsError> {
    if img.shape() != [CHANNELS, side, side] {
        return Err(NumericsError::Shape(format!(
            "expected a {CHANNELS}x{side}x{side} image, got {:?}",
            img.shape()
        )));
    }
    let grid = side / patch;
    let dim = CHANNELS * patch * patch;
    let src = img.data();
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..CHANNELS {
                for dy in 0..patch {
                    let row = (c * side + gy * patch + dy) * side + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], out)
}
