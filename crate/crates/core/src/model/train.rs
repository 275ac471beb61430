use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{augment, Augmentation};
use crate::numerics::{adam_step, seeded_rng, AdamConfig, AdamState, Rng, Tensor};

use super::forward::Session;
use super::metrics::r_squared;
use super::trained::LabelNorm;
use super::{FusionModel, ModelError};

/// One preprocessed training pair. `sv` is ignored by satellite-only models
/// and `sat` by street-view-only ones.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub sat: Tensor,
    pub sv: Tensor,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub val_fraction: f64,
    /// Applied independently to both images of every training pair.
    pub augment: Option<Augmentation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.2,
            augment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean squared error over the epoch's training batches, in standardized
    /// label units, with dropout active.
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    /// `None` when the validation split has fewer than two samples or a
    /// constant label.
    pub val_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub label_norm: LabelNorm,
}

/// Seeded split, then `epochs` passes of mini-batch Adam on the MSE of
/// z-scored labels. `on_epoch` sees each epoch's stats as they are produced.
pub fn train(
    model: &mut FusionModel,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Contract("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ModelError::Config("batch size and epoch count must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(ModelError::Config(format!("validation fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    if data.iter().any(|s| !s.label.is_finite()) {
        return Err(ModelError::Contract("labels must be finite".into()));
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let norm = LabelNorm::fit(train_idx.iter().map(|&i| data[i].label));
    let mut state = AdamState::new(cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (loss, grads, back) = batch_step(model, data, batch, &norm, cfg, rng)?;
            rng = back;
            sq_sum += loss * batch.len() as f64;
            adam_step(model.params.tensors_mut(), &grads, &mut state)?;
        }
        let (val_mse, val_r2) = validate(model, data, val_idx, &norm)?;
        let stats = EpochStats { epoch, train_mse: sq_sum / train_idx.len() as f64, val_mse, val_r2 };
        log::debug!("epoch {epoch}: train_mse {:.5} val_r2 {:?}", stats.train_mse, stats.val_r2);
        on_epoch(&stats);
        history.push(stats);
    }

    Ok(TrainReport {
        history,
        train_ids: train_idx.iter().map(|&i| data[i].id.clone()).collect(),
        val_ids: val_idx.iter().map(|&i| data[i].id.clone()).collect(),
        label_norm: norm,
    })
}

fn batch_step(
    model: &FusionModel,
    data: &[Sample],
    batch: &[usize],
    norm: &LabelNorm,
    cfg: &TrainConfig,
    mut rng: Rng,
) -> Result<(f64, Vec<Tensor>, Rng), ModelError> {
    let mut views = Vec::with_capacity(batch.len());
    for &i in batch {
        let s = &data[i];
        match &cfg.augment {
            Some(a) => views.push((augment(&s.sat, a, &mut rng)?, augment(&s.sv, a, &mut rng)?)),
            None => views.push((s.sat.clone(), s.sv.clone())),
        }
    }
    let mut session = Session::train(model, rng);
    let mut outs = Vec::with_capacity(batch.len());
    for (sat, sv) in &views {
        outs.push(session.forward(sat, sv)?);
    }
    let preds = session.tape.concat(&outs)?;
    let target = Tensor::new(vec![batch.len(), 1], batch.iter().map(|&i| norm.to_z(data[i].label)).collect())?;
    let loss = session.tape.mse(preds, &target)?;
    let value = session.value(loss).item();
    let grads = session.param_gradients(loss)?;
    let rng = session.into_rng().expect("training session owns a generator");
    Ok((value, grads, rng))
}

fn validate(
    model: &FusionModel,
    data: &[Sample],
    idx: &[usize],
    norm: &LabelNorm,
) -> Result<(Option<f64>, Option<f64>), ModelError> {
    if idx.is_empty() {
        return Ok((None, None));
    }
    let mut session = Session::eval(model);
    let mut yhat = Vec::with_capacity(idx.len());
    for &i in idx {
        yhat.push(session.predict(&data[i].sat, &data[i].sv)?);
    }
    let y: Vec<f64> = idx.iter().map(|&i| norm.to_z(data[i].label)).collect();
    let mse = yhat.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;
    let r2 = match r_squared(&yhat, &y) {
        Ok(r) => Some(r),
        Err(ModelError::ConstantTarget | ModelError::Contract(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((Some(mse), r2))
}
