//! Mini-batch MSE training with Adam, plateau learning-rate reduction and
//! early stopping, plus seeded random hyperparameter search.

mod search;

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use search::{
    derive_seed, hyperopt, random_search, Dim, HyperoptResult, SearchSpace, TrialPoint, TrialRecord,
};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::Adjacency;
use crate::ingest::split_point;
use crate::model::{bind, forward, init_params, predict, ModelConfig, NetworkParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub fn mse_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("mse_loss", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("mse_loss"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}` at step {}", state.t + 1)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            let mk = BETA1 * m.data()[k] + (1.0 - BETA1) * gk;
            let vk = BETA2 * v.data()[k] + (1.0 - BETA2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            p.data_mut()[k] -= lr * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub lr_reduce_factor: f64,
    pub lr_reduce_patience: usize,
    /// Chronological tail of the training rows held out for validation.
    pub validation_fraction: f64,
    /// Smallest validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            early_stop_patience: 15,
            lr_reduce_factor: 0.2,
            lr_reduce_patience: 5,
            validation_fraction: 0.1,
            min_delta: 1e-8,
            shuffle: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.early_stop_patience == 0 || self.lr_reduce_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor <= 1.0) {
            return bad(format!("lr reduction factor must lie in (0, 1], got {}", self.lr_reduce_factor));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Set when early stopping ended the run before the epoch budget.
    pub stopped_early: bool,
    pub fit_rows: usize,
    pub val_rows: usize,
}

impl TrainHistory {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

/// Fit rows and validation rows of a training matrix.
pub fn carve_validation(x: &FeatureMatrix, fraction: f64) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let n = x.n_rows();
    let cut = split_point(n, 1.0 - fraction);
    if cut == n {
        return Err(Error::InsufficientData(format!(
            "validation slice of {n} rows at fraction {fraction} is empty"
        )));
    }
    if cut < 2 {
        return Err(Error::InsufficientData(format!(
            "only {cut} training rows remain after the validation carve-out"
        )));
    }
    Ok((x.slice(0..cut), x.slice(cut..n)))
}

/// Eval-mode MSE of the network on every row of `x`.
pub fn evaluate_mse(params: &NetworkParams, adj: &Adjacency, x: &FeatureMatrix) -> Result<f64> {
    let pred = x.rows().map(|r| predict(params, adj, r)).collect::<Result<Vec<_>>>()?;
    mse_loss(&pred, x.targets())
}

/// Mean squared error of one batch and its gradient, in training mode.
fn batch_gradient(
    params: &NetworkParams,
    adj: &Adjacency,
    x: &FeatureMatrix,
    rows: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss_sum = 0.0;
    for &i in rows {
        let mut tape = Tape::new();
        let p = bind(&mut tape, params, true);
        let xv = tape.constant(Tensor::row(x.row(i).to_vec()));
        let out = forward(&mut tape, xv, adj, params, &p, Some(&mut *rng))?;
        let target = tape.constant(Tensor::row(vec![x.targets()[i]]));
        let diff = tape.sub(out, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.sum_all(sq);
        loss_sum += tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        for (name, var) in p.iter() {
            if let Some(g) = grads.get(var) {
                match acc.get_mut(name) {
                    Some(a) => a.add_assign(g),
                    None => {
                        acc.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
    }
    let scale = 1.0 / rows.len() as f64;
    for g in acc.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss_sum * scale, acc))
}

/// Trains from fresh parameters seeded by `train.seed`.
pub fn fit(
    x: &FeatureMatrix,
    adj: &Adjacency,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    let init = init_params(x.n_features(), model, train.seed)?;
    fit_from(init, x, adj, train)
}

/// Trains starting from `params`. Returns the parameters of the epoch with
/// the lowest validation loss.
pub fn fit_from(
    mut params: NetworkParams,
    x: &FeatureMatrix,
    adj: &Adjacency,
    train: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    train.validate()?;
    params.validate()?;
    let (fit_rows, val_rows) = carve_validation(x, train.validation_fraction)?;
    let mut history = TrainHistory {
        fit_rows: fit_rows.n_rows(),
        val_rows: val_rows.n_rows(),
        ..TrainHistory::default()
    };
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0usize;
    let mut since_reduce = 0usize;
    let mut lr = train.learning_rate;
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..fit_rows.n_rows()).collect();

    for epoch in 0..train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, epoch as u64 + 1));
        if train.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(train.batch_size) {
            let (loss, grads) = batch_gradient(&params, adj, &fit_rows, batch, &mut rng)?;
            adam_step(&mut params, &grads, &mut adam, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = evaluate_mse(&params, adj, &val_rows)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {lr:.2e}");

        if val_loss < best_loss - train.min_delta {
            best_loss = val_loss;
            best = params.clone();
            history.best_epoch = Some(epoch);
            since_best = 0;
            since_reduce = 0;
        } else {
            since_best += 1;
            since_reduce += 1;
            if since_best >= train.early_stop_patience {
                history.stopped_early = epoch + 1 < train.epochs;
                info!("early stop at epoch {epoch}; best epoch {:?}", history.best_epoch);
                break;
            }
            if since_reduce >= train.lr_reduce_patience {
                lr *= train.lr_reduce_factor;
                since_reduce = 0;
                debug!("learning rate reduced to {lr:.2e}");
            }
        }
    }
    history.best_val_loss = history.best_epoch.map(|_| best_loss);
    Ok((best, history))
}

#[cfg(test)]
mod tests;
