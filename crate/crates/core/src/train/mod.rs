//! L1 training with gradient accumulation, Adam and a OneCycle schedule.

mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::optim::{onecycle_lr, Adam, AdamConfig};
pub use crate::model::TemperatureStats;

use crate::augment::{augment_graph, augmentation_rng, random_rotation};
use crate::crystal::Mat3;
use crate::graph::CrystalGraph;
use crate::kernels::Mode;
use crate::model::{
    CartNet, ForwardCache, GraphBatch, HeadKind, ModelConfig, ModelError, OutputGrad, Prediction,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss mask selects no atoms")]
    EmptyMask,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (structures: {ids})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        step: usize,
        ids: String,
    },
    #[error("prediction/target length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Structures per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged into one optimiser step.
    pub grad_accumulation: usize,
    pub lr_max: f64,
    pub epochs: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub so3_augment: bool,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Stops after this many optimiser steps; the schedule spans exactly
    /// these steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            grad_accumulation: 16,
            lr_max: 1e-3,
            epochs: 50,
            pct_start: 0.01,
            div_factor: 25.0,
            final_div_factor: 1e4,
            adam: AdamConfig::default(),
            loss: LossKind::L1,
            so3_augment: true,
            seed: 0,
            eval_every: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.grad_accumulation < 1 {
            return bad("grad_accumulation must be at least 1");
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return bad("pct_start must lie in (0, 1)");
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be positive");
        }
        if self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            return bad("div factors must be positive");
        }
        if self.epochs < 1 && self.max_steps.is_none() {
            return bad("epochs must be at least 1");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        onecycle_lr(
            step,
            total_steps,
            self.lr_max,
            self.pct_start,
            self.div_factor,
            self.final_div_factor,
        )
    }
}

/// Model and training settings in one document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Mean absolute error over the nine entries of all masked tensors, and its
/// gradient `sign(ΔU)/(9·count)` (zero at ties and for unmasked entries).
pub fn l1_adp_loss(preds: &[Mat3], targets: &[Mat3], mask: &[bool]) -> Result<(f64, Vec<Mat3>)> {
    if preds.len() != targets.len() || preds.len() != mask.len() {
        return Err(TrainError::LengthMismatch(preds.len(), targets.len()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainError::EmptyMask);
    }
    let scale = 1.0 / (9.0 * count as f64);
    let mut total = 0.0;
    let mut grads = vec![Mat3::zeros(); preds.len()];
    for i in 0..preds.len() {
        if !mask[i] {
            continue;
        }
        let diff = preds[i] - targets[i];
        total += diff.abs().sum();
        grads[i] = diff.map(|d| {
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        });
    }
    Ok((total * scale, grads))
}

/// Mean absolute error over scalar predictions, with its gradient.
pub fn l1_scalar_loss(preds: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if preds.len() != targets.len() {
        return Err(TrainError::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let scale = 1.0 / preds.len() as f64;
    let loss = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        * scale;
    let grads = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            if p > t {
                scale
            } else if p < t {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grads))
}

/// Temperature statistics of the training graphs; graphs without a
/// temperature are ignored.
pub fn temperature_stats(train: &[CrystalGraph]) -> TemperatureStats {
    let temps: Vec<f64> = train.iter().filter_map(|g| g.temperature).collect();
    TemperatureStats::from_temperatures(&temps).unwrap_or_default()
}

fn batch_loss(
    model: &CartNet,
    graphs: &[&CrystalGraph],
    mode: Mode,
) -> Result<(f64, OutputGrad, ForwardCache, GraphBatch)> {
    let batch = model.batch(graphs)?;
    let (pred, cache) = model.forward(&batch, mode)?;
    let (loss, grad) = match &pred {
        Prediction::Adp(u) => {
            let mut targets = Vec::with_capacity(u.len());
            let mut mask = Vec::with_capacity(u.len());
            for g in graphs {
                for i in 0..g.n_nodes {
                    let t = g.targets[i].filter(|_| g.node_has_target[i]);
                    mask.push(t.is_some());
                    targets.push(t.map(|t| t.0).unwrap_or_else(Mat3::zeros));
                }
            }
            let (loss, grad) = l1_adp_loss(u, &targets, &mask)?;
            (loss, OutputGrad::Adp(grad))
        }
        Prediction::Scalar(s) => {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut idx = Vec::new();
            for (k, g) in graphs.iter().enumerate() {
                if let Some(t) = g.scalar_target {
                    preds.push(s[k]);
                    targets.push(t);
                    idx.push(k);
                }
            }
            let (loss, g) = l1_scalar_loss(&preds, &targets)?;
            let mut full = vec![0.0; s.len()];
            for (k, v) in idx.into_iter().zip(g) {
                full[k] = v;
            }
            (loss, OutputGrad::Scalar(full))
        }
    };
    Ok((loss, grad, cache, batch))
}

/// Mean absolute error in Eval mode: over the nine entries of every target
/// atom for ADP heads, over graphs for scalar heads.
pub fn validation_mae(model: &CartNet, graphs: &[CrystalGraph], batch_size: usize) -> Result<f64> {
    let chunks: Vec<Vec<&CrystalGraph>> = graphs
        .chunks(batch_size.max(1))
        .map(|c| c.iter().collect())
        .collect();
    let sums: Vec<Result<(f64, usize)>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch = model.batch(chunk)?;
            let (pred, _) = model.forward(&batch, Mode::Eval)?;
            let mut sum = 0.0;
            let mut count = 0;
            match pred {
                Prediction::Adp(u) => {
                    let mut node = 0;
                    for g in chunk {
                        for i in 0..g.n_nodes {
                            if let (true, Some(t)) = (g.node_has_target[i], g.targets[i]) {
                                sum += (u[node] - t.0).abs().sum() / 9.0;
                                count += 1;
                            }
                            node += 1;
                        }
                    }
                }
                Prediction::Scalar(s) => {
                    for (k, g) in chunk.iter().enumerate() {
                        if let Some(t) = g.scalar_target {
                            sum += (s[k] - t).abs();
                            count += 1;
                        }
                    }
                }
            }
            Ok((sum, count))
        })
        .collect();
    let (mut sum, mut count) = (0.0, 0);
    for r in sums {
        let (s, c) = r?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimiser steps completed at the end of the epoch.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Mean micro-batch loss of every optimiser step.
    pub step_losses: Vec<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,train_loss,val_mae\n");
        for r in &self.epochs {
            let val = r.val_mae.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{}",
                r.epoch, r.step, r.lr, r.train_loss, val
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters with the best validation MAE, or the final ones when
    /// there is no validation set.
    pub best: CartNet,
    pub last: CartNet,
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub history: History,
}

/// Splits a shuffled order into micro-batches; a trailing single structure
/// joins the previous batch so batch norm always sees several graphs.
fn micro_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

pub fn steps_per_epoch(n_train: usize, cfg: &TrainConfig) -> usize {
    let order: Vec<usize> = (0..n_train).collect();
    micro_batches(&order, cfg.batch_size)
        .len()
        .div_ceil(cfg.grad_accumulation)
}

/// Trains a freshly initialised network. Temperature statistics come from
/// `train` only.
pub fn train(
    train: &[CrystalGraph],
    val: &[CrystalGraph],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let model = CartNet::new(model_cfg.clone(), temperature_stats(train))?;
    train_model(model, train, val, cfg)
}

pub fn train_model(
    mut model: CartNet,
    train: &[CrystalGraph],
    val: &[CrystalGraph],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let spe = steps_per_epoch(train.len(), cfg);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * spe);
    let mut adam = Adam::new(cfg.adam);
    let mut history = History::default();
    let mut best: Option<(f64, usize, CartNet)> = None;
    let mut step = 0;
    let mut epoch = 0;
    let shuffle_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    while step < total_steps {
        let epoch_graphs: Vec<CrystalGraph> = if cfg.so3_augment
            && model.config.head == HeadKind::CholeskyAdp
        {
            train
                .par_iter()
                .enumerate()
                .map(|(i, g)| {
                    augment_graph(
                        g,
                        &random_rotation(&mut augmentation_rng(cfg.seed, epoch as u64, i as u64)),
                    )
                })
                .collect()
        } else {
            train.to_vec()
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let batches = micro_batches(&order, cfg.batch_size);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut lr = cfg.lr_at(step, total_steps);
        for group in batches.chunks(cfg.grad_accumulation) {
            if step >= total_steps {
                break;
            }
            lr = cfg.lr_at(step, total_steps);
            model.zero_grad();
            let mut step_loss = 0.0;
            for idx in group {
                let graphs: Vec<&CrystalGraph> = idx.iter().map(|&i| &epoch_graphs[i]).collect();
                let (loss, grad, cache, batch) = batch_loss(&model, &graphs, Mode::Train)?;
                if !loss.is_finite() {
                    let ids = graphs
                        .iter()
                        .map(|g| g.id.as_str())
                        .collect::<Vec<_>>()
                        .join(",");
                    return Err(TrainError::NonFiniteLoss {
                        loss,
                        epoch,
                        step,
                        ids,
                    });
                }
                model.backward(&batch, &cache, &grad)?;
                model.update_running(&cache);
                step_loss += loss;
            }
            let n = group.len() as f64;
            for p in model.params_mut() {
                p.grad.mapv_inplace(|g| g / n);
            }
            adam.step(&mut model.params_mut(), lr);
            history.step_losses.push(step_loss / n);
            epoch_loss += step_loss;
            epoch_batches += group.len();
            step += 1;
        }
        let last_epoch = step >= total_steps;
        let val_mae = if !val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            Some(validation_mae(&model, val, cfg.batch_size)?)
        } else {
            None
        };
        if let Some(v) = val_mae {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.clone()));
            }
        }
        let train_loss = epoch_loss / epoch_batches.max(1) as f64;
        log::info!(
            "epoch {epoch} step {step}/{total_steps} lr {lr:.3e} loss {train_loss:.4e}{}",
            val_mae
                .map(|v| format!(" val_mae {v:.4e}"))
                .unwrap_or_default()
        );
        history.epochs.push(EpochRecord {
            epoch,
            step,
            lr,
            train_loss,
            val_mae,
        });
        epoch += 1;
    }
    let (best_val_mae, best_epoch, best_model) = match best {
        Some((v, e, m)) => (Some(v), e, m),
        None => (None, epoch.saturating_sub(1), model.clone()),
    };
    Ok(TrainOutput {
        best: best_model,
        last: model,
        best_epoch,
        best_val_mae,
        history,
    })
}
