use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::evaluate_user;
use crate::autodiff::{AdamConfig, AdamState, Tape};
use crate::data::{ChannelStats, Window, WindowedSample};
use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneConfig};
use crate::seed::stream_rng;
use crate::ssa::{self, DEFAULT_BATCH_SIZE};

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 100;
pub const DEFAULT_PRETRAIN_LR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the cross-view contrastive term added to the
    /// classification loss on source windows; 0 trains classification only.
    pub contrastive_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_PRETRAIN_EPOCHS,
            lr: DEFAULT_PRETRAIN_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            contrastive_weight: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

pub struct PretrainOutcome {
    pub model: Backbone,
    pub log: Vec<PretrainLogRow>,
    /// 1-based epoch of the selected weights; 0 if no epoch ran.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

pub fn log_csv(log: &[PretrainLogRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for r in log {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_acc));
    }
    out
}

fn labels_of(samples: &[WindowedSample], what: &str) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                Error::Data(format!(
                    "{what} window from {} is unlabeled; source data must be labeled",
                    s.window.origin.record_id
                ))
            })
        })
        .collect()
}

/// Supervised training on labeled source windows. Input statistics come
/// from `train`; the weights with the best validation accuracy are kept
/// (earliest epoch on ties, last epoch when `val` is empty).
pub fn pretrain(
    model_config: &BackboneConfig,
    train: &[WindowedSample],
    val: &[WindowedSample],
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("pretraining needs at least one training window".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let labels = labels_of(train, "training")?;
    labels_of(val, "validation")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= model_config.num_classes) {
        return Err(Error::Data(format!(
            "label {bad} outside 0..{}",
            model_config.num_classes
        )));
    }
    let contrastive = config.contrastive_weight != 0.0;
    if contrastive {
        ssa::check_context_fits(&Backbone::init(model_config.clone(), 0)?, model_config.context_window)?;
    }

    let mut model = Backbone::init(model_config.clone(), config.seed)?;
    model.norm = ChannelStats::from_windows(train.iter().map(|s| &s.window))?;
    model.provenance.stage = "pretrain".into();
    let mut adam = AdamState::new(config.adam, &model.params);
    let mut rng = stream_rng(config.seed, "pretrain/order");
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let ws: Vec<&Window> = batch.iter().map(|&i| &train[i].window).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let logits = model.classify_batch(&mut tape, &bound, &ws)?;
            let mut loss = tape.softmax_cross_entropy(logits, &ys)?;
            if contrastive && ws.len() > 1 {
                let pairs: Vec<(Window, Window)> = ws
                    .iter()
                    .map(|w| ((*w).clone(), crate::data::reverse_view(w)))
                    .collect();
                let t = model_config.context_window;
                let views = ssa::encode_views(&model, &mut tape, &bound, &pairs, t)?;
                let c = ssa::cross_view_loss(&model, &mut tape, &bound, &views, t)?;
                let c = tape.scale(c, config.contrastive_weight)?;
                loss = tape.add(loss, c)?;
            }
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Data(format!("pretraining loss became {value} in epoch {epoch}")));
            }
            tape.backward(loss)?;
            adam.step(&mut model.params, &bound.grads(&tape), config.lr)?;
            loss_sum += value;
            batches += 1;
        }
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            evaluate_user(&model, val)?.acc
        };
        log.push(PretrainLogRow {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc,
        });
        let better = if val.is_empty() { true } else { val_acc > best_val_acc };
        if better {
            best_val_acc = val_acc;
            best_epoch = epoch;
            best = model.clone();
        }
    }
    best.provenance.epoch = best_epoch;
    best.provenance.seed = config.seed;
    Ok(PretrainOutcome {
        model: best,
        log,
        best_epoch,
        best_val_acc: if best_epoch == 0 { f64::NAN } else { best_val_acc },
    })
}
