use serde::{Deserialize, Serialize};

use super::{ArchSpec, Model};
use crate::autodiff::{ParamStore, Tape};
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement (accuracy, then loss) before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { optimizer: OptimizerKind::Adam, learning_rate: 3e-3, batch_size: 64, max_epochs: 20, patience: 4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::OddBatch(self.batch_size));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument("max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8); updates trainable parameters only.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let value = store.value_mut(id);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                value[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

enum Optimizer {
    Sgd(f64),
    Adam(Adam),
}

impl Optimizer {
    fn step(&mut self, store: &mut ParamStore) {
        match self {
            Optimizer::Sgd(lr) => store.sgd_step(*lr, 1.0),
            Optimizer::Adam(a) => a.step(store),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub val_accuracy: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

/// Fraction of rows of `logits[N, C]` whose argmax (first on ties) equals the label.
pub(crate) fn argmax_accuracy(logits: &crate::tensor::Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// Mean `−log softmax(logits)[label]` over the rows of `logits[N, C]`.
pub(crate) fn mean_cross_entropy(logits: &crate::tensor::Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[l]
        })
        .sum();
    total / labels.len() as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_classes(name: &str, ds: &Dataset, skip: Option<usize>) -> Result<()> {
    for (c, &n) in ds.class_counts().iter().enumerate() {
        if Some(c) != skip && n < 2 {
            return Err(Error::InvalidArgument(format!("{name} split has {n} examples of class {c}, need at least 2")));
        }
    }
    Ok(())
}

fn fit(mut model: Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut stream = BatchStream::new(train.len(), cfg.batch_size, cfg.seed.wrapping_add(1))?;
    if stream.batches_per_epoch() == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} training samples cannot fill one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(cfg.learning_rate),
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.learning_rate, model.store())),
    };
    // Ranked by validation accuracy, then by lower validation loss.
    let mut best = ((f64::NEG_INFINITY, f64::NEG_INFINITY), model.store().clone());
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let batches = stream.epoch();
        for (bi, batch) in batches.iter().enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(train.images().select_rows(batch));
            let logits = model.forward(&mut tape, x, &[])?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite { context: format!("training loss at epoch {epoch}, batch {bi}") });
            }
            loss_sum += lv;
            model.store_mut().zero_grads();
            tape.backward(loss, model.store_mut())?;
            opt.step(model.store_mut());
        }
        let val_logits = model.logits(val.images())?;
        let val_accuracy = argmax_accuracy(&val_logits, val.labels());
        let val_loss = mean_cross_entropy(&val_logits, val.labels());
        history.push(EpochRecord { epoch, train_loss: loss_sum / batches.len() as f64, val_accuracy, val_loss });
        if (val_accuracy, -val_loss) > best.0 {
            best = ((val_accuracy, -val_loss), model.store().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let epochs_run = history.len();
    *model.store_mut() = best.1;
    model.store_mut().zero_grads();
    Ok(TrainOutcome { model, val_accuracy: (best.0).0, epochs_run, history })
}

/// Train a fresh model of `spec` on `train`, early-stopping on `val` accuracy.
pub fn train_baseline(spec: ArchSpec, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_classes("train", train, None)?;
    check_classes("validation", val, None)?;
    fit(Model::new(spec, cfg.seed)?, train, val, cfg)
}

/// Train from scratch with every sample of `excluded` removed from both
/// splits. The head keeps all `N_c` outputs.
pub fn retrain_without_class(
    spec: ArchSpec,
    train: &Dataset,
    val: &Dataset,
    excluded: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if excluded >= spec.n_classes {
        return Err(Error::LabelOutOfRange { label: excluded, classes: spec.n_classes });
    }
    if spec.n_classes < 3 {
        return Err(Error::InvalidArgument("excluding a class must leave at least 2 classes".into()));
    }
    let (train, val) = (train.without_class(excluded), val.without_class(excluded));
    check_classes("train", &train, Some(excluded))?;
    check_classes("validation", &val, Some(excluded))?;
    fit(Model::new(spec, cfg.seed)?, &train, &val, cfg)
}
