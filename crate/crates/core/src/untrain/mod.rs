//! Single-round multi-class untraining of a gated model.
//!
//! Each mini-batch is split in half. The first half is forwarded with every
//! sample's own label as gate row and its loss is pushed up; the second half
//! is replicated `χ` times with random gate rows and its loss is kept low.
//! Only the raw gate values are updated, with plain gradient descent.

mod loss;

pub use loss::{
    batch_loss, composite_loss, difference_loss, draw_retain_rows, forget_loss, regularizer, retain_loss,
    BatchParts, LossReport,
};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::models::ArchId;
use crate::wf::WfModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `λ0·S_r + λ1/(S_u + ε) + λ2·R`.
    Reciprocal,
    /// `λ0·S_r − λ1·S_u + λ2·R`; unbounded below.
    Difference,
    /// Reciprocal structure with squared logit distances to the ungated model instead of cross-entropy.
    LogitTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UntrainConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Label expansion factor χ: copies of the retain half, each with fresh random rows.
    pub expansion: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub validations_per_epoch: usize,
    /// Hard cap on passes over the untraining data.
    pub max_epochs: usize,
    pub seed: u64,
    /// Seed for the validation batches and gate rows; fixed so validation losses are comparable.
    pub validation_seed: u64,
    pub loss_mode: LossMode,
    pub epsilon_guard: f64,
}

impl Default for UntrainConfig {
    fn default() -> Self {
        UntrainConfig {
            lambda0: 1.0,
            lambda1: 10.0,
            lambda2: 1.0,
            expansion: 3,
            learning_rate: 100.0,
            batch_size: 128,
            accumulation_steps: 16,
            patience: 10,
            validations_per_epoch: 5,
            max_epochs: 100,
            seed: 0,
            validation_seed: 0x5EED,
            loss_mode: LossMode::Reciprocal,
            epsilon_guard: 1e-8,
        }
    }
}

impl UntrainConfig {
    /// Defaults with the forget weight used for each architecture family
    /// (10 for convolutional models, 100 for attention models).
    pub fn for_arch(arch: ArchId) -> Self {
        let lambda1 = match arch {
            ArchId::SmallCnn => 10.0,
            ArchId::TinyVit => 100.0,
        };
        UntrainConfig { lambda1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if [self.lambda0, self.lambda1, self.lambda2].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("λ weights must be finite and nonnegative".into());
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::OddBatch(self.batch_size));
        }
        if self.expansion == 0 || self.accumulation_steps == 0 || self.patience == 0 {
            return bad("expansion, accumulation_steps and patience must be positive".into());
        }
        if self.validations_per_epoch == 0 || self.max_epochs == 0 {
            return bad("validations_per_epoch and max_epochs must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.epsilon_guard > 0.0) {
            return bad(format!("epsilon guard must be > 0, got {}", self.epsilon_guard));
        }
        Ok(())
    }
}

/// One validation event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Optimizer steps taken so far.
    pub step: usize,
    pub epoch: usize,
    /// Mean training terms over the batches since the previous record (zero at step 0).
    #[serde(rename = "S_r")]
    pub s_r: f64,
    #[serde(rename = "S_u")]
    pub s_u: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub val_l: f64,
}

#[derive(Clone, Debug)]
pub struct UntrainOutcome {
    pub history: Vec<HistoryRecord>,
    pub steps: usize,
    pub epochs: usize,
    pub best_val_loss: f64,
    /// Step whose gate values were kept.
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Write one JSON object per line.
pub fn write_history_jsonl(mut w: impl Write, history: &[HistoryRecord]) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Composite loss on a fixed set of validation batches.
pub fn validation_loss(model: &WfModel, val: &Dataset, cfg: &UntrainConfig) -> Result<f64> {
    let even = val.len() - val.len() % 2;
    let b = cfg.batch_size.min(even);
    if b == 0 {
        return Err(Error::Empty("validation split has fewer than 2 samples".into()));
    }
    let mut stream = BatchStream::new(val.len(), b, cfg.validation_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.validation_seed);
    let batches = stream.epoch();
    let mut total = 0.0;
    for batch in &batches {
        let parts = BatchParts::from_batch(val, batch, model.n_classes(), cfg.expansion, &mut rng)?;
        let mut tape = Tape::new();
        let (_, report) = batch_loss(model, model.store(), &mut tape, &parts, cfg)?;
        total += report.l;
    }
    Ok(total / batches.len() as f64)
}

/// Untrain every class of `model` at once.
///
/// Batches come from `data`; the composite loss on `val` is evaluated after
/// optimizer steps, `validations_per_epoch` times per epoch (at least once per
/// step). The gate values with the lowest validation loss are restored at the end.
pub fn untrain(model: &mut WfModel, data: &Dataset, val: &Dataset, cfg: &UntrainConfig) -> Result<UntrainOutcome> {
    cfg.validate()?;
    if data.n_classes() != model.n_classes() || val.n_classes() != model.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "datasets have {} / {} classes, model has {}",
            data.n_classes(),
            val.n_classes(),
            model.n_classes()
        )));
    }
    let mut stream = BatchStream::new(data.len(), cfg.batch_size, cfg.seed.wrapping_add(1))?;
    let per_epoch = stream.batches_per_epoch();
    if per_epoch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = per_epoch as f64 / cfg.accumulation_steps as f64;
    let val_interval = ((steps_per_epoch / cfg.validations_per_epoch as f64).round() as usize).max(1);

    let initial = validation_loss(model, val, cfg)?;
    let mut history =
        vec![HistoryRecord { step: 0, epoch: 0, s_r: 0.0, s_u: 0.0, r: 0.0, l: 0.0, val_l: initial }];
    let mut best = (initial, 0, model.alpha_snapshot());
    let mut since_best = 0;
    let (mut step, mut accumulated, mut batch_index) = (0, 0, 0);
    let mut window = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut stopped_early = false;
    let mut epoch = 0;
    model.store_mut().zero_grads();
    'outer: while epoch < cfg.max_epochs {
        for batch in stream.epoch() {
            let parts = BatchParts::from_batch(data, &batch, model.n_classes(), cfg.expansion, &mut rng)?;
            let mut tape = Tape::new();
            let (loss, report) = batch_loss(model, model.store(), &mut tape, &parts, cfg)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFinite { context: format!("untraining loss at batch {batch_index}") },
                    other => other,
                })?;
            tape.backward(loss, model.store_mut())?;
            drop(tape);
            window = (window.0 + report.s_r, window.1 + report.s_u, window.2 + report.r, window.3 + report.l, window.4 + 1);
            batch_index += 1;
            accumulated += 1;
            if accumulated < cfg.accumulation_steps {
                continue;
            }
            model.store_mut().sgd_step(cfg.learning_rate, 1.0 / accumulated as f64);
            model.clip_alphas();
            model.store_mut().zero_grads();
            accumulated = 0;
            step += 1;
            if step % val_interval != 0 {
                continue;
            }
            let val_l = validation_loss(model, val, cfg)?;
            let n = window.4 as f64;
            history.push(HistoryRecord {
                step,
                epoch,
                s_r: window.0 / n,
                s_u: window.1 / n,
                r: window.2 / n,
                l: window.3 / n,
                val_l,
            });
            window = (0.0, 0.0, 0.0, 0.0, 0);
            if val_l < best.0 {
                best = (val_l, step, model.alpha_snapshot());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break 'outer;
                }
            }
        }
        epoch += 1;
    }
    model.store_mut().zero_grads();
    model.restore_alphas(&best.2)?;
    Ok(UntrainOutcome {
        history,
        steps: step,
        epochs: epoch + usize::from(stopped_early),
        best_val_loss: best.0,
        best_step: best.1,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
