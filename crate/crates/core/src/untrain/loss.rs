use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LossMode, UntrainConfig};
use crate::autodiff::{sigmoid, ParamStore, Tape, Var};
use crate::data::{split_batch, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wf::WfModel;

/// The scalar terms of one composite loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "S_r")]
    pub s_r: f64,
    #[serde(rename = "S_u")]
    pub s_u: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "L")]
    pub l: f64,
}

/// `λ0·S_r + λ1/(S_u + ε) + λ2·R`.
pub fn composite_loss(s_r: f64, s_u: f64, r: f64, cfg: &UntrainConfig) -> Result<f64> {
    if ![s_r, s_u, r].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: format!("loss terms S_r={s_r}, S_u={s_u}, R={r}") });
    }
    Ok(cfg.lambda0 * s_r + cfg.lambda1 / (s_u + cfg.epsilon_guard) + cfg.lambda2 * r)
}

/// `λ0·S_r − λ1·S_u + λ2·R`.
pub fn difference_loss(s_r: f64, s_u: f64, r: f64, cfg: &UntrainConfig) -> Result<f64> {
    if ![s_r, s_u, r].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: format!("loss terms S_r={s_r}, S_u={s_u}, R={r}") });
    }
    Ok(cfg.lambda0 * s_r - cfg.lambda1 * s_u + cfg.lambda2 * r)
}

/// Uniform random gate rows for `expansion` copies of a retain half of `half`
/// samples, copy-major. A sample's own class may be drawn.
pub fn draw_retain_rows(rng: &mut impl Rng, n_classes: usize, half: usize, expansion: usize) -> Vec<usize> {
    (0..half * expansion).map(|_| rng.gen_range(0..n_classes)).collect()
}

/// A mini-batch prepared for the composite loss.
#[derive(Clone, Debug)]
pub struct BatchParts {
    pub forget_images: Tensor,
    pub forget_labels: Vec<usize>,
    pub retain_images: Tensor,
    pub retain_labels: Vec<usize>,
    /// `expansion × retain_labels.len()` gate rows, copy-major.
    pub retain_rows: Vec<usize>,
    pub expansion: usize,
}

impl BatchParts {
    /// First half of `batch` is forgotten, second half retained.
    pub fn from_batch(
        ds: &Dataset,
        batch: &[usize],
        n_classes: usize,
        expansion: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (forget, retain) = split_batch(batch)?;
        let labels = |idx: &[usize]| idx.iter().map(|&i| ds.labels()[i]).collect::<Vec<_>>();
        Ok(BatchParts {
            forget_images: ds.images().select_rows(forget),
            forget_labels: labels(forget),
            retain_images: ds.images().select_rows(retain),
            retain_labels: labels(retain),
            retain_rows: draw_retain_rows(rng, n_classes, retain.len(), expansion),
            expansion,
        })
    }

    /// Merge several batches into one, keeping every sample's role and gate rows.
    pub fn concat(parts: &[BatchParts]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("no batches to merge".into()))?;
        let expansion = first.expansion;
        if parts.iter().any(|p| p.expansion != expansion) {
            return Err(Error::InvalidArgument("batches differ in expansion factor".into()));
        }
        let fi: Vec<&Tensor> = parts.iter().map(|p| &p.forget_images).collect();
        let ri: Vec<&Tensor> = parts.iter().map(|p| &p.retain_images).collect();
        let mut retain_rows = Vec::new();
        for copy in 0..expansion {
            for p in parts {
                let h = p.retain_labels.len();
                retain_rows.extend_from_slice(&p.retain_rows[copy * h..][..h]);
            }
        }
        Ok(BatchParts {
            forget_images: Tensor::concat_rows(&fi)?,
            forget_labels: parts.iter().flat_map(|p| p.forget_labels.iter().copied()).collect(),
            retain_images: Tensor::concat_rows(&ri)?,
            retain_labels: parts.iter().flat_map(|p| p.retain_labels.iter().copied()).collect(),
            retain_rows,
            expansion,
        })
    }
}

/// Regularizer recorded on `tape`: per gated layer, the mean of `1 − σ(raw)`
/// over all weight- and bias-gate elements; then the mean over layers.
fn regularizer_var(model: &WfModel, store: &ParamStore, tape: &mut Tape) -> Result<Var> {
    let mut total: Option<Var> = None;
    for l in model.layers() {
        let sw = tape.param(store, l.gate_weights.param);
        let sw = tape.sigmoid(sw);
        let sw = tape.sum(sw);
        let sb = tape.param(store, l.gate_biases.param);
        let sb = tape.sigmoid(sb);
        let sb = tape.sum(sb);
        let s = tape.add(sw, sb)?;
        let m = tape.scale(s, -1.0 / l.gate_count() as f64);
        let m = tape.add_scalar(m, 1.0);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.ok_or_else(|| Error::Empty("model has no gated layers".into()))?;
    Ok(tape.scale(total, 1.0 / model.layers().len() as f64))
}

/// Regularizer value for the current gates.
pub fn regularizer(model: &WfModel) -> f64 {
    let per_layer: f64 = model
        .layers()
        .iter()
        .map(|l| {
            let s: f64 = [&l.gate_weights, &l.gate_biases]
                .iter()
                .flat_map(|a| a.raw(model.store()).data())
                .map(|&v| 1.0 - sigmoid(v))
                .sum();
            s / l.gate_count() as f64
        })
        .sum();
    per_layer / model.layers().len() as f64
}

fn repeat_rows(t: &Tensor, times: usize) -> Result<Tensor> {
    let copies: Vec<&Tensor> = std::iter::repeat(t).take(times).collect();
    Tensor::concat_rows(&copies)
}

/// Record the composite loss of one batch on `tape`, reading gate values from `store`.
///
/// The forget half and all retain copies go through a single forward pass.
pub fn batch_loss(
    model: &WfModel,
    store: &ParamStore,
    tape: &mut Tape,
    parts: &BatchParts,
    cfg: &UntrainConfig,
) -> Result<(Var, LossReport)> {
    let h = parts.forget_labels.len();
    let hr = parts.retain_labels.len();
    let copies = parts.expansion;
    if h == 0 || hr == 0 || parts.retain_rows.len() != hr * copies {
        return Err(Error::InvalidArgument(format!(
            "malformed batch: {h} forget, {hr} retain, {} retain rows for {copies} copies",
            parts.retain_rows.len()
        )));
    }
    let retained = repeat_rows(&parts.retain_images, copies)?;
    let images = Tensor::concat_rows(&[&parts.forget_images, &retained])?;
    let rows: Vec<usize> = parts.forget_labels.iter().chain(&parts.retain_rows).copied().collect();
    let labels: Vec<usize> =
        parts.forget_labels.iter().copied().chain((0..copies).flat_map(|_| parts.retain_labels.iter().copied())).collect();

    let x = tape.constant(images);
    let logits = model.forward_with(store, tape, x, &rows)?;
    let (s_u, s_r) = match cfg.loss_mode {
        LossMode::Reciprocal | LossMode::Difference => {
            let per = tape.cross_entropy(logits, &labels)?;
            let u = tape.narrow(per, 0, 0, h)?;
            let r = tape.narrow(per, 0, h, hr * copies)?;
            (tape.mean(u)?, tape.mean(r)?)
        }
        LossMode::LogitTarget => {
            let target = {
                let mut t = Tape::new();
                let unique = Tensor::concat_rows(&[&parts.forget_images, &parts.retain_images])?;
                let xv = t.constant(unique);
                let y = model.base().forward_with(store, &mut t, xv, &[])?;
                let y = t.value(y);
                let (fy, ry) = (y.select_rows(&(0..h).collect::<Vec<_>>()), y.select_rows(&(h..h + hr).collect::<Vec<_>>()));
                Tensor::concat_rows(&[&fy, &repeat_rows(&ry, copies)?])?
            };
            let target = tape.constant(target);
            let diff = tape.sub(logits, target)?;
            let sq = tape.mul(diff, diff)?;
            let u = tape.narrow(sq, 0, 0, h)?;
            let u = tape.sum(u);
            let r = tape.narrow(sq, 0, h, hr * copies)?;
            let r = tape.sum(r);
            (tape.scale(u, 1.0 / h as f64), tape.scale(r, 1.0 / (hr * copies) as f64))
        }
    };
    let reg = regularizer_var(model, store, tape)?;
    let retain_term = tape.scale(s_r, cfg.lambda0);
    let reg_term = tape.scale(reg, cfg.lambda2);
    let forget_term = match cfg.loss_mode {
        LossMode::Difference => tape.scale(s_u, -cfg.lambda1),
        LossMode::Reciprocal | LossMode::LogitTarget => {
            let guarded = tape.add_scalar(s_u, cfg.epsilon_guard);
            let inv = tape.reciprocal(guarded);
            tape.scale(inv, cfg.lambda1)
        }
    };
    let l = tape.add(retain_term, forget_term)?;
    let l = tape.add(l, reg_term)?;
    let value = |tape: &Tape, v: Var| tape.value(v).data()[0];
    let report = LossReport { s_r: value(tape, s_r), s_u: value(tape, s_u), r: value(tape, reg), l: value(tape, l) };
    if ![report.s_r, report.s_u, report.r, report.l].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: format!("untraining loss {report:?}") });
    }
    Ok((l, report))
}

/// Mean cross-entropy of `images` against `labels`, each forwarded with its own label as gate row.
pub fn forget_loss(model: &WfModel, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.logits_per_row(images, labels)?;
    Ok(crate::models::mean_cross_entropy(&logits, labels))
}

/// Mean cross-entropy against the true labels over `expansion` copies of
/// `images`, each copy with fresh uniform random gate rows.
pub fn retain_loss(
    model: &WfModel,
    images: &Tensor,
    labels: &[usize],
    expansion: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let rows = draw_retain_rows(rng, model.n_classes(), labels.len(), expansion);
    let all = repeat_rows(images, expansion)?;
    let all_labels: Vec<usize> = (0..expansion).flat_map(|_| labels.iter().copied()).collect();
    let logits = model.logits_per_row(&all, &rows)?;
    Ok(crate::models::mean_cross_entropy(&logits, &all_labels))
}
