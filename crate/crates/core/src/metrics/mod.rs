//! Forgetting metrics: retain/forget accuracy, output-distribution distances,
//! ZRF and gate insertion/deletion curves.

mod curves;

pub use curves::{
    deletion_curve, insertion_curve, other_class_curve, relevance_ranking, Curve, GateRef, DEFAULT_STEP_FRACTION,
    MAX_NORMALIZED_CONFIDENCE,
};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Tolerance on the total mass of a [`ProbVector`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A finite, nonnegative vector summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("probabilities must be finite and >= 0: {values:?}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Unnormalized { sum });
        }
        Ok(ProbVector(values))
    }

    /// Softmax of a logit row.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "logits".into() });
        }
        Ok(ProbVector(softmax(logits)))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of `[N, C]` logits.
fn probabilities(logits: &Tensor) -> Result<Vec<ProbVector>> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(ProbVector::from_logits).collect()
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter().zip(m).filter(|(p, _)| **p > 0.0).map(|(p, m)| p * (p / m).log2()).sum()
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
pub fn js_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("js_divergence", format!("lengths {} and {}", p.len(), q.len())));
    }
    let m: Vec<f64> = p.0.iter().zip(&q.0).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(&p.0, &m) + 0.5 * kl_to_mixture(&q.0, &m);
    Ok(js.clamp(0.0, 1.0))
}

fn nonempty(images: &Tensor, what: &str) -> Result<()> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Empty(what.into()));
    }
    Ok(())
}

/// Fraction of `samples` whose argmax prediction equals the label.
pub fn accuracy(model: &dyn Classifier, samples: &Dataset, selector: Option<usize>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("accuracy needs at least one sample".into()));
    }
    let logits = model.class_logits(samples.images(), selector)?;
    Ok(crate::models::argmax_accuracy(&logits, samples.labels()))
}

/// Accuracy on the test images of class `c`, with selector `c`.
pub fn forget_accuracy(model: &dyn Classifier, test: &Dataset, c: usize) -> Result<f64> {
    check_class(model, c)?;
    accuracy(model, &test.of_class(c), Some(c))
}

/// Accuracy on the test images of every class but `c`, with selector `c`.
pub fn retain_accuracy(model: &dyn Classifier, test: &Dataset, c: usize) -> Result<f64> {
    check_class(model, c)?;
    accuracy(model, &test.without_class(c), Some(c))
}

fn check_class(model: &dyn Classifier, c: usize) -> Result<()> {
    if c >= model.n_classes() {
        return Err(Error::LabelOutOfRange { label: c, classes: model.n_classes() });
    }
    Ok(())
}

/// Per-sample probability vectors of two models on the same images.
fn paired_probabilities(
    a: &dyn Classifier,
    a_selector: Option<usize>,
    b: &dyn Classifier,
    b_selector: Option<usize>,
    images: &Tensor,
) -> Result<(Vec<ProbVector>, Vec<ProbVector>)> {
    if a.n_classes() != b.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "models disagree on class count: {} vs {}",
            a.n_classes(),
            b.n_classes()
        )));
    }
    Ok((probabilities(&a.class_logits(images, a_selector)?)?, probabilities(&b.class_logits(images, b_selector)?)?))
}

/// Mean ℓ2 distance between the output probabilities of `model` (selector
/// `class`) and the model retrained without `class`, over `forget` images.
pub fn activation_distance(
    model: &dyn Classifier,
    oracle: Option<&dyn Classifier>,
    forget: &Tensor,
    class: usize,
) -> Result<f64> {
    let oracle = oracle.ok_or(Error::MissingOracle(class))?;
    nonempty(forget, "activation distance needs forget samples")?;
    let (p, q) = paired_probabilities(model, Some(class), oracle, None, forget)?;
    let total: f64 = p
        .iter()
        .zip(&q)
        .map(|(p, q)| p.0.iter().zip(&q.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    Ok(total / p.len() as f64)
}

/// Mean JS divergence between `model` (selector `class`) and the retrained oracle on `forget` images.
pub fn mean_js_divergence(
    model: &dyn Classifier,
    oracle: Option<&dyn Classifier>,
    forget: &Tensor,
    class: usize,
) -> Result<f64> {
    let oracle = oracle.ok_or(Error::MissingOracle(class))?;
    nonempty(forget, "JS divergence needs forget samples")?;
    let (p, q) = paired_probabilities(model, Some(class), oracle, None, forget)?;
    mean_js(&p, &q)
}

fn mean_js(p: &[ProbVector], q: &[ProbVector]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        total += js_divergence(a, b)?;
    }
    Ok(total / p.len() as f64)
}

/// Zero-retrain-forgetting score: one minus the mean JS divergence between
/// `model` (selector `class`) and a randomly initialized twin on `forget` images.
pub fn zrf(model: &dyn Classifier, random_twin: &dyn Classifier, forget: &Tensor, class: usize) -> Result<f64> {
    nonempty(forget, "ZRF needs forget samples")?;
    let (p, q) = paired_probabilities(model, Some(class), random_twin, None, forget)?;
    Ok((1.0 - mean_js(&p, &q)?).clamp(0.0, 1.0))
}

/// All metrics for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub acc_retain: f64,
    pub acc_forget: f64,
    /// `None` when no retrained oracle was supplied.
    pub activation_distance: Option<f64>,
    pub js_divergence: Option<f64>,
    pub zrf: f64,
    /// `None` for models without gates.
    pub insertion_auc: Option<f64>,
    pub deletion_auc: Option<f64>,
}

/// Metrics for one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub classes: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn mean_acc_retain(&self) -> f64 {
        self.classes.iter().map(|c| c.acc_retain).sum::<f64>() / self.classes.len().max(1) as f64
    }

    pub fn mean_acc_forget(&self) -> f64 {
        self.classes.iter().map(|c| c.acc_forget).sum::<f64>() / self.classes.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table for terminals.
    pub fn write_table(&self, mut w: impl Write) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(w, "model: {}  dataset: {}  seeds: {:?}", self.model, self.dataset, self.seeds)?;
        writeln!(
            w,
            "{:>5} {:>8} {:>8} {:>9} {:>8} {:>7} {:>9} {:>8}",
            "class", "acc_r", "acc_f", "act_dist", "js_div", "zrf", "ins_auc", "del_auc"
        )?;
        for c in &self.classes {
            writeln!(
                w,
                "{:>5} {:>8.4} {:>8.4} {:>9} {:>8} {:>7.4} {:>9} {:>8}",
                c.class,
                c.acc_retain,
                c.acc_forget,
                opt(c.activation_distance),
                opt(c.js_divergence),
                c.zrf,
                opt(c.insertion_auc),
                opt(c.deletion_auc)
            )?;
        }
        writeln!(w, " mean {:>8.4} {:>8.4}", self.mean_acc_retain(), self.mean_acc_forget())?;
        Ok(())
    }
}
