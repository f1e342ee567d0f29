//! Insertion and deletion curves over the gate elements of one selector row.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::softmax;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;
use crate::wf::{AlphaMatrix, WfModel, ALPHA_INIT};

/// Fraction of the ranked gate elements changed per curve step (21 points).
pub const DEFAULT_STEP_FRACTION: f64 = 0.05;
/// Upper clamp on normalized confidence, for baselines with near-zero confidence.
pub const MAX_NORMALIZED_CONFIDENCE: f64 = 10.0;

/// One gate element: a position in the pooled weight+bias gate list of a wrapped layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRef {
    /// Index into [`WfModel::layers`].
    pub layer: usize,
    /// Weight gates occupy `0..K`, bias gates `K..2K`.
    pub element: usize,
}

impl GateRef {
    fn matrix<'m>(&self, model: &'m WfModel) -> (&'m AlphaMatrix, usize) {
        let l = &model.layers()[self.layer];
        let k = l.gate_weights.width;
        if self.element < k {
            (&l.gate_weights, self.element)
        } else {
            (&l.gate_biases, self.element - k)
        }
    }

    /// Drive the element in `row` to its matrix's upper (`open`) or lower clip bound.
    fn saturate(&self, model: &mut WfModel, row: usize, open: bool) {
        let (a, j) = self.matrix(model);
        let a = a.clone();
        let value = if open { a.clip_hi } else { a.clip_lo };
        a.row_mut(model.store_mut(), row)[j] = value;
    }
}

/// Gate elements of row `class` over every wrapped layer, most suppressed
/// (smallest raw value) first; ties by layer, then element.
pub fn relevance_ranking(model: &WfModel, class: usize) -> Result<Vec<GateRef>> {
    if class >= model.n_classes() {
        return Err(Error::RowOutOfRange { row: class, rows: model.n_classes() });
    }
    let mut scored = Vec::new();
    for (li, l) in model.layers().iter().enumerate() {
        let k = l.gate_weights.width;
        for (offset, a) in [(0, &l.gate_weights), (k, &l.gate_biases)] {
            let row = &a.raw(model.store()).data()[class * a.width..][..a.width];
            scored.extend(row.iter().enumerate().map(|(j, &v)| (v, GateRef { layer: li, element: offset + j })));
        }
    }
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then(a.1.layer.cmp(&b.1.layer)).then(a.1.element.cmp(&b.1.element))
    });
    Ok(scored.into_iter().map(|(_, g)| g).collect())
}

/// Normalized confidence against the fraction of ranked gate elements changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub fractions: Vec<f64>,
    pub confidence: Vec<f64>,
    /// Points where the ratio was clamped to `[0, MAX_NORMALIZED_CONFIDENCE]`.
    pub clamped: usize,
}

impl Curve {
    /// Area under the curve by the trapezoidal rule.
    pub fn auc(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.confidence.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Smallest fraction whose confidence is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<f64> {
        self.fractions.iter().zip(&self.confidence).find(|(_, c)| **c < threshold).map(|(f, _)| *f)
    }

    /// Smallest fraction whose confidence is above `threshold`.
    pub fn first_above(&self, threshold: f64) -> Option<f64> {
        self.fractions.iter().zip(&self.confidence).find(|(_, c)| **c > threshold).map(|(f, _)| *f)
    }

    /// Two-column CSV with a header row.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fraction", "normalized_confidence"])?;
        for (f, c) in self.fractions.iter().zip(&self.confidence) {
            out.write_record([f.to_string(), c.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn steps_for(step_fraction: f64) -> Result<usize> {
    if !(step_fraction > 0.0 && step_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("step fraction must be in (0, 1], got {step_fraction}")));
    }
    Ok((1.0 / step_fraction).round().max(1.0) as usize)
}

/// Mean softmax probability of each image's label.
fn mean_label_confidence(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let total: f64 = logits.data().chunks(c).zip(labels).map(|(row, &y)| softmax(row)[y]).sum();
    total / labels.len() as f64
}

fn normalize(value: f64, baseline: f64, clamped: &mut usize) -> f64 {
    let ratio = if baseline > 0.0 { value / baseline } else if value > 0.0 { f64::INFINITY } else { 0.0 };
    if ratio > MAX_NORMALIZED_CONFIDENCE {
        *clamped += 1;
        MAX_NORMALIZED_CONFIDENCE
    } else {
        ratio
    }
}

/// Which images are scored and under which selector rows.
enum Probe {
    /// Class-`c` images under row `c`.
    OwnClass,
    /// All other images, each under its own label's row.
    OtherClasses,
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    mut model: WfModel,
    baseline: &dyn Classifier,
    test: &Dataset,
    class: usize,
    ranking: &[GateRef],
    open: bool,
    probe: Probe,
    step_fraction: f64,
) -> Result<Curve> {
    let n = steps_for(step_fraction)?;
    let images = match probe {
        Probe::OwnClass => test.of_class(class),
        Probe::OtherClasses => test.without_class(class),
    };
    if images.is_empty() {
        return Err(Error::Empty(format!("no test images for the curve of class {class}")));
    }
    let labels = images.labels().to_vec();
    let rows = match probe {
        Probe::OwnClass => vec![class; labels.len()],
        Probe::OtherClasses => labels.clone(),
    };
    let base = mean_label_confidence(&baseline.class_logits(images.images(), None)?, &labels);
    let mut curve = Curve { fractions: Vec::with_capacity(n + 1), confidence: Vec::with_capacity(n + 1), clamped: 0 };
    let mut done = 0;
    for i in 0..=n {
        let upto = (i as f64 * ranking.len() as f64 / n as f64).round() as usize;
        for g in &ranking[done..upto] {
            g.saturate(&mut model, class, open);
        }
        done = upto;
        let conf = mean_label_confidence(&model.logits_per_row(images.images(), &rows)?, &labels);
        curve.fractions.push(i as f64 / n as f64);
        curve.confidence.push(normalize(conf, base, &mut curve.clamped));
    }
    Ok(curve)
}

fn check_baseline(model: &WfModel, baseline: &dyn Classifier) -> Result<()> {
    if model.n_classes() != baseline.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "baseline has {} classes, gated model {}",
            baseline.n_classes(),
            model.n_classes()
        )));
    }
    Ok(())
}

fn reset_gates(model: &mut WfModel) {
    let params: Vec<_> = model.alphas().map(|a| a.param).collect();
    for p in params {
        model.store_mut().value_mut(p).iter_mut().for_each(|v| *v = ALPHA_INIT);
    }
}

/// Starting from the untrained gates, reopen the elements of row `class`
/// (to the upper clip bound) in relevance order, scoring class-`class`
/// confidence relative to `baseline`.
pub fn insertion_curve(
    untrained: &WfModel,
    baseline: &dyn Classifier,
    test: &Dataset,
    class: usize,
    step_fraction: f64,
) -> Result<Curve> {
    check_baseline(untrained, baseline)?;
    let ranking = relevance_ranking(untrained, class)?;
    let mut model = untrained.clone();
    model.set_masking(true);
    sweep(model, baseline, test, class, &ranking, true, Probe::OwnClass, step_fraction)
}

/// Starting from freshly initialized gates, close the elements of row
/// `class` (to the lower clip bound) in the relevance order of the untrained
/// gates, scoring class-`class` confidence relative to `baseline`.
pub fn deletion_curve(
    untrained: &WfModel,
    baseline: &dyn Classifier,
    test: &Dataset,
    class: usize,
    step_fraction: f64,
) -> Result<Curve> {
    check_baseline(untrained, baseline)?;
    let ranking = relevance_ranking(untrained, class)?;
    let mut model = untrained.clone();
    model.set_masking(true);
    reset_gates(&mut model);
    sweep(model, baseline, test, class, &ranking, false, Probe::OwnClass, step_fraction)
}

/// The deletion manipulation of row `class`, scored on the images of every
/// other class under their own rows.
pub fn other_class_curve(
    untrained: &WfModel,
    baseline: &dyn Classifier,
    test: &Dataset,
    class: usize,
    step_fraction: f64,
) -> Result<Curve> {
    check_baseline(untrained, baseline)?;
    let ranking = relevance_ranking(untrained, class)?;
    let mut model = untrained.clone();
    model.set_masking(true);
    reset_gates(&mut model);
    sweep(model, baseline, test, class, &ranking, false, Probe::OtherClasses, step_fraction)
}
