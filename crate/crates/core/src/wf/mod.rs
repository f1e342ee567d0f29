//! Per-class sigmoid gates around inner layers of a trained model.
//!
//! A wrapped layer owns two `[N_c, K]` matrices of raw gate values, one for
//! the weights and one for the biases, where `K` is the layer's output width.
//! A forward pass picks one row per sample (the selector) and multiplies
//! output channel/feature `k` by `σ(raw[row, k])`. For a convolution this is
//! the same as scaling kernel `k` before convolving, since convolution is
//! linear in each kernel.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{chunked_logits, Classifier, GateVars, LayerKind, Layers, Model};
use crate::tensor::Tensor;

/// Raw gate value every element starts from; `σ(3) ≈ 0.9526`.
pub const ALPHA_INIT: f64 = 3.0;
pub const CLIP_LO: f64 = -3.0;
pub const CLIP_HI: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    ConvOutChannel,
    ProjectionOutFeature,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::ConvOutChannel => "conv-out-channel",
            Granularity::ProjectionOutFeature => "projection-out-feature",
        }
    }
}

/// Handle to one `[rows, width]` gate matrix stored in the model's parameter store.
#[derive(Clone, Debug)]
pub struct AlphaMatrix {
    pub param: ParamId,
    pub rows: usize,
    pub width: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub granularity: Granularity,
}

impl AlphaMatrix {
    pub fn raw<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.value(self.param)
    }

    /// `σ(raw[row])`.
    pub fn effective_mask(&self, store: &ParamStore, row: usize) -> Result<Vec<f64>> {
        if row >= self.rows {
            return Err(Error::RowOutOfRange { row, rows: self.rows });
        }
        Ok(self.raw(store).row(row).iter().map(|&a| sigmoid(a)).collect())
    }

    pub fn clip(&self, store: &mut ParamStore) {
        let (lo, hi) = (self.clip_lo, self.clip_hi);
        store.value_mut(self.param).iter_mut().for_each(|a| *a = a.clamp(lo, hi));
    }

    /// Mutable view of one row of raw values.
    pub fn row_mut<'s>(&self, store: &'s mut ParamStore, row: usize) -> &'s mut [f64] {
        &mut store.value_mut(self.param)[row * self.width..][..self.width]
    }
}

/// A base-model layer wrapped with weight and bias gates.
#[derive(Clone, Debug)]
pub struct WfLayer {
    /// Index into [`Model::layers`].
    pub layer_index: usize,
    pub name: String,
    pub gate_weights: AlphaMatrix,
    pub gate_biases: AlphaMatrix,
    pub masking_enabled: bool,
}

impl WfLayer {
    pub fn granularity(&self) -> Granularity {
        self.gate_weights.granularity
    }

    /// Number of gate elements (weight and bias gates, all rows).
    pub fn gate_count(&self) -> usize {
        2 * self.gate_weights.rows * self.gate_weights.width
    }
}

/// Which base layers to wrap.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Every convolution (CNN) or every attention QKV projection (ViT).
    #[default]
    Default,
    Named(Vec<String>),
}

fn granularity_of(kind: LayerKind) -> Option<Granularity> {
    match kind {
        LayerKind::Conv => Some(Granularity::ConvOutChannel),
        LayerKind::AttentionQkv => Some(Granularity::ProjectionOutFeature),
        _ => None,
    }
}

/// A trained model whose selected layers carry per-class gates.
///
/// The gate matrices live in the same parameter store as the base weights;
/// wrapping freezes every base parameter, so only the gates are trainable.
#[derive(Clone, Debug)]
pub struct WfModel {
    base: Model,
    layers: Vec<WfLayer>,
}

/// Wrap the selected layers of `base` with gates initialized to [`ALPHA_INIT`].
pub fn wf_wrap(base: Model, selection: &LayerSelection) -> Result<WfModel> {
    wf_wrap_with_bounds(base, selection, CLIP_LO, CLIP_HI)
}

pub fn wf_wrap_with_bounds(mut base: Model, selection: &LayerSelection, clip_lo: f64, clip_hi: f64) -> Result<WfModel> {
    if !(clip_lo < clip_hi) {
        return Err(Error::InvalidArgument(format!("clip bounds [{clip_lo}, {clip_hi}] are empty")));
    }
    let indices: Vec<usize> = match selection {
        LayerSelection::Default => (0..base.layers().len())
            .filter(|&i| granularity_of(base.layers()[i].kind).is_some())
            .collect(),
        LayerSelection::Named(names) => {
            let mut idx = names.iter().map(|n| base.layer_index(n)).collect::<Result<Vec<_>>>()?;
            idx.sort_unstable();
            idx.dedup();
            idx
        }
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument("layer selection wraps nothing".into()));
    }
    let ids: Vec<ParamId> = base.store().ids().collect();
    for id in ids {
        base.store_mut().set_trainable(id, false);
    }
    let n_c = base.n_classes();
    let mut layers = Vec::with_capacity(indices.len());
    for i in indices {
        let info = base.layers()[i].clone();
        let granularity = granularity_of(info.kind).ok_or_else(|| Error::UnsupportedLayer(info.name.clone()))?;
        let mut gate = |suffix: &str| {
            let param = base.store_mut().add(
                format!("wf.{}.{suffix}", info.name),
                Tensor::full(&[n_c, info.width], ALPHA_INIT),
                true,
            );
            AlphaMatrix { param, rows: n_c, width: info.width, clip_lo, clip_hi, granularity }
        };
        let gate_weights = gate("alpha_w");
        let gate_biases = gate("alpha_b");
        layers.push(WfLayer { layer_index: i, name: info.name, gate_weights, gate_biases, masking_enabled: true });
    }
    Ok(WfModel { base, layers })
}

impl WfModel {
    pub fn base(&self) -> &Model {
        &self.base
    }

    /// The base model with the gates removed and its parameters trainable again.
    pub fn into_base(self) -> Model {
        let mut plain = Model::new(self.base.spec(), 0).expect("spec was validated when the model was built");
        for (_, p) in self.base.store().iter().filter(|(_, p)| !p.name().starts_with("wf.")) {
            let id = plain.store().find(p.name()).expect("same architecture");
            plain.store_mut().set_value(id, p.value().clone()).expect("same shapes");
        }
        plain
    }

    pub fn n_classes(&self) -> usize {
        self.base.n_classes()
    }

    pub fn layers(&self) -> &[WfLayer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&WfLayer> {
        self.layers.iter().find(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn store(&self) -> &ParamStore {
        self.base.store()
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.base.store_mut()
    }

    /// Every gate matrix, weight gates before bias gates within each layer.
    pub fn alphas(&self) -> impl Iterator<Item = &AlphaMatrix> {
        self.layers.iter().flat_map(|l| [&l.gate_weights, &l.gate_biases])
    }

    /// Raw gate values of every layer, in [`WfModel::alphas`] order.
    pub fn alpha_snapshot(&self) -> Vec<Tensor> {
        self.alphas().map(|a| a.raw(self.store()).clone()).collect()
    }

    pub fn restore_alphas(&mut self, snapshot: &[Tensor]) -> Result<()> {
        let params: Vec<ParamId> = self.alphas().map(|a| a.param).collect();
        if params.len() != snapshot.len() {
            return Err(Error::InvalidArgument(format!("{} gate tensors for {} gates", snapshot.len(), params.len())));
        }
        for (p, t) in params.into_iter().zip(snapshot) {
            self.store_mut().set_value(p, t.clone())?;
        }
        Ok(())
    }

    pub fn gate_count(&self) -> usize {
        self.layers.iter().map(WfLayer::gate_count).sum()
    }

    pub fn set_masking(&mut self, enabled: bool) {
        self.layers.iter_mut().for_each(|l| l.masking_enabled = enabled);
    }

    pub fn masking_enabled(&self) -> bool {
        self.layers.iter().any(|l| l.masking_enabled)
    }

    /// Clamp every raw gate value into its matrix's clip bounds.
    pub fn clip_alphas(&mut self) {
        let alphas: Vec<AlphaMatrix> = self.alphas().cloned().collect();
        for a in alphas {
            a.clip(self.store_mut());
        }
    }

    fn check_rows(&self, rows: &[usize]) -> Result<()> {
        match rows.iter().find(|&&r| r >= self.n_classes()) {
            Some(&r) => Err(Error::RowOutOfRange { row: r, rows: self.n_classes() }),
            None => Ok(()),
        }
    }

    /// Record per-sample gate masks `σ(raw[rows[b]])` for every enabled layer,
    /// indexed like [`Model::layers`].
    pub fn gate_vars(&self, store: &ParamStore, tape: &mut Tape, rows: &[usize]) -> Result<Vec<Option<GateVars>>> {
        self.check_rows(rows)?;
        let mut gates = vec![None; self.base.layers().len()];
        for l in self.layers.iter().filter(|l| l.masking_enabled) {
            let mut mask = |a: &AlphaMatrix| -> Result<Var> {
                let raw = tape.param(store, a.param);
                let picked = tape.gather_rows(raw, rows)?;
                Ok(tape.sigmoid(picked))
            };
            let weight_mask = mask(&l.gate_weights)?;
            let bias_mask = mask(&l.gate_biases)?;
            gates[l.layer_index] = Some(GateVars { weight_mask, bias_mask });
        }
        Ok(gates)
    }

    /// Forward pass of `x[B, 1, H, W]` where sample `b` uses gate row `rows[b]` in every layer.
    pub fn forward(&self, tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
        self.forward_with(self.store(), tape, x, rows)
    }

    pub fn forward_with(&self, store: &ParamStore, tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
        let b = tape.shape(x).first().copied().unwrap_or(0);
        if rows.len() != b {
            return Err(Error::shape("wf_forward", format!("{} selector rows for a batch of {b}", rows.len())));
        }
        let gates = self.gate_vars(store, tape, rows)?;
        self.base.forward_with(store, tape, x, &gates)
    }

    /// Logits with selector `row` for every image.
    pub fn logits(&self, images: &Tensor, row: usize) -> Result<Tensor> {
        self.check_rows(&[row])?;
        chunked_logits(images, self.n_classes(), |tape, x| {
            let rows = vec![row; tape.shape(x)[0]];
            self.forward(tape, x, &rows)
        })
    }

    /// Logits with per-image selector rows.
    pub fn logits_per_row(&self, images: &Tensor, rows: &[usize]) -> Result<Tensor> {
        if rows.len() != images.shape().first().copied().unwrap_or(0) {
            return Err(Error::shape("logits", format!("{} rows for {:?}", rows.len(), images.shape())));
        }
        let mut start = 0;
        chunked_logits(images, self.n_classes(), |tape, x| {
            let n = tape.shape(x)[0];
            let out = self.forward(tape, x, &rows[start..start + n]);
            start += n;
            out
        })
    }

    /// Apply wrapped layer `name` alone to `x`, with gate row `row`.
    ///
    /// Convolutions take `x[B, Cin, H, W]`; projections take `x[B, T, Fin]` or `x[B, Fin]`.
    pub fn layer_forward(&self, name: &str, x: &Tensor, row: usize) -> Result<Tensor> {
        let l = self.layer(name)?;
        self.check_rows(&[row])?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = x.shape().first().copied().unwrap_or(0);
        let rows = vec![row; b];
        let gates = self.gate_vars(self.store(), &mut tape, &rows)?;
        let layers = Layers::new(&self.base, self.store(), &gates);
        let y = match l.granularity() {
            Granularity::ConvOutChannel => layers.conv(&mut tape, l.layer_index, xv)?,
            Granularity::ProjectionOutFeature => layers.linear(&mut tape, l.layer_index, xv)?,
        };
        Ok(tape.value(y).clone())
    }

    /// [`WfModel::layer_forward`] for a convolution layer; rejects projections.
    pub fn conv_forward(&self, name: &str, x: &Tensor, row: usize) -> Result<Tensor> {
        self.expect_granularity(name, Granularity::ConvOutChannel)?;
        self.layer_forward(name, x, row)
    }

    /// [`WfModel::layer_forward`] for a linear projection; rejects convolutions.
    pub fn projection_forward(&self, name: &str, x: &Tensor, row: usize) -> Result<Tensor> {
        self.expect_granularity(name, Granularity::ProjectionOutFeature)?;
        self.layer_forward(name, x, row)
    }

    fn expect_granularity(&self, name: &str, expected: Granularity) -> Result<()> {
        let found = self.layer(name)?.granularity();
        if found != expected {
            return Err(Error::Granularity { layer: name.to_string(), expected: expected.as_str(), found: found.as_str() });
        }
        Ok(())
    }
}

impl Classifier for WfModel {
    fn n_classes(&self) -> usize {
        self.base.n_classes()
    }

    /// With masking enabled a selector is required; with masking disabled the
    /// base model's logits are returned and the selector is ignored.
    fn class_logits(&self, images: &Tensor, selector: Option<usize>) -> Result<Tensor> {
        match selector {
            Some(row) => self.logits(images, row),
            None if !self.masking_enabled() => self.base.logits(images),
            None => Err(Error::InvalidArgument("a gated model needs a selector row".into())),
        }
    }
}
