//! The two fixed desk-scale architectures and their training loops.

mod cnn;
mod train;
mod vit;

pub use train::{
    retrain_without_class, train_baseline, Adam, EpochRecord, OptimizerKind, TrainConfig, TrainOutcome,
};
pub(crate) use train::{argmax_accuracy, mean_cross_entropy};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GateAxis, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per forward pass when evaluating whole datasets.
pub const EVAL_CHUNK: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    SmallCnn,
    TinyVit,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::SmallCnn => "small_cnn",
            ArchId::TinyVit => "tiny_vit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(ArchId::SmallCnn),
            "tiny_vit" => Ok(ArchId::TinyVit),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything needed to instantiate an architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: ArchId,
    pub n_classes: usize,
    pub image_size: usize,
}

impl ArchSpec {
    pub fn new(arch: ArchId, n_classes: usize, image_size: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
        }
        if image_size < 8 || image_size % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size must be a multiple of 4 and at least 8, got {image_size}"
            )));
        }
        Ok(ArchSpec { arch, n_classes, image_size })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    AttentionQkv,
    PatchEmbed,
    Projection,
    Mlp,
    Head,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::AttentionQkv => "attention_qkv",
            LayerKind::PatchEmbed => "patch_embed",
            LayerKind::Projection => "projection",
            LayerKind::Mlp => "mlp",
            LayerKind::Head => "head",
        }
    }

    /// Conv-like layers gate per output channel, the rest per output feature.
    pub fn is_convolutional(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::PatchEmbed)
    }
}

/// A weight-bearing layer of a model: its name, kind, output width and parameters.
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub width: usize,
    /// Convolution stride and padding; unused by linear layers.
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Per-sample gate masks for one layer, both `[B, width]`.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub weight_mask: Var,
    pub bias_mask: Var,
}

#[derive(Clone, Debug)]
enum Net {
    Cnn(cnn::CnnIds),
    Vit(vit::VitIds),
}

/// One of the fixed architectures together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ArchSpec,
    store: ParamStore,
    net: Net,
    layers: Vec<LayerInfo>,
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| d.sample(&mut self.rng)).collect())
    }

    /// He-style init scaled by fan-in.
    pub(crate) fn fan_in(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        self.normal(shape, gain / (fan_in as f64).sqrt())
    }
}

impl Model {
    /// Freshly initialized model; the parameters are a pure function of `spec` and `seed`.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        let spec = ArchSpec::new(spec.arch, spec.n_classes, spec.image_size)?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut store = ParamStore::new();
        let (net, layers) = match spec.arch {
            ArchId::SmallCnn => {
                let (ids, layers) = cnn::build(&spec, &mut store, &mut init);
                (Net::Cnn(ids), layers)
            }
            ArchId::TinyVit => {
                let (ids, layers) = vit::build(&spec, &mut store, &mut init);
                (Net::Vit(ids), layers)
            }
        };
        Ok(Model { spec, store, net, layers })
    }

    pub fn spec(&self) -> ArchSpec {
        self.spec
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Weight-bearing layers in forward order.
    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Number of scalar parameters in the store.
    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value().len()).sum()
    }

    /// Record a forward pass of `x[B, 1, H, W]` on `tape`, giving logits `[B, N_c]`.
    ///
    /// `gates` is either empty or indexed like [`Model::layers`]; a `Some` entry
    /// multiplies that layer's outputs (and biases) by the given masks.
    pub fn forward(&self, tape: &mut Tape, x: Var, gates: &[Option<GateVars>]) -> Result<Var> {
        self.forward_with(&self.store, tape, x, gates)
    }

    /// [`Model::forward`] reading parameter values from `store` instead of the
    /// model's own store. `store` must have this model's layout.
    pub fn forward_with(&self, store: &ParamStore, tape: &mut Tape, x: Var, gates: &[Option<GateVars>]) -> Result<Var> {
        let s = tape.shape(x);
        let h = self.spec.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != h {
            return Err(Error::shape("forward", format!("input must be [B, 1, {h}, {h}], got {s:?}")));
        }
        let layer = Layers { model: self, store, gates };
        match &self.net {
            Net::Cnn(ids) => cnn::forward(ids, &layer, tape, x),
            Net::Vit(ids) => vit::forward(ids, &layer, tape, x),
        }
    }

    /// Logits for a whole image tensor, evaluated in chunks of [`EVAL_CHUNK`].
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        chunked_logits(images, self.n_classes(), |tape, x| self.forward(tape, x, &[]))
    }

    /// Overwrite every parameter from `(name, tensor)` pairs; names and shapes must match.
    pub(crate) fn load_params<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        for (name, t) in tensors {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}` for {}", self.spec.arch)))?;
            self.store.set_value(id, t)?;
        }
        Ok(())
    }
}

/// Run `forward` over `images` in chunks and concatenate the logits.
pub(crate) fn chunked_logits(
    images: &Tensor,
    n_classes: usize,
    mut forward: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("logits", format!("images must be [N, 1, H, W], got {s:?}")));
    }
    let (n, per) = (s[0], s[1..].iter().product::<usize>());
    let mut out = Vec::with_capacity(n * n_classes);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let mut shape = s.to_vec();
        shape[0] = len;
        let chunk = Tensor::from_parts(shape, images.data()[start * per..(start + len) * per].to_vec());
        let mut tape = Tape::new();
        let x = tape.constant(chunk);
        let y = forward(&mut tape, x)?;
        out.extend_from_slice(tape.value(y).data());
        start += len;
    }
    Tensor::new(vec![n, n_classes], out)
}

/// Layer-application helpers shared by both architectures.
pub(crate) struct Layers<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    gates: &'a [Option<GateVars>],
}

impl<'a> Layers<'a> {
    fn gate(&self, index: usize) -> Option<GateVars> {
        self.gates.get(index).copied().flatten()
    }

    fn param(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.store, id)
    }

    pub(crate) fn new(model: &'a Model, store: &'a ParamStore, gates: &'a [Option<GateVars>]) -> Self {
        Layers { model, store, gates }
    }

    /// Convolution of layer `index`, followed by its (possibly gated) bias.
    pub(crate) fn conv(&self, tape: &mut Tape, index: usize, x: Var) -> Result<Var> {
        let info = &self.model.layers[index];
        let (stride, pad) = (info.stride, info.pad);
        let w = self.param(tape, info.weight);
        let b = self.param(tape, info.bias);
        let y = tape.conv2d(x, w, stride, pad)?;
        match self.gate(index) {
            Some(g) => tape.gate(y, GateAxis::Channels, g.weight_mask, Some((b, g.bias_mask))),
            None => tape.add_channel_bias(y, b),
        }
    }

    /// Linear map of layer `index` over the last axis.
    pub(crate) fn linear(&self, tape: &mut Tape, index: usize, x: Var) -> Result<Var> {
        let info = &self.model.layers[index];
        let w = self.param(tape, info.weight);
        let b = self.param(tape, info.bias);
        match self.gate(index) {
            Some(g) => {
                let y = tape.linear(x, w, None)?;
                tape.gate(y, GateAxis::Features, g.weight_mask, Some((b, g.bias_mask)))
            }
            None => tape.linear(x, w, Some(b)),
        }
    }

    pub(crate) fn raw(&self, tape: &mut Tape, id: ParamId) -> Var {
        self.param(tape, id)
    }
}

/// Anything that maps images to class logits.
pub trait Classifier {
    fn n_classes(&self) -> usize;

    /// Logits `[N, N_c]` for `images[N, 1, H, W]`. `selector` picks the gate row
    /// of gated models and is ignored by plain ones.
    fn class_logits(&self, images: &Tensor, selector: Option<usize>) -> Result<Tensor>;
}

impl Classifier for Model {
    fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn class_logits(&self, images: &Tensor, _selector: Option<usize>) -> Result<Tensor> {
        self.logits(images)
    }
}
