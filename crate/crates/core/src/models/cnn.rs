//! conv(1→8, 3×3) → relu → pool → conv(8→16, 3×3) → relu → pool → linear.

use super::{ArchSpec, Init, LayerInfo, LayerKind, Layers};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub(super) const CONV1: usize = 0;
pub(super) const CONV2: usize = 1;
pub(super) const HEAD: usize = 2;

#[derive(Clone, Debug)]
pub(crate) struct CnnIds {
    flat: usize,
}

fn layer(store: &mut ParamStore, name: &str, kind: LayerKind, w: Tensor, width: usize) -> LayerInfo {
    let weight = store.add(format!("{name}.weight"), w, true);
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width]), true);
    LayerInfo { name: name.to_string(), kind, width, stride: 1, pad: 1, weight, bias }
}

pub(super) fn build(spec: &ArchSpec, store: &mut ParamStore, init: &mut Init) -> (CnnIds, Vec<LayerInfo>) {
    let relu_gain = std::f64::consts::SQRT_2;
    let flat = 16 * (spec.image_size / 4) * (spec.image_size / 4);
    let layers = vec![
        layer(store, "conv1", LayerKind::Conv, init.fan_in(&[8, 1, 3, 3], 9, relu_gain), 8),
        layer(store, "conv2", LayerKind::Conv, init.fan_in(&[16, 8, 3, 3], 72, relu_gain), 16),
        layer(store, "head", LayerKind::Head, init.fan_in(&[flat, spec.n_classes], flat, 1.0), spec.n_classes),
    ];
    (CnnIds { flat }, layers)
}

pub(super) fn forward(ids: &CnnIds, l: &Layers<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
    let b = tape.shape(x)[0];
    let h = l.conv(tape, CONV1, x)?;
    let h = tape.relu(h);
    let h = tape.maxpool2d(h, 2)?;
    let h = l.conv(tape, CONV2, h)?;
    let h = tape.relu(h);
    let h = tape.maxpool2d(h, 2)?;
    let h = tape.reshape(h, &[b, ids.flat])?;
    l.linear(tape, HEAD, h)
}
