//! 4×4 patch embedding (d = 32), class token, learned positions, two pre-norm
//! blocks with 2-head attention over a fused QKV projection and a gelu MLP,
//! final layer norm and a linear head on the class token.

use super::{ArchSpec, Init, LayerInfo, LayerKind, Layers};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub(super) const D_MODEL: usize = 32;
pub(super) const HEADS: usize = 2;
pub(super) const MLP_HIDDEN: usize = 64;
pub(super) const PATCH: usize = 4;
pub(super) const BLOCKS: usize = 2;

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    qkv: usize,
    proj: usize,
    ln2: Norm,
    mlp1: usize,
    mlp2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct VitIds {
    patch: usize,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    head: usize,
    tokens: usize,
}

fn norm(store: &mut ParamStore, name: &str) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[D_MODEL], 1.0), true),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[D_MODEL]), true),
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Init,
    layers: Vec<LayerInfo>,
}

impl Builder<'_> {
    fn layer(&mut self, name: &str, kind: LayerKind, wshape: &[usize], fan_in: usize, gain: f64) -> usize {
        let width = if kind.is_convolutional() { wshape[0] } else { wshape[1] };
        let w = self.init.fan_in(wshape, fan_in, gain);
        let weight = self.store.add(format!("{name}.weight"), w, true);
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[width]), true);
        self.layers.push(LayerInfo { name: name.to_string(), kind, width, stride: PATCH, pad: 0, weight, bias });
        self.layers.len() - 1
    }
}

pub(super) fn build(spec: &ArchSpec, store: &mut ParamStore, init: &mut Init) -> (VitIds, Vec<LayerInfo>) {
    let side = spec.image_size / PATCH;
    let tokens = 1 + side * side;
    let mut b = Builder { store, init, layers: Vec::new() };
    let patch = b.layer("patch", LayerKind::PatchEmbed, &[D_MODEL, 1, PATCH, PATCH], PATCH * PATCH, 1.0);
    let cls = b.init.normal(&[D_MODEL], 0.02);
    let cls = b.store.add("cls", cls, true);
    let pos = b.init.normal(&[tokens, D_MODEL], 0.02);
    let pos = b.store.add("pos", pos, true);
    let mut blocks = Vec::with_capacity(BLOCKS);
    for i in 0..BLOCKS {
        let p = format!("block{i}");
        let ln1 = norm(b.store, &format!("{p}.ln1"));
        let qkv = b.layer(&format!("{p}.qkv"), LayerKind::AttentionQkv, &[D_MODEL, 3 * D_MODEL], D_MODEL, 1.0);
        let proj = b.layer(&format!("{p}.proj"), LayerKind::Projection, &[D_MODEL, D_MODEL], D_MODEL, 0.5);
        let ln2 = norm(b.store, &format!("{p}.ln2"));
        let mlp1 = b.layer(&format!("{p}.mlp1"), LayerKind::Mlp, &[D_MODEL, MLP_HIDDEN], D_MODEL, 1.0);
        let mlp2 = b.layer(&format!("{p}.mlp2"), LayerKind::Mlp, &[MLP_HIDDEN, D_MODEL], MLP_HIDDEN, 0.5);
        blocks.push(Block { ln1, qkv, proj, ln2, mlp1, mlp2 });
    }
    let norm = norm(b.store, "norm");
    // Small head init keeps a freshly initialized model near uniform output.
    let head = b.layer("head", LayerKind::Head, &[D_MODEL, spec.n_classes], D_MODEL, 0.02 * (D_MODEL as f64).sqrt());
    (VitIds { patch, cls, pos, blocks, norm, head, tokens }, b.layers)
}

fn layer_norm(l: &Layers<'_>, tape: &mut Tape, x: Var, n: &Norm) -> Result<Var> {
    let g = l.raw(tape, n.gamma);
    let b = l.raw(tape, n.beta);
    tape.layer_norm(x, g, b)
}

/// `[B, T, D]` slice of the fused projection → `[B·heads, T, D/heads]`.
fn split_heads(tape: &mut Tape, x: Var, b: usize, t: usize) -> Result<Var> {
    let dh = D_MODEL / HEADS;
    let x = tape.reshape(x, &[b, t, HEADS, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * HEADS, t, dh])
}

fn attention(l: &Layers<'_>, tape: &mut Tape, blk: &Block, x: Var, b: usize, t: usize) -> Result<Var> {
    let qkv = l.linear(tape, blk.qkv, x)?;
    let q = tape.narrow(qkv, 2, 0, D_MODEL)?;
    let k = tape.narrow(qkv, 2, D_MODEL, D_MODEL)?;
    let v = tape.narrow(qkv, 2, 2 * D_MODEL, D_MODEL)?;
    let (q, k, v) = (split_heads(tape, q, b, t)?, split_heads(tape, k, b, t)?, split_heads(tape, v, b, t)?);
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / ((D_MODEL / HEADS) as f64).sqrt());
    let att = tape.softmax(scores)?;
    let ctx = tape.bmm(att, v, false)?;
    let ctx = tape.reshape(ctx, &[b, HEADS, t, D_MODEL / HEADS])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, D_MODEL])?;
    l.linear(tape, blk.proj, ctx)
}

pub(super) fn forward(ids: &VitIds, l: &Layers<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
    let b = tape.shape(x)[0];
    let t = ids.tokens;
    let pe = l.conv(tape, ids.patch, x)?;
    let pe = tape.reshape(pe, &[b, D_MODEL, t - 1])?;
    let pe = tape.permute(pe, &[0, 2, 1])?;
    let cls = l.raw(tape, ids.cls);
    let z = tape.prepend_token(pe, cls)?;
    let pos = l.raw(tape, ids.pos);
    let mut z = tape.add_broadcast(z, pos)?;
    for blk in &ids.blocks {
        let h = layer_norm(l, tape, z, &blk.ln1)?;
        let a = attention(l, tape, blk, h, b, t)?;
        z = tape.add(z, a)?;
        let h = layer_norm(l, tape, z, &blk.ln2)?;
        let h = l.linear(tape, blk.mlp1, h)?;
        let h = tape.gelu(h);
        let h = l.linear(tape, blk.mlp2, h)?;
        z = tape.add(z, h)?;
    }
    let z = layer_norm(l, tape, z, &ids.norm)?;
    let cls_out = tape.select(z, 1, 0)?;
    l.linear(tape, ids.head, cls_out)
}
