use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Where the gated axis sits in a tensor passed to [`Tape::gate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateAxis {
    /// `y[B, C, ...]`, e.g. conv feature maps.
    Channels,
    /// `y[B, ..., C]`, e.g. token features from a linear projection.
    Features,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reciprocal(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Select { x: Var, axis: usize, index: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Option<Vec<f64>> },
    AddChannelBias { x: Var, b: Var },
    AddBroadcast { x: Var, p: Var },
    PrependToken { x: Var, tok: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Gate { y: Var, wmask: Var, bias: Option<Var>, bmask: Option<Var>, dims: [usize; 4] },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Reciprocal(_) => "reciprocal",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Select { .. } => "select",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::PrependToken { .. } => "prepend_token",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gate { .. } => "gate",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reciprocal(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Softmax(x) => vec![*x],
            Op::Select { x, .. } | Op::Narrow { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::MaxPool2d { x, .. } => vec![*x],
            Op::Linear { x, w, b } => std::iter::once(*x).chain(Some(*w)).chain(*b).collect(),
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::AddChannelBias { x, b } => vec![*x, *b],
            Op::AddBroadcast { x, p } => vec![*x, *p],
            Op::PrependToken { x, tok } => vec![*x, *tok],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Gate { y, wmask, bias, bmask, .. } => {
                std::iter::once(*y).chain(Some(*wmask)).chain(*bias).chain(*bmask).collect()
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamic record of one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller ids. A tape is built fresh for every forward pass and consumed
/// by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation name and input ids of a recorded node.
    pub fn entry(&self, v: Var) -> (&'static str, Vec<Var>) {
        let op = &self.nodes[v.0].op;
        (op.name(), op.inputs())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => unreachable!("params are pushed by `param`"),
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Record a parameter leaf. Gradients reach it only if it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: store.is_trainable(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(Tensor::from_parts(shape, data), op)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn reciprocal(&mut self, x: Var) -> Var {
        self.map(x, Op::Reciprocal(x), |v| 1.0 / v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let s: f64 = self.val(x).iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x)))
        })?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, data) = kernels::permute(self.val(x), &shape, perm);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, perm.to_vec())))
    }

    /// Take index `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::shape("select", format!("index {index} on axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.val(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * dim + index) * inner..][..inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Select { x, axis, index }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.val(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * dim + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Narrow { x, axis, start }))
    }

    /// Rows of a matrix `x[N, K]` picked by index, giving `[rows.len(), K]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("expected a matrix, got {shape:?}")));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::RowOutOfRange { row: r, rows: shape[0] });
        }
        let t = self.value(x).select_rows(rows);
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// `x[..., Fin] · w[Fin, Fout] + b[Fout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("linear", format!("weight must be [Fin, Fout], got {ws:?}")));
        }
        let (fin, fout) = (ws[0], ws[1]);
        if xs.last() != Some(&fin) {
            return Err(Error::shape("linear", format!("input feature dim {:?} != weight Fin {fin}", xs.last())));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", format!("bias shape {:?} != [Fout={fout}]", self.shape(b))));
            }
        }
        let n = self.value(x).len() / fin;
        let mut out = vec![0.0; n * fout];
        kernels::gemm(n, fin, fout, self.val(x), false, self.val(w), false, &mut out, false);
        if let Some(b) = b {
            let bv = self.val(b);
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    /// Batched matmul: `a[N, M, K] · b[N, K, P]`, or `a · bᵀ` with `b[N, P, K]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("batch dims of {sa:?} and {sb:?}")));
        }
        let (n, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", format!("inner dims {k} and {kb} differ")));
        }
        let mut out = vec![0.0; n * m * p];
        let (av, bv) = (self.val(a), self.val(b));
        for i in 0..n {
            kernels::gemm(
                m,
                k,
                p,
                &av[i * m * k..][..m * k],
                false,
                &bv[i * k * p..][..k * p],
                trans_b,
                &mut out[i * m * p..][..m * p],
                false,
            );
        }
        Ok(self.push(Tensor::from_parts(vec![n, m, p], out), Op::Bmm { a, b, trans_b }))
    }

    /// Cross-correlation of `x[B, Cin, H, W]` with `kernels[Cout, Cin, kH, kW]`. No bias.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [B, Cin, H, W], got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernels must be [Cout, Cin, kH, kW], got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape("conv2d", format!("Cin: input has {} channels, kernels expect {}", xs[1], ws[1])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if ws[2] > xs[2] + 2 * pad {
            return Err(Error::shape("conv2d", format!("kH {} exceeds padded height {}", ws[2], xs[2] + 2 * pad)));
        }
        if ws[3] > xs[3] + 2 * pad {
            return Err(Error::shape("conv2d", format!("kW {} exceeds padded width {}", ws[3], xs[3] + 2 * pad)));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let cols = kernels::im2col(self.val(x), &geom);
        let bs = geom.batch * geom.spatial_out();
        let mut tmp = vec![0.0; geom.cout * bs];
        kernels::gemm(geom.cout, geom.patch(), bs, self.val(kernels), false, &cols, false, &mut tmp, false);
        // [Cout, B, S] -> [B, Cout, S]
        let s = geom.spatial_out();
        let mut out = vec![0.0; tmp.len()];
        for c in 0..geom.cout {
            for b in 0..geom.batch {
                out[(b * geom.cout + c) * s..][..s].copy_from_slice(&tmp[c * bs + b * s..][..s]);
            }
        }
        let keep = self.rg(kernels).then_some(cols);
        let shape = vec![geom.batch, geom.cout, geom.ho, geom.wo];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w: kernels, geom, cols: keep }))
    }

    /// `x[B, C, ...] + b[C]`, broadcast over batch and spatial positions.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(Error::shape("add_channel_bias", format!("bias {:?} vs channels of {xs:?}", self.shape(b))));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let bv = self.val(b).to_vec();
        let mut data = self.val(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let add = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddChannelBias { x, b }))
    }

    /// `x[B, ...] + p[...]`, broadcast over the batch axis only.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || self.shape(p) != &xs[1..] {
            return Err(Error::shape("add_broadcast", format!("{:?} does not match trailing dims of {xs:?}", self.shape(p))));
        }
        let pv = self.val(p).to_vec();
        let mut data = self.val(x).to_vec();
        for chunk in data.chunks_mut(pv.len().max(1)) {
            chunk.iter_mut().zip(&pv).for_each(|(v, q)| *v += q);
        }
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddBroadcast { x, p }))
    }

    /// Prepend a shared token `tok[D]` to every sequence of `x[B, T, D]`.
    pub fn prepend_token(&mut self, x: Var, tok: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(tok) != [xs[2]] {
            return Err(Error::shape("prepend_token", format!("token {:?} vs sequence {xs:?}", self.shape(tok))));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let (xv, tv) = (self.val(x), self.val(tok));
        let mut data = Vec::with_capacity(b * (t + 1) * d);
        for i in 0..b {
            data.extend_from_slice(tv);
            data.extend_from_slice(&xv[i * t * d..][..t * d]);
        }
        Ok(self.push(Tensor::from_parts(vec![b, t + 1, d], data), Op::PrependToken { x, tok }))
    }

    /// Non-overlapping `k×k` max pooling of `x[B, C, H, W]`.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::shape("maxpool2d", format!("window {k} on {xs:?}")));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / k, w / k);
        let src = self.val(x);
        let mut out = Vec::with_capacity(bc * ho * wo);
        let mut argmax = Vec::with_capacity(bc * ho * wo);
        for p in 0..bc {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = vec![xs[0], xs[1], ho, wo];
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2d { x, argmax }))
    }

    /// Normalize over the last axis, then scale by `gamma[D]` and shift by `beta[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
        }
        let (xv, g, bt) = (self.val(x), self.val(gamma), self.val(beta));
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mu) * is;
                xhat.push(xh);
                out.push(xh * g[j] + bt[j]);
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = self.val(x).to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_parts(xs, data), Op::Softmax(x)))
    }

    /// Per-sample `−log softmax(logits)[label]` for `logits[B, C]`, giving `[B]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let c = s[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        let mut probs = self.val(logits).to_vec();
        let mut out = Vec::with_capacity(labels.len());
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.push(lse - row[l]);
            softmax_in_place(row);
        }
        let n = out.len();
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Mean cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let per = self.cross_entropy(logits, labels)?;
        self.mean(per)
    }

    /// Per-sample gating: `y * wmask + bias * bmask` where the masks are `[B, C]`
    /// and `C` is the axis named by `axis`.
    pub fn gate(
        &mut self,
        y: Var,
        axis: GateAxis,
        wmask: Var,
        bias: Option<(Var, Var)>,
    ) -> Result<Var> {
        let ys = self.shape(y).to_vec();
        if ys.len() < 2 {
            return Err(Error::shape("gate", format!("input must have batch and channel axes, got {ys:?}")));
        }
        let (b, outer, c, inner) = match axis {
            GateAxis::Channels => (ys[0], 1, ys[1], ys[2..].iter().product()),
            GateAxis::Features => (ys[0], ys[1..ys.len() - 1].iter().product(), ys[ys.len() - 1], 1),
        };
        if self.shape(wmask) != [b, c] {
            return Err(Error::shape("gate", format!("weight mask {:?} != [B={b}, C={c}]", self.shape(wmask))));
        }
        if let Some((bv, bm)) = bias {
            if self.shape(bv) != [c] || self.shape(bm) != [b, c] {
                return Err(Error::shape(
                    "gate",
                    format!("bias {:?} / bias mask {:?} vs C={c}", self.shape(bv), self.shape(bm)),
                ));
            }
        }
        let yv = self.val(y);
        let wm = self.val(wmask);
        let bias_term: Option<Vec<f64>> = bias.map(|(bv, bm)| {
            let (bv, bm) = (self.val(bv), self.val(bm));
            (0..b * c).map(|i| bv[i % c] * bm[i]).collect()
        });
        let mut out = vec![0.0; yv.len()];
        for bi in 0..b {
            for o in 0..outer {
                for ci in 0..c {
                    let m = wm[bi * c + ci];
                    let add = bias_term.as_ref().map_or(0.0, |t| t[bi * c + ci]);
                    let base = ((bi * outer + o) * c + ci) * inner;
                    for i in 0..inner {
                        out[base + i] = yv[base + i] * m + add;
                    }
                }
            }
        }
        let op = Op::Gate {
            y,
            wmask,
            bias: bias.map(|p| p.0),
            bmask: bias.map(|p| p.1),
            dims: [b, outer, c, inner],
        };
        Ok(self.push(Tensor::from_parts(ys, out), op))
    }

    /// Reverse pass from the scalar `loss`, accumulating into trainable parameters of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                store.accumulate_grad(id, &g);
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, grad: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], grad);
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    send(*b, g.clone());
                }
                send(*a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    send(*b, g.iter().map(|v| -v).collect());
                }
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(*x, g),
            Op::Reciprocal(x) => send(*x, g.iter().zip(out).map(|(g, y)| -g * y * y).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                send(*x, g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Gelu(x) => {
                let xv = self.val(*x);
                send(*x, g.iter().zip(xv).map(|(g, &v)| g * kernels::gelu_grad(v)).collect());
            }
            Op::Sigmoid(x) => send(*x, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Reshape(x) => send(*x, g),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                let (_, back) = kernels::permute(&g, node.value.shape(), &inv);
                send(*x, back);
            }
            Op::Select { x, axis, index } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    dx[(o * dim + index) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                }
                send(*x, dx);
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    dx[(o * dim + start) * inner..][..len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                send(*x, dx);
            }
            Op::GatherRows { x, rows } => {
                let k = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (j, &r) in rows.iter().enumerate() {
                    dx[r * k..][..k].iter_mut().zip(&g[j * k..][..k]).for_each(|(d, v)| *d += v);
                }
                send(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (fin, fout) = (ws[0], ws[1]);
                let n = g.len() / fout;
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(n, fout, fin, &g, false, self.val(*w), true, &mut dx, false);
                    send(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; fin * fout];
                    kernels::gemm(fin, n, fout, self.val(*x), true, &g, false, &mut dw, false);
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        send(*b, db);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (n, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.value.shape()[2];
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    let mut da = vec![0.0; n * m * k];
                    for i in 0..n {
                        kernels::gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..][..m * p],
                            false,
                            &bv[i * k * p..][..k * p],
                            !trans_b,
                            &mut da[i * m * k..][..m * k],
                            false,
                        );
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k * p];
                    for i in 0..n {
                        let (ai, gi, dbi) = (&av[i * m * k..][..m * k], &g[i * m * p..][..m * p], &mut db[i * k * p..][..k * p]);
                        if *trans_b {
                            kernels::gemm(p, m, k, gi, true, ai, false, dbi, false);
                        } else {
                            kernels::gemm(k, m, p, ai, true, gi, false, dbi, false);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let s = geom.spatial_out();
                let bs = geom.batch * s;
                // [B, Cout, S] -> [Cout, B, S]
                let mut dtmp = vec![0.0; g.len()];
                for b in 0..geom.batch {
                    for c in 0..geom.cout {
                        dtmp[c * bs + b * s..][..s].copy_from_slice(&g[(b * geom.cout + c) * s..][..s]);
                    }
                }
                if let (true, Some(cols)) = (self.rg(*w), cols) {
                    let mut dw = vec![0.0; geom.cout * geom.patch()];
                    kernels::gemm(geom.cout, bs, geom.patch(), &dtmp, false, cols, true, &mut dw, false);
                    send(*w, dw);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; geom.patch() * bs];
                    kernels::gemm(geom.patch(), geom.cout, bs, self.val(*w), true, &dtmp, false, &mut dcols, false);
                    let mut dx = vec![0.0; self.value(*x).len()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    send(*x, dx);
                }
            }
            Op::AddChannelBias { x, b } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                if self.rg(*b) {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    send(*b, db);
                }
                send(*x, g);
            }
            Op::AddBroadcast { x, p } => {
                if self.rg(*p) {
                    let n = self.value(*p).len();
                    let mut dp = vec![0.0; n];
                    for chunk in g.chunks(n.max(1)) {
                        dp.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    send(*p, dp);
                }
                send(*x, g);
            }
            Op::PrependToken { x, tok } => {
                let xs = self.shape(*x);
                let (b, t, d) = (xs[0], xs[1], xs[2]);
                if self.rg(*tok) {
                    let mut dt = vec![0.0; d];
                    for i in 0..b {
                        dt.iter_mut().zip(&g[i * (t + 1) * d..][..d]).for_each(|(a, v)| *a += v);
                    }
                    send(*tok, dt);
                }
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(b * t * d);
                    for i in 0..b {
                        dx.extend_from_slice(&g[(i * (t + 1) + 1) * d..][..t * d]);
                    }
                    send(*x, dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gm = self.val(*gamma);
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    send(*gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    }
                    send(*beta, db);
                }
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, xr), is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dxh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx.push(is / d as f64 * (d as f64 * dxh[j] - s1 - xr[j] * s2));
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(out.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(a, y)| y * (a - dot)));
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let mut dx = probs.clone();
                for (bi, (&l, gv)) in labels.iter().zip(&g).enumerate() {
                    let row = &mut dx[bi * c..][..c];
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gv);
                }
                send(*logits, dx);
            }
            Op::Gate { y, wmask, bias, bmask, dims } => {
                let [b, outer, c, inner] = *dims;
                let (yv, wm) = (self.val(*y), self.val(*wmask));
                // per (b, c) sums of g and g*y over outer and inner positions
                let mut sum_g = vec![0.0; b * c];
                let mut sum_gy = vec![0.0; b * c];
                for bi in 0..b {
                    for o in 0..outer {
                        for ci in 0..c {
                            let base = ((bi * outer + o) * c + ci) * inner;
                            let (mut sg, mut sgy) = (0.0, 0.0);
                            for i in 0..inner {
                                sg += g[base + i];
                                sgy += g[base + i] * yv[base + i];
                            }
                            sum_g[bi * c + ci] += sg;
                            sum_gy[bi * c + ci] += sgy;
                        }
                    }
                }
                if self.rg(*y) {
                    let mut dy = vec![0.0; g.len()];
                    for bi in 0..b {
                        for o in 0..outer {
                            for ci in 0..c {
                                let m = wm[bi * c + ci];
                                let base = ((bi * outer + o) * c + ci) * inner;
                                for i in 0..inner {
                                    dy[base + i] = g[base + i] * m;
                                }
                            }
                        }
                    }
                    send(*y, dy);
                }
                if self.rg(*wmask) {
                    send(*wmask, sum_gy);
                }
                if let (Some(bv), Some(bm)) = (bias, bmask) {
                    if self.rg(*bm) {
                        let bvals = self.val(*bv);
                        send(*bm, (0..b * c).map(|i| bvals[i % c] * sum_g[i]).collect());
                    }
                    if self.rg(*bv) {
                        let bmv = self.val(*bm);
                        let mut db = vec![0.0; c];
                        for i in 0..b * c {
                            db[i % c] += bmv[i] * sum_g[i];
                        }
                        send(*bv, db);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
