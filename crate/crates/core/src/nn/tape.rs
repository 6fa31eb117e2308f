use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{matmul_into, Real, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    GroupMean(Var, Arc<Vec<Vec<usize>>>),
    WeightedGather(Var, Arc<Vec<Vec<(usize, f64)>>>),
    EdgeSum(Var, Arc<Vec<(usize, usize)>>),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<F> },
    MaxPool(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    BceWithLogits(Var, Vec<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradients of one backward sweep, indexed by `Var`.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NnError {
    NnError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Tape<F> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: usize) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param, p.trainable)
    }

    /// Records every parameter of `store`; the result is indexed by param id.
    pub fn bind(&mut self, store: &ParamStore<F>) -> Vec<Var> {
        (0..store.len()).map(|id| self.param(store, id)).collect()
    }

    /// First node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.all_finite())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        matmul_into(&self.value(a).data, false, &self.value(b).data, false, &mut out, m, k, n, false);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(name, &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(ta.shape.clone(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let k = tb.shape.len();
        if k > tx.shape.len() || tx.shape[tx.shape.len() - k..] != tb.shape[..] {
            return Err(mismatch("add_broadcast", &tx.shape, &tb.shape));
        }
        let n = tb.len();
        let mut data = tx.data.clone();
        for chunk in data.chunks_mut(n) {
            for (d, &v) in chunk.iter_mut().zip(&tb.data) {
                *d += v;
            }
        }
        let t = Tensor::new(tx.shape.clone(), data);
        let ng = self.needs(&[x, b]);
        Ok(self.push(t, Op::AddBroadcast(x, b), ng))
    }

    /// `alpha * x + beta`.
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let (a, b) = (F::from_f64(alpha), F::from_f64(beta));
        let tx = self.value(x);
        let t = Tensor::new(tx.shape.clone(), tx.data.iter().map(|&v| a * v + b).collect());
        let ng = self.needs(&[x]);
        self.push(t, Op::Affine(x, a), ng)
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape.clone(), tx.data.iter().map(|&v| f(v)).collect());
        let ng = self.needs(&[x]);
        self.push(t, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, F::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, F::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > F::ZERO { v } else { F::ZERO }, Op::Relu(x))
    }

    /// `x W + b` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.value(parts[0]).as_matrix().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix();
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = self.value(parts[0]).as_matrix().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).as_matrix();
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var, NnError> {
        let (r, c) = self.value(x).as_matrix();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(NnError::IndexOutOfRange { op: "gather_rows", index: i, len: r });
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![idx.len(), c], data), Op::GatherRows(x, idx), ng))
    }

    /// Row means over index groups; an empty group yields a zero row.
    pub fn group_mean(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var, NnError> {
        let (r, c) = self.value(x).as_matrix();
        let mut data = vec![F::ZERO; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let scale = F::from_f64(1.0 / members.len() as f64);
            let out = &mut data[g * c..(g + 1) * c];
            for &i in members {
                if i >= r {
                    return Err(NnError::IndexOutOfRange { op: "group_mean", index: i, len: r });
                }
                for (o, &v) in out.iter_mut().zip(self.nodes[x.0].value.row(i)) {
                    *o += v * scale;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![groups.len(), c], data), Op::GroupMean(x, groups), ng))
    }

    /// `out[r] = sum_j w_j * table[id_j]` over each row's `(id, w)` list.
    pub fn weighted_gather(
        &mut self,
        table: Var,
        rows: Arc<Vec<Vec<(usize, f64)>>>,
    ) -> Result<Var, NnError> {
        let (v, c) = self.value(table).as_matrix();
        let mut data = vec![F::ZERO; rows.len() * c];
        for (r, entries) in rows.iter().enumerate() {
            let out = &mut data[r * c..(r + 1) * c];
            for &(id, w) in entries {
                if id >= v {
                    return Err(NnError::IndexOutOfRange { op: "weighted_gather", index: id, len: v });
                }
                let w = F::from_f64(w);
                for (o, &t) in out.iter_mut().zip(self.nodes[table.0].value.row(id)) {
                    *o += w * t;
                }
            }
        }
        let ng = self.needs(&[table]);
        Ok(self.push(Tensor::new(vec![rows.len(), c], data), Op::WeightedGather(table, rows), ng))
    }

    /// `out[dst] += x[src]` for every `(src, dst)`; `out` has `n_out` rows.
    pub fn edge_sum(&mut self, x: Var, edges: Arc<Vec<(usize, usize)>>, n_out: usize) -> Result<Var, NnError> {
        let (r, c) = self.value(x).as_matrix();
        let mut data = vec![F::ZERO; n_out * c];
        for &(s, d) in edges.iter() {
            if s >= r || d >= n_out {
                return Err(NnError::IndexOutOfRange { op: "edge_sum", index: s.max(d), len: r.min(n_out) });
            }
            let src = self.nodes[x.0].value.row(s);
            for (o, &v) in data[d * c..(d + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n_out, c], data), Op::EdgeSum(x, edges), ng))
    }

    /// 2-D convolution, NCHW input `[B, C, H, W]`, kernel `[O, C, kh, kw]`, bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] || stride == 0 {
            return Err(mismatch("conv2d", sx, sw));
        }
        let (batch, in_ch, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            h,
            w: wd,
            out_ch,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        };
        let cols = im2col(&self.value(x).data, &geom);
        let (ckk, bp, p) = (geom.ckk(), batch * geom.positions(), geom.positions());
        let mut tmp = vec![F::ZERO; out_ch * bp];
        matmul_into(&self.value(w).data, false, &cols, false, &mut tmp, out_ch, ckk, bp, false);
        let bias = &self.value(b).data;
        let mut out = vec![F::ZERO; batch * out_ch * p];
        for o in 0..out_ch {
            for bi in 0..batch {
                let src = &tmp[o * bp + bi * p..o * bp + (bi + 1) * p];
                let dst = &mut out[(bi * out_ch + o) * p..(bi * out_ch + o + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let ng = self.needs(&[x, w, b]);
        let cols = if ng { cols } else { Vec::new() };
        let t = Tensor::new(vec![batch, out_ch, geom.ho, geom.wo], out);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// Max pooling with a square window and no padding.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < k || s[3] < k || k == 0 || stride == 0 {
            return Err(mismatch("maxpool2d", &s, &[k, k]));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(bc * ho * wo);
        let mut arg = Vec::with_capacity(bc * ho * wo);
        for plane in 0..bc {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![s[0], s[1], ho, wo], out), Op::MaxPool(x, arg), ng))
    }

    /// Maximum over all spatial positions: `[B, C, H, W] -> [B, C]`.
    pub fn global_maxpool(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(mismatch("global_maxpool", &s, &[]));
        }
        let hw = s[2] * s[3];
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(s[0] * s[1]);
        let mut arg = Vec::with_capacity(s[0] * s[1]);
        for plane in 0..s[0] * s[1] {
            let base = plane * hw;
            let mut best = base;
            for i in base..base + hw {
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            out.push(xd[best]);
            arg.push(best);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![s[0], s[1]], out), Op::MaxPool(x, arg), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data.iter().copied().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: F = t.data.iter().copied().sum();
        let m = s / F::from_f64(t.len().max(1) as f64);
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, c) = t.as_matrix();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(row[0], F::max);
            let mut z = F::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let t = Tensor::new(t.shape.clone(), data);
        let ng = self.needs(&[x]);
        self.push(t, Op::SoftmaxRows(x), ng)
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, NnError> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(mismatch("bce_with_logits", &t.shape, &[targets.len()]));
        }
        let mut total = F::ZERO;
        for (&x, &y) in t.data.iter().zip(targets) {
            let y = F::from_f64(y);
            let pos = if x > F::ZERO { x } else { F::ZERO };
            total += pos - x * y + (F::ONE + (-x.abs()).exp()).ln();
        }
        let loss = total / F::from_f64(targets.len().max(1) as f64);
        let ng = self.needs(&[logits]);
        let ys = targets.iter().map(|&y| F::from_f64(y)).collect();
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, ys), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>, NnError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NnError::NotScalarLoss { shape: lt.shape.clone() });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&lt.shape, F::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let nodes = &self.nodes;
        // lazily allocates the input's gradient buffer and hands it to `f`
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&nodes[v.0].value.shape));
            f(&mut slot.data);
        };
        let val = |v: Var| &nodes[v.0].value;
        let gd = &g.data;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                acc(*a, &mut |da| matmul_into(gd, false, &val(*b).data, true, da, m, n, k, true));
                acc(*b, &mut |db| matmul_into(&val(*a).data, true, gd, false, db, k, m, n, true));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBroadcast(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
                let n = val(*b).len();
                acc(*b, &mut |d| {
                    for chunk in gd.chunks(n) {
                        for (d, &g) in d.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Affine(x, alpha) => {
                acc(*x, &mut |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += *alpha * g));
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y * (F::ONE - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                acc(*x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * (F::ONE - y * y);
                    }
                });
            }
            Op::Relu(x) => {
                let y = &node.value.data;
                acc(*x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(y) {
                        if y > F::ZERO {
                            *d += g;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.as_matrix();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).as_matrix().1;
                    acc(p, &mut |d| {
                        for i in 0..rows {
                            let src = &gd[i * total + offset..i * total + offset + c];
                            for (d, &g) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |d| {
                        d.iter_mut().zip(&gd[offset..offset + n]).for_each(|(d, &g)| *d += g)
                    });
                    offset += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = node.value.as_matrix().1;
                acc(*x, &mut |d| {
                    for (o, &i) in idx.iter().enumerate() {
                        for (d, &g) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[o * c..(o + 1) * c]) {
                            *d += g;
                        }
                    }
                });
            }
            Op::GroupMean(x, groups) => {
                let c = node.value.as_matrix().1;
                acc(*x, &mut |d| {
                    for (gi, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let scale = F::from_f64(1.0 / members.len() as f64);
                        let src = &gd[gi * c..(gi + 1) * c];
                        for &i in members {
                            for (d, &g) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *d += g * scale;
                            }
                        }
                    }
                });
            }
            Op::WeightedGather(table, rows) => {
                let c = node.value.as_matrix().1;
                acc(*table, &mut |d| {
                    for (r, entries) in rows.iter().enumerate() {
                        let src = &gd[r * c..(r + 1) * c];
                        for &(id, w) in entries {
                            let w = F::from_f64(w);
                            for (d, &g) in d[id * c..(id + 1) * c].iter_mut().zip(src) {
                                *d += w * g;
                            }
                        }
                    }
                });
            }
            Op::EdgeSum(x, edges) => {
                let c = node.value.as_matrix().1;
                acc(*x, &mut |d| {
                    for &(s, t) in edges.iter() {
                        for (d, &g) in d[s * c..(s + 1) * c].iter_mut().zip(&gd[t * c..(t + 1) * c]) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (o, p, bp, ckk) = (geom.out_ch, geom.positions(), geom.batch * geom.positions(), geom.ckk());
                // [B, O, P] -> [O, B*P]
                let mut gt = vec![F::ZERO; o * bp];
                for bi in 0..geom.batch {
                    for oc in 0..o {
                        let src = &gd[(bi * o + oc) * p..(bi * o + oc + 1) * p];
                        gt[oc * bp + bi * p..oc * bp + (bi + 1) * p].copy_from_slice(src);
                    }
                }
                acc(*b, &mut |db| {
                    for oc in 0..o {
                        db[oc] += gt[oc * bp..(oc + 1) * bp].iter().copied().sum::<F>();
                    }
                });
                acc(*w, &mut |dw| matmul_into(&gt, false, cols, true, dw, o, bp, ckk, true));
                acc(*x, &mut |dx| {
                    let mut dcols = vec![F::ZERO; ckk * bp];
                    matmul_into(&val(*w).data, true, &gt, false, &mut dcols, ckk, o, bp, false);
                    col2im_add(&dcols, geom, dx);
                });
            }
            Op::MaxPool(x, arg) => {
                acc(*x, &mut |d| {
                    for (&i, &g) in arg.iter().zip(gd) {
                        d[i] += g;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(x) => {
                let g0 = gd[0] / F::from_f64(val(*x).len().max(1) as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value.data;
                let c = node.value.as_matrix().1.max(1);
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::BceWithLogits(logits, ys) => {
                let scale = gd[0] / F::from_f64(ys.len().max(1) as f64);
                let xs = &val(*logits).data;
                acc(*logits, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(xs).zip(ys) {
                        *d += scale * (x.sigmoid() - y);
                    }
                });
            }
        }
    }
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (p, bp) = (g.positions(), g.batch * g.positions());
    let mut cols = vec![F::ZERO; g.ckk() * bp];
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * bp..(row + 1) * bp];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_ch + c) * g.h * g.w..(b * g.in_ch + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                out[b * p + oy * g.wo + ox] = plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<F: Real>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let (p, bp) = (g.positions(), g.batch * g.positions());
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * bp..(row + 1) * bp];
                for b in 0..g.batch {
                    let base = (b * g.in_ch + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[base + iy as usize * g.w + ix as usize] += src[b * p + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
