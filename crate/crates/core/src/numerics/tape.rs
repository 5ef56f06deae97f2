//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every method on [`Tape`] computes its forward value eagerly, records the
//! operation and hands back a [`Var`]. [`Tape::backward`] walks the record in
//! reverse and produces the gradient of a scalar with respect to every node.

use std::collections::HashMap;

use super::{Mask, NumericsError, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    PairConcat(Var),
    Softmax(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::GatherRows { .. } => "gather_rows",
            Op::PairConcat(_) => "pair_concat",
            Op::Softmax(_) => "softmax",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::SumAll(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Conv1d { .. } => "conv1d",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Single-threaded operation record. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// `(outer, extent, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat output index of `x.permute(axes)`, the flat input index.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that receives no gradient bookkeeping of its own.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a named parameter. Repeated loads of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?
            .clone();
        let var = self.push(value, Op::Param(name.to_string()))?;
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// Names of the parameters loaded on this tape, in load order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Affine map over the last axis: `x [.., din] · w [din, dout] + b [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        gemm(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            din,
            dout,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b })
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || bs.len() < 2 {
            return Err(mismatch("matmul", &as_, &bs));
        }
        let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (k2, n) = (bs[bs.len() - 2], bs[bs.len() - 1]);
        let shared = bs.len() == 2;
        if k != k2 || (!shared && as_[..as_.len() - 2] != bs[..bs.len() - 2]) {
            return Err(mismatch("matmul", &as_, &bs));
        }
        let batch: usize = as_[..as_.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for p in 0..batch {
            let bslice = if shared {
                bd
            } else {
                &bd[p * k * n..(p + 1) * k * n]
            };
            gemm(
                &ad[p * m * k..(p + 1) * m * k],
                bslice,
                &mut out[p * m * n..(p + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = as_[..as_.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b })
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", &base, s));
            }
            extent += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice { x, axis, start },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|_| mismatch("reshape", self.shape(x), shape))?;
        self.push(t, Op::Reshape(x))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(invalid(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        let map = permute_map(&shape, axes);
        let data = self.value(x).data();
        let out: Vec<f64> = map.iter().map(|&i| data[i]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Rows of a `[R, F]` matrix selected (with repetition) by `index`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || index.is_empty() {
            return Err(invalid(
                "gather_rows",
                format!("expects a matrix, got {shape:?}"),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index {
            if r >= rows {
                return Err(invalid("gather_rows", format!("row {r} of {rows}")));
            }
            out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
        }
        self.push(
            Tensor::from_parts(vec![index.len(), cols], out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// `[.., N, D] -> [.., N, N, 2D]` with `out[.., i, j, :] = x_i ⊕ x_j`.
    pub fn pair_concat(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid(
                "pair_concat",
                format!("rank >= 2 required, got {shape:?}"),
            ));
        }
        let d = shape[shape.len() - 1];
        let n = shape[shape.len() - 2];
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(batch * n * n * 2 * d);
        for p in 0..batch {
            let base = p * n * d;
            for i in 0..n {
                for j in 0..n {
                    out.extend_from_slice(&data[base + i * d..base + (i + 1) * d]);
                    out.extend_from_slice(&data[base + j * d..base + (j + 1) * d]);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.extend([n, 2 * d]);
        self.push(Tensor::from_parts(out_shape, out), Op::PairConcat(x))
    }

    /// Softmax over the last axis. Masked-out entries are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(x);
        let k = t.last_dim();
        if let Some(m) = mask {
            if !m.applies_to(t.shape()) {
                return Err(mismatch("softmax", t.shape(), m.shape()));
            }
        }
        let data = t.data();
        let mut out = vec![0.0; data.len()];
        for (r, (row, orow)) in data.chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let keep = |c: usize| mask.map_or(true, |m| m.get_flat(r * k + c));
            let max = (0..k)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::AllMasked { row: r });
            }
            let mut total = 0.0;
            for c in (0..k).filter(|&c| keep(c)) {
                let e = (row[c] - max).exp();
                orow[c] = e;
                total += e;
            }
            orow.iter_mut().for_each(|v| *v /= total);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(invalid(
                "leaky_relu",
                format!("slope {slope} outside (0, 1)"),
            ));
        }
        let t = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(t, Op::Sigmoid(x))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`. A rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &data[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("max_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for k in 0..inner {
                let mut best = (o * n) * inner + k;
                for i in 1..n {
                    let idx = (o * n + i) * inner + k;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::MaxAxis { x, argmax },
        )
    }

    /// Temporal convolution with same-length zero padding.
    /// `x [B, T, Cin]`, `w [K, Cin, Cout]` with odd `K`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] || ws[0] % 2 == 0 {
            return Err(mismatch("conv1d", &xs, &ws));
        }
        let (batch, t_len, cin) = (xs[0], xs[1], xs[2]);
        let (kw, cout) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv1d", &ws, self.shape(b)));
            }
        }
        let pad = kw / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; batch * t_len * cout];
        for bi in 0..batch {
            for t in 0..t_len {
                let orow = &mut out[(bi * t_len + t) * cout..(bi * t_len + t + 1) * cout];
                if let Some(b) = b {
                    orow.copy_from_slice(self.nodes[b.0].value.data());
                }
                for k in 0..kw {
                    let src = t as isize + k as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let xrow = &xd[(bi * t_len + src as usize) * cin..][..cin];
                    gemm(
                        xrow,
                        &wd[k * cin * cout..(k + 1) * cin * cout],
                        orow,
                        1,
                        cin,
                        cout,
                    );
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![batch, t_len, cout], out),
            Op::Conv1d { x, w, b },
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`. `logits` is `[K]` or `[R, K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let k = t.last_dim();
        let rows = t.len() / k;
        if t.rank() > 2 || labels.len() != rows {
            return Err(invalid(
                "cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), t.shape()),
            ));
        }
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        for (r, row) in t.data().chunks(k).enumerate() {
            let label = labels[r];
            if label >= k {
                return Err(NumericsError::LabelOutOfRange { label, classes: k });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label];
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of `loss` (shape `[1]`) with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(NumericsError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (name, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |var: Var, t: Tensor| match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let shaped = |var: Var, data: Vec<f64>| -> Tensor {
            Tensor::from_parts(self.nodes[var.0].value.shape().to_vec(), data)
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din;
                let mut gx = vec![0.0; xv.len()];
                gemm_bt(gd, wv.data(), &mut gx, rows, din, dout);
                let mut gw = vec![0.0; wv.len()];
                gemm_at(xv.data(), gd, &mut gw, rows, din, dout);
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*b, shaped(*b, gb));
                }
                acc(*x, shaped(*x, gx));
                acc(*w, shaped(*w, gw));
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[av.rank() - 2], av.last_dim());
                let n = bv.last_dim();
                let shared = bv.rank() == 2;
                let batch = av.len() / (m * k);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for p in 0..batch {
                    let boff = if shared { 0 } else { p * k * n };
                    let gslice = &gd[p * m * n..(p + 1) * m * n];
                    gemm_bt(
                        gslice,
                        &bv.data()[boff..boff + k * n],
                        &mut ga[p * m * k..(p + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                    gemm_at(
                        &av.data()[p * m * k..(p + 1) * m * k],
                        gslice,
                        &mut gb[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(*a, shaped(*a, ga));
                acc(*b, shaped(*b, gb));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                acc(*a, shaped(*a, ga));
                acc(*b, shaped(*b, gb));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (part, v) in parts.iter_mut().zip(inputs) {
                        let block = self.shape(*v)[*axis] * inner;
                        part.extend_from_slice(&gd[pos..pos + block]);
                        pos += block;
                    }
                }
                for (part, v) in parts.into_iter().zip(inputs) {
                    acc(*v, shaped(*v, part));
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, shaped(*x, gx));
            }
            Op::Reshape(x) => acc(*x, shaped(*x, gd.to_vec())),
            Op::Permute { x, axes } => {
                let map = permute_map(self.shape(*x), axes);
                let mut gx = vec![0.0; gd.len()];
                for (o, &i) in map.iter().enumerate() {
                    gx[i] = gd[o];
                }
                acc(*x, shaped(*x, gx));
            }
            Op::GatherRows { x, index } => {
                let cols = self.value(*x).last_dim();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &r) in index.iter().enumerate() {
                    for c in 0..cols {
                        gx[r * cols + c] += gd[o * cols + c];
                    }
                }
                acc(*x, shaped(*x, gx));
            }
            Op::PairConcat(x) => {
                let xs = self.shape(*x);
                let d = xs[xs.len() - 1];
                let n = xs[xs.len() - 2];
                let batch = self.value(*x).len() / (n * d);
                let mut gx = vec![0.0; self.value(*x).len()];
                for p in 0..batch {
                    for i in 0..n {
                        for j in 0..n {
                            let off = ((p * n + i) * n + j) * 2 * d;
                            for c in 0..d {
                                gx[(p * n + i) * d + c] += gd[off + c];
                                gx[(p * n + j) * d + c] += gd[off + d + c];
                            }
                        }
                    }
                }
                acc(*x, shaped(*x, gx));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(k).zip(gd.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..k {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, shaped(*x, gx));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v >= 0.0 { *g } else { g * slope })
                    .collect();
                acc(*x, shaped(*x, gx));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, shaped(*x, gx));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*x, shaped(*x, gx));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*x, shaped(*x, gx));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                acc(*x, shaped(*x, vec![gd[0]; n]));
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        gx[(o * n + i) * inner..(o * n + i + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, shaped(*x, gx));
            }
            Op::MaxAxis { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += gd[o];
                }
                acc(*x, shaped(*x, gx));
            }
            Op::Conv1d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, t_len, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (kw, cout) = (wv.shape()[0], wv.shape()[2]);
                let pad = kw / 2;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for bi in 0..batch {
                    for t in 0..t_len {
                        let grow = &gd[(bi * t_len + t) * cout..][..cout];
                        for k in 0..kw {
                            let src = t as isize + k as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let xoff = (bi * t_len + src as usize) * cin;
                            let wk = k * cin * cout;
                            gemm_bt(
                                grow,
                                &wv.data()[wk..wk + cin * cout],
                                &mut gx[xoff..xoff + cin],
                                1,
                                cin,
                                cout,
                            );
                            gemm_at(
                                &xv.data()[xoff..xoff + cin],
                                grow,
                                &mut gw[wk..wk + cin * cout],
                                1,
                                cin,
                                cout,
                            );
                        }
                    }
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*b, shaped(*b, gb));
                }
                acc(*x, shaped(*x, gx));
                acc(*w, shaped(*w, gw));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).last_dim();
                let rows = labels.len();
                let scale = gd[0] / rows as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * k + l] -= scale;
                }
                acc(*logits, shaped(*logits, gx));
            }
        }
    }
}
