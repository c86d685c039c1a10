//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its computed value. [`Tape::backward`]
//! walks the nodes in exact reverse order and writes a gradient onto every
//! node that depends on a leaf created with `requires_grad = true`.
//!
//! Broadcasting (for [`Tape::add`] and [`Tape::mul`]) is one-sided: the
//! second operand `b` broadcasts onto `a` when it holds a single element, or
//! when its shape with leading 1s removed equals a trailing suffix of
//! `a`'s shape. The output always has `a`'s shape.
//!
//! Gradients do not accumulate across calls: `backward` clears every
//! gradient before it runs, so calling it twice yields the same result.

pub mod kernels;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, inv_std: Vec<F> },
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AdaptiveAvgPool { x: Var, out_h: usize, out_w: usize },
    IndexSelect { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    RowSelect { a: Var, b: Var, take_a: Vec<bool> },
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Ordered record of executed operations. Confined to one thread; build one
/// tape per sample.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    let bn: usize = b.iter().product();
    if bn == 1 {
        return true;
    }
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first..];
    core.len() <= a.len() && a[a.len() - core.len()..] == *core
}

fn dims2(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(format!("{what} expects a 2-D tensor, got {s:?}")),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient written by the last [`backward`](Self::backward) call, if the
    /// node was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return shape_err(format!("matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_t")?;
        let (n, k2) = dims2(self.value(b), "matmul_t")?;
        if k != k2 {
            return shape_err(format!("matmul_t inner dimensions differ: [{m}, {k}] x [{n}, {k2}]^T"));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if broadcasts(self.shape(a), self.shape(b)) {
            Ok(())
        } else {
            shape_err(format!("{what}: {:?} does not broadcast onto {:?}", self.shape(b), self.shape(a)))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let av = self.value(a);
        let bd = self.value(b).data();
        let bn = bd.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bn])).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "add")?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "sub")?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * s).collect()).expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!("softmax axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![F::zero(); self.value(x).numel()];
        kernels::softmax(self.value(x).data(), &mut out, outer, len, inner);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Normalizes each row along the last axis to zero mean and unit
    /// (population) variance. No learned affine.
    pub fn layer_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm on a 0-d tensor".into()))?;
        if d == 0 {
            return shape_err("layer_norm needs a non-empty last axis");
        }
        let src = self.value(x).data();
        let rows = src.len() / d;
        let df = F::from_usize(d).unwrap();
        let mut out = vec![F::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| kernels::gelu(v)).collect())
            .expect("same shape");
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Cross-correlation of `x[cin×h×w]` with `w[cout×cin×k×k]` via im2col.
    /// Output spatial size is `floor((h + 2·pad − k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return shape_err(format!("conv2d input must be [C, H, W], got {s:?}")),
        };
        let (cout, k) = match self.shape(w) {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
            s => return shape_err(format!("conv2d weight {s:?} incompatible with input channels {cin}")),
        };
        if stride == 0 {
            return shape_err("conv2d stride must be >= 1");
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return shape_err(format!("conv2d kernel {k} larger than padded input {h}x{wd} (pad {pad})"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv2d bias must be [{cout}], got {:?}", self.shape(b)));
            }
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let cols = kernels::im2col(self.value(x).data(), cin, h, wd, k, stride, pad, oh, ow);
        let mut out = vec![F::zero(); cout * oh * ow];
        kernels::matmul_acc(self.value(w).data(), &cols, &mut out, cout, cin * k * k, oh * ow);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (c, chunk) in out.chunks_mut(oh * ow).enumerate() {
                for o in chunk {
                    *o += bd[c];
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Tensor::new(vec![cout, oh, ow], out)?, Op::Conv2d { x, w, b: bias, stride, pad }, &inputs))
    }

    /// Per-channel adaptive average pooling of `x[c×h×w]` to `c×out_h×out_w`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] if *h >= 1 && *w >= 1 => (*c, *h, *w),
            s => return shape_err(format!("adaptive_avg_pool needs [C, H>=1, W>=1], got {s:?}")),
        };
        if out_h == 0 || out_w == 0 {
            return shape_err("adaptive_avg_pool output must be at least 1x1");
        }
        let src = self.value(x).data();
        let mut out = vec![F::zero(); c * out_h * out_w];
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = kernels::pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = kernels::pool_bin(ox, w, out_w);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * out_h + oy) * out_w + ox] = acc / F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
        Ok(self.push(Tensor::new(vec![c, out_h, out_w], out)?, Op::AdaptiveAvgPool { x, out_h, out_w }, &[x]))
    }

    /// Gathers rows (axis 0): output row `i` is input row `idx[i]`.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::Shape("index_select on a 0-d tensor".into()))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("index {bad} out of range for {rows} rows")));
        }
        let width = self.value(x).numel().checked_div(rows).unwrap_or(0);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        Ok(self.push(Tensor::new(out_shape, out)?, Op::IndexSelect { x, idx: idx.to_vec() }, &[x]))
    }

    /// Flat gather: `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("flat index {bad} out of range for {n} elements")));
        }
        let src = self.value(x).data();
        let out: Vec<F> = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    /// Concatenates along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err(format!("concat_rows: {:?} vs trailing {:?}", s, tail));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return shape_err(format!("slice_rows {start}..{end} out of bounds for {shape:?}"));
        }
        let width = self.value(x).numel() / shape[0].max(1);
        let out = self.value(x).data()[start * width..end * width].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SliceRows { x, start }, &[x]))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let (rows, _) = dims2(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != rows {
                return shape_err(format!("concat_cols row counts differ: {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x), "slice_cols")?;
        if start > end || end > cols {
            return shape_err(format!("slice_cols {start}..{end} out of bounds for {cols} columns"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        Ok(self.push(Tensor::new(vec![rows, end - start], out)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Row-wise select between two same-shaped tensors: row `i` is copied
    /// from `a` when `take_a[i]`, otherwise from `b`. Values are copied, not
    /// blended, so selected rows are bit-identical to their source.
    pub fn row_select(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) {
            return shape_err(format!("row_select shapes differ: {:?} vs {:?}", shape, self.shape(b)));
        }
        if shape.is_empty() || shape[0] != take_a.len() {
            return shape_err(format!("row_select mask length {} vs shape {:?}", take_a.len(), shape));
        }
        let width = self.value(a).numel() / shape[0].max(1);
        let mut out = Vec::with_capacity(self.value(a).numel());
        for (i, &t) in take_a.iter().enumerate() {
            let src = if t { self.value(a) } else { self.value(b) };
            out.extend_from_slice(&src.data()[i * width..(i + 1) * width]);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::RowSelect { a, b, take_a: take_a.to_vec() }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mse shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).numel();
        if n == 0 {
            return shape_err("mse of empty tensors");
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>();
        Ok(self.push(Tensor::scalar(s / F::from_usize(n).unwrap()), Op::Mse(a, b), &[a, b]))
    }

    /// `−log softmax(logits)[target]` for a single sample.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let k = self.value(logits).numel();
        if target >= k {
            return Err(Error::Index(format!("class {target} out of range for {k} logits")));
        }
        let mut probs = vec![F::zero(); k];
        kernels::softmax(self.value(logits).data(), &mut probs, 1, k, 1);
        let l = self.value(logits).data();
        let max = l.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + l.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        let loss = lse - l[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, &[logits]))
    }

    /// Computes gradients of the scalar `loss` with respect to every node
    /// that requires them. Previous gradients are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<F>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop_node(&mut self, i: usize, g: &[F]) {
        // Swap the op out so the node table can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    kernels::matmul_bt_acc(g, &bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(*b) {
                    kernels::matmul_at_acc(&av, g, gb, m, k, n);
                }
            }
            Op::MatmulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    kernels::matmul_acc(g, &bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(*b) {
                    kernels::matmul_at_acc(g, &av, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.acc(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(op, Op::Sub(..));
                if let Some(ga) = self.acc(*a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    let bn = gb.len();
                    for (i, &y) in g.iter().enumerate() {
                        if neg {
                            gb[i % bn] -= y;
                        } else {
                            gb[i % bn] += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let bn = bv.len();
                if let Some(ga) = self.acc(*a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % bn];
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % bn] += y * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                if let Some(ga) = self.acc(*a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * s;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(gx) = self.acc(*x) {
                    for o in 0..outer {
                        for q in 0..inner {
                            let base = o * len * inner + q;
                            let mut dot = F::zero();
                            for t in 0..len {
                                dot += g[base + t * inner] * y[base + t * inner];
                            }
                            for t in 0..len {
                                let at = base + t * inner;
                                gx[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = *self.nodes[i].value.shape().last().unwrap();
                let df = F::from_usize(d).unwrap();
                if let Some(gx) = self.acc(*x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mean_g = gr.iter().copied().sum::<F>() / df;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / df;
                        for t in 0..d {
                            gx[r * d + t] += is * (gr[t] - mean_g - yr[t] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for (t, o) in gx.iter_mut().enumerate() {
                        *o += g[t] * kernels::gelu_grad(xv[t]);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (cin, h, wd) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let (cout, k) = (self.shape(*w)[0], self.shape(*w)[2]);
                let (oh, ow) = (self.nodes[i].value.shape()[1], self.nodes[i].value.shape()[2]);
                let npos = oh * ow;
                let ckk = cin * k * k;
                if let Some(bv) = b {
                    if let Some(gb) = self.acc(*bv) {
                        for (c, chunk) in g.chunks(npos).enumerate() {
                            gb[c] += chunk.iter().copied().sum::<F>();
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let cols = kernels::im2col(self.value(*x).data(), cin, h, wd, k, *stride, *pad, oh, ow);
                    let gw = self.acc(*w).unwrap();
                    kernels::matmul_bt_acc(g, &cols, gw, cout, npos, ckk);
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let mut dcols = vec![F::zero(); ckk * npos];
                    kernels::matmul_at_acc(&wv, g, &mut dcols, cout, ckk, npos);
                    let gx = self.acc(*x).unwrap();
                    kernels::col2im_acc(&dcols, gx, cin, h, wd, k, *stride, *pad, oh, ow);
                }
            }
            Op::AdaptiveAvgPool { x, out_h, out_w } => {
                let (c, h, w) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let (out_h, out_w) = (*out_h, *out_w);
                if let Some(gx) = self.acc(*x) {
                    for ch in 0..c {
                        for oy in 0..out_h {
                            let (y0, y1) = kernels::pool_bin(oy, h, out_h);
                            for ox in 0..out_w {
                                let (x0, x1) = kernels::pool_bin(ox, w, out_w);
                                let share =
                                    g[(ch * out_h + oy) * out_w + ox] / F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[(ch * h + y) * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::IndexSelect { x, idx } => {
                let rows = self.shape(*x)[0];
                let width = self.value(*x).numel().checked_div(rows).unwrap_or(0);
                if let Some(gx) = self.acc(*x) {
                    for (o, &src) in idx.iter().enumerate() {
                        for t in 0..width {
                            gx[src * width + t] += g[o * width + t];
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.acc(*x) {
                    for (o, &src) in idx.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.acc(*p) {
                        for (x, &y) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *x += y;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let rows = self.shape(*x)[0];
                let width = self.value(*x).numel() / rows.max(1);
                let off = start * width;
                if let Some(gx) = self.acc(*x) {
                    for (t, &y) in g.iter().enumerate() {
                        gx[off + t] += y;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut col = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if let Some(gp) = self.acc(*p) {
                        for r in 0..rows {
                            for t in 0..c {
                                gp[r * c + t] += g[r * total + col + t];
                            }
                        }
                    }
                    col += c;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let (rows, w) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                let start = *start;
                if let Some(gx) = self.acc(*x) {
                    for r in 0..rows {
                        for t in 0..w {
                            gx[r * cols + start + t] += g[r * w + t];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::RowSelect { a, b, take_a } => {
                let width = g.len() / take_a.len().max(1);
                for (src, want) in [(*a, true), (*b, false)] {
                    if let Some(gs) = self.acc(src) {
                        for (r, &t) in take_a.iter().enumerate() {
                            if t == want {
                                for q in r * width..(r + 1) * width {
                                    gs[q] += g[q];
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                if let Some(gx) = self.acc(*x) {
                    for v in gx.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let scale = g[0] * F::from_f64_lossy(2.0) / F::from_usize(av.len()).unwrap();
                if let Some(ga) = self.acc(*a) {
                    for t in 0..av.len() {
                        ga[t] += scale * (av[t] - bv[t]);
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for t in 0..av.len() {
                        gb[t] -= scale * (av[t] - bv[t]);
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let s = g[0];
                let target = *target;
                if let Some(gl) = self.acc(*logits) {
                    for (t, (x, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if t == target { F::one() } else { F::zero() };
                        *x += s * (p - onehot);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}
