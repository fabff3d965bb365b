//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] walks the
//! nodes in exact reverse order of recording and accumulates gradients, so a
//! value consumed `k` times receives the sum of `k` contributions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Conv2dSpec, SparseMatrix, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LnClamped(Var, f64),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BroadcastRows(Var),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    ScaleByScalar(Var, Var),
    DivByScalar(Var, Var),
    DivElem(Var, Var),
    MulConst(Var, Arc<Tensor>),
    SpMM(Arc<SparseMatrix>, Var),
    Conv2d(Var, Var, Conv2dSpec),
    GlobalAvgPool(Var),
    Upsample2x(Var),
    Reshape(Var),
    L2NormClamped(Var, f64),
    Pick(Var, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowBias(a, b)
            | AddChannelBias(a, b) | ScaleRows(a, b) | ScaleByScalar(a, b)
            | DivByScalar(a, b) | DivElem(a, b) | Conv2d(a, b, _) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | LeakyRelu(a, _) | Tanh(a) | Sigmoid(a)
            | LnClamped(a, _) | Square(a) | Softmax(a) | LogSoftmax(a) | SumAll(a)
            | MeanAll(a) | MeanRows(a) | BroadcastRows(a) | GatherRows(a, _)
            | MulConst(a, _) | SpMM(_, a) | GlobalAvgPool(a) | Upsample2x(a) | Reshape(a)
            | L2NormClamped(a, _) | Pick(a, _) => vec![*a],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Detached);
        }
        Ok(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        })
    }

    /// Borrowing variant of [`Gradients::wrt`]; `None` means the gradient is zero.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor>> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Detached);
        }
        Ok(self.grads[v.0].as_ref())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
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

    /// A leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let v = zip_map(x, y, |p, q| p + q);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let v = zip_map(x, y, |p, q| p - q);
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let v = zip_map(x, y, |p, q| p * q);
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("div", x, y)?;
        let v = zip_map(x, y, |p, q| p / q);
        self.push(v, Op::DivElem(a, b), "div")
    }

    /// `[n, f] + [f]` (bias of any shape with `f` entries).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != f {
            return Err(Error::shape("add_row_bias", format!("{f} columns, bias {:?}", b.shape())));
        }
        let mut out = self.value(x).clone();
        for r in 0..n {
            for (o, bv) in out.data_mut()[r * f..(r + 1) * f].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRowBias(x, bias), "add_row_bias")
    }

    /// `[c, h, w] + [c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::shape("add_channel_bias", format!("{c} channels, bias {:?}", b.shape())));
        }
        let mut out = self.value(x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = b.data()[ch];
            for o in plane {
                *o += bv;
            }
        }
        self.push(out, Op::AddChannelBias(x, bias), "add_channel_bias")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * k);
        self.push(v, Op::Scale(x, k), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a + k);
        self.push(v, Op::AddScalar(x), "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(eps).ln());
        self.push(v, Op::LnClamped(x, eps), "ln_clamped")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x), "square")
    }

    /// Row-wise softmax of a `[n, m]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(x))?;
        self.push(v, Op::Softmax(x), "softmax")
    }

    /// Row-wise log-softmax of a `[n, m]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = tensor::log_softmax_rows(self.value(x))?;
        self.push(v, Op::LogSoftmax(x), "log_softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::MeanAll(x), "mean")
    }

    /// Column means: `[n, f] -> [1, f]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, f) = t.dims2()?;
        if n == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; f];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(Tensor::row(&out), Op::MeanRows(x), "mean_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor::new(vec![n, total], out)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        }
        let f = self.value(parts[0]).dims2()?.1;
        let mut n = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != f {
                return Err(Error::shape("concat_rows", format!("column counts {f} vs {c}")));
            }
            n += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![n, f], out)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Repeat a `[1, f]` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, f) = t.dims2()?;
        if r != 1 {
            return Err(Error::shape("broadcast_rows", format!("expected one row, got {r}")));
        }
        let mut out = Vec::with_capacity(n * f);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![n, f], out)?;
        self.push(v, Op::BroadcastRows(x), "broadcast_rows")
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, f) = t.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(t.row_slice(r));
        }
        let v = Tensor::new(vec![rows.len(), f], out)?;
        self.push(v, Op::GatherRows(x, rows.to_vec()), "gather_rows")
    }

    /// Multiply row `i` of `[n, f]` by entry `i` of an `n`-element column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let sv = self.value(s);
        if sv.len() != n {
            return Err(Error::shape("scale_rows", format!("{n} rows, {} scales", sv.len())));
        }
        let mut out = self.value(x).clone();
        for r in 0..n {
            let k = sv.data()[r];
            for o in &mut out.data_mut()[r * f..(r + 1) * f] {
                *o *= k;
            }
        }
        self.push(out, Op::ScaleRows(x, s), "scale_rows")
    }

    /// Multiply every entry by a scalar-valued variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", sv.shape())));
        }
        let k = sv.data()[0];
        let v = self.value(x).map(|a| a * k);
        self.push(v, Op::ScaleByScalar(x, s), "scale_by")
    }

    /// Divide every entry by a scalar-valued variable.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("div_by", format!("scalar expected, got {:?}", sv.shape())));
        }
        let k = sv.data()[0];
        let v = self.value(x).map(|a| a / k);
        self.push(v, Op::DivByScalar(x, s), "div_by")
    }

    /// Elementwise product with a constant (dropout masks, fixed targets).
    pub fn mul_const(&mut self, x: Var, c: Arc<Tensor>) -> Result<Var> {
        let t = self.value(x);
        same_shape("mul_const", t, &c)?;
        let v = zip_map(t, &c, |p, q| p * q);
        self.push(v, Op::MulConst(x, c), "mul_const")
    }

    /// Constant sparse matrix times a dense `[n, f]` variable.
    pub fn spmm(&mut self, s: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let v = s.matmul(self.value(x))?;
        self.push(v, Op::SpMM(s, x), "spmm")
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), self.value(kernel), spec)?;
        self.push(v, Op::Conv2d(x, kernel, spec), "conv2d")
    }

    /// `[c, h, w] -> [1, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3()?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = t.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        debug_assert_eq!(out.len(), c);
        self.push(Tensor::row(&out), Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Nearest-neighbour 2x upsampling of `[c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = t.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(vec![c, oh, ow], out)?;
        self.push(v, Op::Upsample2x(x), "upsample2x")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// `max(‖x‖₂, eps)` as a scalar.
    pub fn l2_norm_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).data().iter().map(|a| a * a).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n.max(eps)), Op::L2NormClamped(x, eps), "l2_norm")
    }

    /// Single entry (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(Error::IndexOutOfRange {
                op: "pick",
                index,
                len: t.len(),
            });
        }
        let v = Tensor::scalar(t.data()[index]);
        self.push(v, Op::Pick(x, index), "pick")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(*a, tensor::matmul_nt(g, val(b))?);
                }
                if needs(b) {
                    acc(*b, tensor::matmul_tn(val(a), g)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if needs(b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(*a, zip_map(g, val(b), |x, y| x * y));
                }
                if needs(b) {
                    acc(*b, zip_map(g, val(a), |x, y| x * y));
                }
            }
            Op::DivElem(a, b) => {
                if needs(a) {
                    acc(*a, zip_map(g, val(b), |x, y| x / y));
                }
                if needs(b) {
                    let q = zip_map(val(a), val(b), |x, y| -x / (y * y));
                    acc(*b, zip_map(g, &q, |x, y| x * y));
                }
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if needs(b) {
                    let (n, f) = g.dims2()?;
                    let mut db = vec![0.0; f];
                    for r in 0..n {
                        for (d, v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(val(b).shape().to_vec(), db)?);
                }
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, g.clone());
                if needs(b) {
                    let (c, h, w) = g.dims3()?;
                    let db: Vec<f64> = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    debug_assert_eq!(db.len(), c);
                    acc(*b, Tensor::new(val(b).shape().to_vec(), db)?);
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => acc(*x, zip_map(g, val(x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(x, s) => {
                acc(*x, zip_map(g, val(x), |d, v| if v > 0.0 { d } else { s * d }))
            }
            Op::Tanh(_) => {
                let x = node_input(&node.op);
                acc(x, zip_map(g, &node.value, |d, y| d * (1.0 - y * y)));
            }
            Op::Sigmoid(_) => {
                let x = node_input(&node.op);
                acc(x, zip_map(g, &node.value, |d, y| d * y * (1.0 - y)));
            }
            Op::LnClamped(x, eps) => {
                acc(*x, zip_map(g, val(x), |d, v| if v > *eps { d / v } else { 0.0 }))
            }
            Op::Square(x) => acc(*x, zip_map(g, val(x), |d, v| 2.0 * v * d)),
            Op::Softmax(x) => {
                let (n, m) = g.dims2()?;
                let y = &node.value;
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        dx[r * m + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, Tensor::new(vec![n, m], dx)?);
            }
            Op::LogSoftmax(x) => {
                let (n, m) = g.dims2()?;
                let y = &node.value;
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let gs: f64 = gr.iter().sum();
                    for c in 0..m {
                        dx[r * m + c] = gr[c] - yr[c].exp() * gs;
                    }
                }
                acc(*x, Tensor::new(vec![n, m], dx)?);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(val(x).shape(), g.data()[0])),
            Op::MeanAll(x) => {
                let n = val(x).len() as f64;
                acc(*x, Tensor::full(val(x).shape(), g.data()[0] / n));
            }
            Op::MeanRows(x) => {
                let (n, f) = val(x).dims2()?;
                let mut dx = Vec::with_capacity(n * f);
                for _ in 0..n {
                    dx.extend(g.data().iter().map(|v| v / n as f64));
                }
                acc(*x, Tensor::new(vec![n, f], dx)?);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.dims2()?;
                let mut off = 0;
                for p in parts {
                    let w = val(p).dims2()?.1;
                    if needs(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(*p, Tensor::new(vec![n, w], d)?);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let f = g.dims2()?.1;
                let mut off = 0;
                for p in parts {
                    let r = val(p).dims2()?.0;
                    if needs(p) {
                        acc(*p, Tensor::new(vec![r, f], g.data()[off * f..(off + r) * f].to_vec())?);
                    }
                    off += r;
                }
            }
            Op::BroadcastRows(x) => {
                let (n, f) = g.dims2()?;
                let mut d = vec![0.0; f];
                for r in 0..n {
                    for (o, v) in d.iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(vec![1, f], d)?);
            }
            Op::GatherRows(x, rows) => {
                let (n, f) = val(x).dims2()?;
                let mut d = vec![0.0; n * f];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in d[r * f..(r + 1) * f].iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(vec![n, f], d)?);
            }
            Op::ScaleRows(x, s) => {
                let (n, f) = g.dims2()?;
                let sv = val(s);
                if needs(x) {
                    let mut d = g.clone();
                    for r in 0..n {
                        let k = sv.data()[r];
                        for o in &mut d.data_mut()[r * f..(r + 1) * f] {
                            *o *= k;
                        }
                    }
                    acc(*x, d);
                }
                if needs(s) {
                    let xv = val(x);
                    let ds: Vec<f64> = (0..n)
                        .map(|r| g.row_slice(r).iter().zip(xv.row_slice(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*s, Tensor::new(sv.shape().to_vec(), ds)?);
                }
            }
            Op::ScaleByScalar(x, s) => {
                let k = val(s).data()[0];
                if needs(x) {
                    acc(*x, g.map(|v| v * k));
                }
                if needs(s) {
                    let ds: f64 = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::new(val(s).shape().to_vec(), vec![ds])?);
                }
            }
            Op::DivByScalar(x, s) => {
                let k = val(s).data()[0];
                if needs(x) {
                    acc(*x, g.map(|v| v / k));
                }
                if needs(s) {
                    let ds: f64 = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::new(val(s).shape().to_vec(), vec![-ds / (k * k)])?);
                }
            }
            Op::MulConst(x, c) => acc(*x, zip_map(g, c, |a, b| a * b)),
            Op::SpMM(s, x) => acc(*x, s.matmul_transposed(g)?),
            Op::Conv2d(x, k, spec) => {
                let (dx, dk) = tensor::conv2d_backward(val(x), val(k), g, *spec, needs(x), needs(k))?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dk) = dk {
                    acc(*k, dk);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = val(x).dims3()?;
                let hw = (h * w) as f64;
                let mut d = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    let gv = g.data()[ch] / hw;
                    d.extend(std::iter::repeat(gv).take(h * w));
                }
                acc(*x, Tensor::new(vec![c, h, w], d)?);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = val(x).dims3()?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                acc(*x, Tensor::new(vec![c, h, w], d)?);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(x).shape().to_vec())?),
            Op::L2NormClamped(x, eps) => {
                let norm = node.value.data()[0];
                let gv = g.data()[0];
                if norm > *eps {
                    acc(*x, val(x).map(|v| gv * v / norm));
                }
            }
            Op::Pick(x, idx) => {
                let mut d = Tensor::zeros(val(x).shape());
                d.data_mut()[*idx] = g.data()[0];
                acc(*x, d);
            }
        }
        Ok(())
    }
}

fn node_input(op: &Op) -> Var {
    op.inputs()[0]
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::row(&[1.0, -2.0, 3.5]));
        let sq = t.square(x).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut t = Tape::new();
        let x = t.var(Tensor::row(&[0.5, -1.5]));
        let xx = t.mul(x, x).unwrap();
        let y = t.add(xx, x).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_onehot() {
        let z = [0.2, -1.0, 0.7, 0.1];
        let mut t = Tape::new();
        let x = t.var(Tensor::row(&z));
        let ls = t.log_softmax(x).unwrap();
        let picked = t.pick(ls, 2).unwrap();
        let l = t.scale(picked, -1.0).unwrap();
        let g = t.backward(l).unwrap().wrt(x).unwrap();
        let p = tensor::softmax_rows(&Tensor::row(&z)).unwrap();
        for (c, (gv, pv)) in g.data().iter().zip(p.data()).enumerate() {
            let target = if c == 2 { 1.0 } else { 0.0 };
            assert!((gv - (pv - target)).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.var(Tensor::row(&[1.0, 2.0]));
        let c = t.constant(Tensor::scalar(3.0));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(matches!(t.backward(c), Err(Error::Detached)));
        let l = t.sum(x).unwrap();
        let g = t.backward(l).unwrap();
        assert!(matches!(g.wrt(c), Err(Error::Detached)));
    }

    #[test]
    fn constant_rows_softmax_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::from_rows(&[[1.3, 1.3, 1.3], [-2.0, -2.0, -2.0]]));
        let p = t.softmax(x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap().wrt(x).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let x = t.var(Tensor::row(&[1e308, 1e308]));
        let y = t.scale(x, 10.0);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}
