//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a node
//! whose parents are earlier nodes, so the node order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Leaves come in two kinds: parameters (gradients are tracked) and constants
//! (inputs and targets, never differentiated).
//!
//! A graph is confined to one thread; independent graphs can be built
//! concurrently over shared read-only parameters since leaves may borrow.

use std::borrow::Cow;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    /// `a + 1·bias` with `bias` of shape 1×n.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, T),
    Clamp(usize, T, T),
    Dropout(usize, Vec<T>),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Reshape(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph. `'a` is the lifetime of borrowed leaf tensors.
#[derive(Debug)]
pub struct Graph<'a, T: Scalar> {
    id: u32,
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss or belongs to another graph.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("graph too large");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let rg = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} does not belong to graph {}",
                self.id
            )));
        }
        Ok(v.index())
    }

    /// Differentiable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Non-differentiable leaf borrowing `t`.
    pub fn constant(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Value of a node. Panics on a variable of another graph.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable of another graph");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f);
        Ok(self.derived(out, op(ia, ib), &[ia, ib]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f);
        Ok(self.derived(out, op(ia), &[ia]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.derived(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.cols() != vb.cols() {
            return Err(Error::shape("matmul_nt", va.shape(), vb.shape()));
        }
        let mut out = Tensor::zeros(va.rows(), vb.rows());
        gemm_nt(va, vb, &mut out);
        Ok(self.derived(out, Op::MatMulNt(ia, ib), &[ia, ib]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose();
        Ok(self.derived(out, Op::Transpose(ia), &[ia]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    /// Adds the 1×n row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape("add_row", va.shape(), vb.shape()));
        }
        let mut out = va.as_ref().clone();
        let n = va.cols();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o = *o + b;
            }
        }
        Ok(self.derived(out, Op::AddRow(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("hadamard", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Element-wise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Min)
    }

    /// Element-wise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Max)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x + c, |i| Op::AddScalar(i, c))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, T::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        match kind {
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
        }
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Ln)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary(a, |x| x.powf(p), |i| Op::Powf(i, p))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(a, |x| x.max(lo).min(hi), |i| Op::Clamp(i, lo, hi))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`. In
    /// evaluation mode, or with `rate == 0`, this is the identity and no node
    /// is recorded.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let ia = self.idx(a)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let n = self.nodes[ia].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let va = &self.nodes[ia].value;
        let out = Tensor::new(
            va.rows(),
            va.cols(),
            va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        Ok(self.derived(out, Op::Dropout(ia, mask), &[ia]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.cols() == 0 {
            return Err(Error::shape("row_softmax", va.shape(), (va.rows(), 1)));
        }
        if !va.all_finite() {
            return Err(Error::Numeric("row_softmax on non-finite input".into()));
        }
        let mut out = va.as_ref().clone();
        for row in out.data_mut().chunks_mut(va.cols()) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        Ok(self.derived(out, Op::RowSoftmax(ia), &[ia]))
    }

    /// Row-wise log-softmax, `x − max − ln Σ exp(x − max)`.
    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.cols() == 0 {
            return Err(Error::shape("row_log_softmax", va.shape(), (va.rows(), 1)));
        }
        if !va.all_finite() {
            return Err(Error::Numeric("row_log_softmax on non-finite input".into()));
        }
        let mut out = va.as_ref().clone();
        for row in out.data_mut().chunks_mut(va.cols()) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let shift = m + z.ln();
            for x in row.iter_mut() {
                *x = *x - shift;
            }
        }
        Ok(self.derived(out, Op::RowLogSoftmax(ia), &[ia]))
    }

    /// Juxtaposes columns in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = *ids
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of an empty list".into()))?;
        let rows = self.nodes[first].value.rows();
        let mut cols = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.0 != rows {
                return Err(Error::shape("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &ids {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.derived(out, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Stacks rows in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = *ids
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of an empty list".into()))?;
        let cols = self.nodes[first].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &ids {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.derived(out, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if start + len > va.cols() {
            return Err(Error::shape("slice_cols", va.shape(), (start, len)));
        }
        let mut data = Vec::with_capacity(va.rows() * len);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let out = Tensor::new(va.rows(), len, data)?;
        Ok(self.derived(out, Op::SliceCols(ia, start), &[ia]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if start + len > va.rows() {
            return Err(Error::shape("slice_rows", va.shape(), (start, len)));
        }
        let c = va.cols();
        let out = Tensor::new(len, c, va.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.derived(out, Op::SliceRows(ia, start), &[ia]))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.len() != rows * cols {
            return Err(Error::shape("reshape", va.shape(), (rows, cols)));
        }
        let out = Tensor::new(rows, cols, va.data().to_vec())?;
        Ok(self.derived(out, Op::Reshape(ia), &[ia]))
    }

    /// Sum of all elements as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.derived(out, Op::Sum(ia), &[ia]))
    }

    /// Reverse sweep from the 1×1 node `loss`. Gradients of nodes that feed
    /// several consumers accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        let node = &self.nodes[il];
        if node.value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a 1x1 loss, got {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward on a tensor detached from every parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::scalar(T::one()));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| -> &Tensor<T> { &nodes[j].value };
        let out = &nodes[i].value;
        // Lazily allocated gradient slot of parent `j`, or None when `j` does
        // not need one.
        let slot = |j: usize, grads: &mut [Option<Tensor<T>>]| -> bool {
            if !nodes[j].requires_grad {
                return false;
            }
            if grads[j].is_none() {
                let (r, c) = nodes[j].value.shape();
                grads[j] = Some(Tensor::zeros(r, c));
            }
            true
        };
        macro_rules! acc {
            ($j:expr, |$gj:ident| $body:expr) => {
                if slot($j, grads) {
                    let $gj = grads[$j].as_mut().unwrap();
                    $body;
                }
            };
        }
        let elementwise = |gj: &mut Tensor<T>, f: &dyn Fn(usize) -> T| {
            for (k, x) in gj.data_mut().iter_mut().enumerate() {
                *x = *x + f(k);
            }
        };
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                acc!(a, |ga| gemm_nt(g, val(b), ga));
                acc!(b, |gb| gemm_tn(val(a), g, gb));
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (*a, *b);
                acc!(a, |ga| gemm_nn(g, val(b), ga));
                acc!(b, |gb| gemm_tn(g, val(a), gb));
            }
            Op::Transpose(a) => acc!(*a, |ga| ga.add_assign(&g.transpose())),
            Op::Add(a, b) => {
                acc!(*a, |ga| ga.add_assign(g));
                acc!(*b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, b) => {
                acc!(*a, |ga| ga.add_assign(g));
                acc!(*b, |gb| {
                    let n = g.cols();
                    for row in gd.chunks(n.max(1)) {
                        for (o, &x) in gb.data_mut().iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                acc!(*a, |ga| ga.add_assign(g));
                acc!(*b, |gb| elementwise(gb, &|k| -gd[k]));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a).data(), val(b).data());
                acc!(a, |ga| elementwise(ga, &|k| gd[k] * vb[k]));
                acc!(b, |gb| elementwise(gb, &|k| gd[k] * va[k]));
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a).data(), val(b).data());
                acc!(a, |ga| elementwise(ga, &|k| gd[k] / vb[k]));
                acc!(b, |gb| elementwise(gb, &|k| -gd[k] * va[k] / (vb[k] * vb[k])));
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(nodes[i].op, Op::Min(..));
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a).data(), val(b).data());
                let pick_a = |k: usize| if is_min { va[k] <= vb[k] } else { va[k] >= vb[k] };
                acc!(a, |ga| elementwise(ga, &|k| if pick_a(k) { gd[k] } else { T::zero() }));
                acc!(b, |gb| elementwise(gb, &|k| if pick_a(k) { T::zero() } else { gd[k] }));
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc!(*a, |ga| elementwise(ga, &|k| gd[k] * c));
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                acc!(*a, |ga| elementwise(ga, &|k| gd[k]));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc!(*a, |ga| elementwise(ga, &|k| gd[k] * y[k] * (T::one() - y[k])));
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc!(*a, |ga| elementwise(ga, &|k| gd[k] * (T::one() - y[k] * y[k])));
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc!(*a, |ga| elementwise(ga, &|k| if x[k] > T::zero() { gd[k] } else { T::zero() }));
            }
            Op::Exp(a) => {
                let y = out.data();
                acc!(*a, |ga| elementwise(ga, &|k| gd[k] * y[k]));
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                acc!(*a, |ga| elementwise(ga, &|k| gd[k] / x[k]));
            }
            Op::Powf(a, p) => {
                let (x, p) = (val(*a).data(), *p);
                acc!(*a, |ga| elementwise(ga, &|k| {
                    if p == T::zero() {
                        T::zero()
                    } else {
                        gd[k] * p * x[k].powf(p - T::one())
                    }
                }));
            }
            Op::Clamp(a, lo, hi) => {
                let (x, lo, hi) = (val(*a).data(), *lo, *hi);
                acc!(*a, |ga| elementwise(ga, &|k| {
                    if x[k] >= lo && x[k] <= hi { gd[k] } else { T::zero() }
                }));
            }
            Op::Dropout(a, mask) => {
                acc!(*a, |ga| elementwise(ga, &|k| gd[k] * mask[k]));
            }
            Op::RowLogSoftmax(a) => {
                let n = out.cols();
                acc!(*a, |ga| {
                    for ((grow, yrow), arow) in gd
                        .chunks(n)
                        .zip(out.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let total: T = grow.iter().copied().sum();
                        for ((o, &g), &y) in arow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + g - y.exp() * total;
                        }
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let n = out.cols();
                acc!(*a, |ga| {
                    for ((grow, yrow), arow) in gd
                        .chunks(n)
                        .zip(out.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((o, &g), &y) in arow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + y * (g - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc!(p, |gp| {
                        for (r, row) in gp.data_mut().chunks_mut(w.max(1)).enumerate() {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            for (o, &x) in row.iter_mut().zip(src) {
                                *o = *o + x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc!(p, |gp| elementwise(gp, &|k| gd[offset + k]));
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (start, w) = (*start, out.cols());
                let total = val(*a).cols();
                acc!(*a, |ga| {
                    for (r, row) in gd.chunks(w.max(1)).enumerate() {
                        let dst = &mut ga.data_mut()[r * total + start..r * total + start + w];
                        for (o, &x) in dst.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let off = *start * out.cols();
                acc!(*a, |ga| {
                    for (o, &x) in ga.data_mut()[off..off + gd.len()].iter_mut().zip(gd) {
                        *o = *o + x;
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc!(*a, |ga| elementwise(ga, &|_| s));
            }
        }
    }
}
