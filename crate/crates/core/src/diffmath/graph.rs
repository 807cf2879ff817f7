//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as an immutable node holding its
//! forward value. Node indices grow monotonically, so reverse index order is
//! a valid topological order for the backward sweep. Adjoints accumulate
//! additively.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, CowArray, Ix2, IxDyn, Slice};

use super::{fft, linalg, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Relu(usize),
    Gelu(usize),
    SoftThreshold(usize, f64),
    Sum(usize),
    SumAxis(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    MatMul(usize, usize),
    Softmax(usize),
    SymSolve(usize, usize, Vec<Array2<f64>>),
    CausalConv(usize, usize),
    SlidingWindows(usize, usize),
    Slice(usize, usize, usize),
    Flip(usize, usize),
    Concat(Vec<usize>, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph. Confined to one thread; distinct graphs are independent.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums a broadcast adjoint back down to `shape`.
fn reduce_to(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn std_owned(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("rank 2")
}

fn batch2(a: &ArrayD<f64>, i: usize) -> ArrayView2<'_, f64> {
    a.index_axis(Axis(0), i)
        .into_dimensionality()
        .expect("rank 3")
}

fn flatten_batch(a: &ArrayD<f64>) -> CowArray<'_, f64, Ix2> {
    let s = a.shape();
    a.as_standard_layout()
        .into_shape_with_order((s[0] * s[1], s[2]))
        .expect("standard layout")
}

fn stack_batches(mats: Vec<Array2<f64>>) -> ArrayD<f64> {
    let views: Vec<_> = mats.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views)
        .expect("uniform batch shapes")
        .into_dyn()
}

fn matmul_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let bad = || Error::contract(format!("matmul shapes {a:?} x {b:?}"));
    if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
        return Err(bad());
    }
    let (m, k1) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k1 != k2 {
        return Err(bad());
    }
    match (a.len(), b.len()) {
        (2, 2) => Ok(vec![m, n]),
        (3, 2) => Ok(vec![a[0], m, n]),
        (2, 3) => Ok(vec![b[0], m, n]),
        _ if a[0] == b[0] => Ok(vec![a[0], m, n]),
        _ => Err(bad()),
    }
}

fn matmul_forward(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    match (a.ndim(), b.ndim()) {
        (2, 2) => as2(a).dot(&as2(b)).into_dyn(),
        (3, 2) => {
            let s = a.shape();
            let out = flatten_batch(a).dot(&as2(b));
            out.into_shape_with_order(IxDyn(&[s[0], s[1], b.shape()[1]]))
                .expect("contiguous")
        }
        (2, 3) => stack_batches(
            (0..b.shape()[0])
                .map(|i| as2(a).dot(&batch2(b, i)))
                .collect(),
        ),
        _ => stack_batches(
            (0..a.shape()[0])
                .map(|i| batch2(a, i).dot(&batch2(b, i)))
                .collect(),
        ),
    }
}

fn matmul_backward(a: &ArrayD<f64>, b: &ArrayD<f64>, g: &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) {
    match (a.ndim(), b.ndim()) {
        (2, 2) => (
            as2(g).dot(&as2(b).t()).into_dyn(),
            as2(a).t().dot(&as2(g)).into_dyn(),
        ),
        (3, 2) => {
            let gf = flatten_batch(g);
            let da = gf
                .dot(&as2(b).t())
                .into_shape_with_order(IxDyn(a.shape()))
                .expect("contiguous");
            let db = flatten_batch(a).t().dot(&gf).into_dyn();
            (da, db)
        }
        (2, 3) => {
            let mut da = Array2::<f64>::zeros((a.shape()[0], a.shape()[1]));
            let mut dbs = Vec::with_capacity(b.shape()[0]);
            for i in 0..b.shape()[0] {
                da += &batch2(g, i).dot(&batch2(b, i).t());
                dbs.push(as2(a).t().dot(&batch2(g, i)));
            }
            (da.into_dyn(), stack_batches(dbs))
        }
        _ => {
            let n = a.shape()[0];
            let das = (0..n).map(|i| batch2(g, i).dot(&batch2(b, i).t())).collect();
            let dbs = (0..n).map(|i| batch2(a, i).t().dot(&batch2(g, i))).collect();
            (stack_batches(das), stack_batches(dbs))
        }
    }
}

fn softmax_last(a: &ArrayD<f64>) -> ArrayD<f64> {
    let last = Axis(a.ndim() - 1);
    let mut out = a.clone();
    for mut lane in out.lanes_mut(last) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let total: f64 = lane.sum();
        lane.mapv_inplace(|v| v / total);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.index
    }

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: std_owned(value),
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: nodes.len() - 1,
        }
    }

    fn push_checked(&self, value: ArrayD<f64>, op: Op, name: &str) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("forward value of {name}")));
        }
        let requires = {
            let nodes = self.nodes.borrow();
            self.parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, requires))
    }

    fn parents(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::SymSolve(a, b, _) | Op::CausalConv(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::SoftThreshold(a, _)
            | Op::Sum(a)
            | Op::SumAxis(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a)
            | Op::SlidingWindows(a, _)
            | Op::Slice(a, _, _)
            | Op::Flip(a, _) => vec![*a],
            Op::Concat(ps, _) => ps.clone(),
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.array().clone(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.array().clone(), Op::Leaf, false)
    }

    pub(crate) fn constant_array(&self, a: ArrayD<f64>) -> Var {
        self.push(a, Op::Leaf, false)
    }

    pub(crate) fn param_array(&self, a: ArrayD<f64>) -> Var {
        self.push(a, Op::Leaf, true)
    }

    pub fn scalar_constant(&self, v: f64) -> Var {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_array_unchecked(self.nodes.borrow()[self.idx(v)].value.clone())
    }

    /// Borrowed view of a node's forward value.
    pub fn array(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        let i = self.idx(v);
        Ref::map(self.nodes.borrow(), |n| &n[i].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.array(v);
        assert_eq!(a.len(), 1, "scalar() on shape {:?}", a.shape());
        *a.iter().next().expect("one element")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.array(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[self.idx(v)].requires_grad
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            if broadcast_shape(va.shape(), vb.shape()).is_none() {
                return Err(Error::contract(format!(
                    "{name}: shapes {:?} and {:?} do not broadcast",
                    va.shape(),
                    vb.shape()
                )));
            }
            f(va, vb)
        };
        self.push_checked(value, op(ia, ib), name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(&self, a: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.array(a).mapv(f);
        self.push_checked(value, op, name)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, "neg", |x| -x, Op::Neg(self.idx(a)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |x| c * x, Op::Scale(self.idx(a), c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(self.idx(a)))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(self.idx(a)))
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary(a, "ln", f64::ln, Op::Ln(self.idx(a)))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt(self.idx(a)))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(self.idx(a)))
    }

    /// Elementwise absolute value; subgradient 0 at the kink.
    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, "abs", f64::abs, Op::Abs(self.idx(a)))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(self.idx(a)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", gelu, Op::Gelu(self.idx(a)))
    }

    /// `sign(x) * max(|x| - lambda, 0)`.
    pub fn soft_threshold(&self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::contract(format!("soft_threshold: lambda {lambda} < 0")));
        }
        self.unary(
            a,
            "soft_threshold",
            |x| soft_threshold(x, lambda),
            Op::SoftThreshold(self.idx(a), lambda),
        )
    }

    // ---- reductions and reshaping -----------------------------------------

    /// Sum of all entries, shape `[]`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.array(a).sum();
        self.push_checked(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(self.idx(a)), "sum")
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let v = self.array(a);
            if axis >= v.ndim() {
                return Err(Error::contract(format!("sum_axis: axis {axis} of {:?}", v.shape())));
            }
            v.sum_axis(Axis(axis)).insert_axis(Axis(axis))
        };
        self.push_checked(value, Op::SumAxis(self.idx(a)), "sum_axis")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.array(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let v = self.array(a);
            if shape.iter().product::<usize>() != v.len() {
                return Err(Error::contract(format!(
                    "reshape {:?} -> {shape:?}",
                    v.shape()
                )));
            }
            v.to_shape(IxDyn(shape))
                .expect("element count checked")
                .into_owned()
        };
        self.push_checked(value, Op::Reshape(self.idx(a)), "reshape")
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = {
            let v = self.array(a);
            let mut seen = vec![false; v.ndim()];
            if axes.len() != v.ndim() || axes.iter().any(|&x| x >= v.ndim() || std::mem::replace(&mut seen[x], true)) {
                return Err(Error::contract(format!("permute {axes:?} of {:?}", v.shape())));
            }
            v.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned()
        };
        self.push_checked(value, Op::Permute(self.idx(a), axes.to_vec()), "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let nd = self.array(a).ndim();
        if nd < 2 {
            return Err(Error::contract("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = {
            let v = self.array(a);
            if axis >= v.ndim() || start > end || end > v.shape()[axis] {
                return Err(Error::contract(format!(
                    "slice axis {axis} {start}..{end} of {:?}",
                    v.shape()
                )));
            }
            v.slice_axis(Axis(axis), Slice::from(start..end)).to_owned()
        };
        self.push_checked(value, Op::Slice(self.idx(a), axis, start), "slice")
    }

    pub fn flip(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let v = self.array(a);
            if axis >= v.ndim() {
                return Err(Error::contract(format!("flip axis {axis} of {:?}", v.shape())));
            }
            let mut view = v.view();
            view.invert_axis(Axis(axis));
            view.to_owned()
        };
        self.push_checked(value, Op::Flip(self.idx(a), axis), "flip")
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
            concatenate(Axis(axis), &views)
                .map_err(|e| Error::contract(format!("concat: {e}")))?
        };
        self.push_checked(value, Op::Concat(ids, axis), "concat")
    }

    // ---- structured ops ----------------------------------------------------

    /// Matrix product over the last two axes; a rank-2 operand is shared across
    /// the batch axis of a rank-3 operand.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            matmul_shapes(va.shape(), vb.shape())?;
            matmul_forward(va, vb)
        };
        self.push_checked(value, Op::MatMul(ia, ib), "matmul")
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let v = self.array(a);
            if v.ndim() == 0 {
                return Err(Error::contract("softmax of a scalar"));
            }
            softmax_last(&v)
        };
        self.push_checked(value, Op::Softmax(self.idx(a)), "softmax")
    }

    /// `X = A⁻¹ B` for symmetric positive definite `A`, batched over a
    /// leading axis when both operands are rank 3.
    pub fn sym_solve(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (value, factors) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let ok = match (va.ndim(), vb.ndim()) {
                (2, 2) => va.shape()[0] == va.shape()[1] && vb.shape()[0] == va.shape()[0],
                (3, 3) => {
                    va.shape()[0] == vb.shape()[0]
                        && va.shape()[1] == va.shape()[2]
                        && vb.shape()[1] == va.shape()[1]
                }
                _ => false,
            };
            if !ok {
                return Err(Error::contract(format!(
                    "sym_solve shapes {:?} and {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
            if va.ndim() == 2 {
                let l = linalg::cholesky(as2(va))?;
                let x = linalg::cholesky_solve(&l, as2(vb));
                (x.into_dyn(), vec![l])
            } else {
                let mut factors = Vec::with_capacity(va.shape()[0]);
                let mut xs = Vec::with_capacity(va.shape()[0]);
                for i in 0..va.shape()[0] {
                    let l = linalg::cholesky(batch2(va, i))?;
                    xs.push(linalg::cholesky_solve(&l, batch2(vb, i)));
                    factors.push(l);
                }
                (stack_batches(xs), factors)
            }
        };
        self.push_checked(value, Op::SymSolve(ia, ib, factors), "sym_solve")
    }

    /// Causal convolution along the last axis (FFT based); see
    /// [`fft_convolve_causal`](super::fft_convolve_causal).
    pub fn causal_conv(&self, u: Var, kernel: Var) -> Result<Var> {
        let (iu, ik) = (self.idx(u), self.idx(kernel));
        let value = {
            let nodes = self.nodes.borrow();
            fft::causal_conv_forward(&nodes[iu].value, &nodes[ik].value)?
        };
        self.push_checked(value, Op::CausalConv(iu, ik), "causal_conv")
    }

    /// `[T, N] -> [T - len + 1, N, len]` with `out[w, i, j] = x[w + j, i]`.
    pub fn sliding_windows(&self, x: Var, len: usize) -> Result<Var> {
        let value = {
            let v = self.array(x);
            if v.ndim() != 2 || len == 0 || len > v.shape()[0] {
                return Err(Error::contract(format!(
                    "sliding_windows of length {len} over {:?}",
                    v.shape()
                )));
            }
            let (t, n) = (v.shape()[0], v.shape()[1]);
            let w = t - len + 1;
            let mut out = ArrayD::zeros(IxDyn(&[w, n, len]));
            for s in 0..w {
                for i in 0..n {
                    for j in 0..len {
                        out[[s, i, j]] = v[[s + j, i]];
                    }
                }
            }
            out
        };
        self.push_checked(value, Op::SlidingWindows(self.idx(x), len), "sliding_windows")
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of a scalar `output` with respect to each leaf in `params`.
    ///
    /// Parameters the output does not depend on receive zeros.
    pub fn grad(&self, output: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let out = self.idx(output);
        let nodes = self.nodes.borrow();
        if nodes[out].value.ndim() != 0 {
            return Err(Error::contract(format!(
                "grad needs a scalar output, got shape {:?}",
                nodes[out].value.shape()
            )));
        }
        for &p in params {
            let node = &nodes[self.idx(p)];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                return Err(Error::contract("grad parameters must be differentiable leaves"));
            }
        }

        let mut adj: Vec<Option<ArrayD<f64>>> = (0..=out).map(|_| None).collect();
        adj[out] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for i in (0..=out).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            for (p, contrib) in self.backward_node(&nodes, i, &g) {
                if !nodes[p].requires_grad {
                    continue;
                }
                adj[p] = Some(match adj[p].take() {
                    Some(acc) => acc + contrib,
                    None => contrib,
                });
            }
        }

        params
            .iter()
            .map(|&p| {
                let i = self.idx(p);
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| ArrayD::zeros(nodes[i].value.raw_dim()));
                let g = std_owned(g);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("gradient".into()));
                }
                Ok(Tensor::from_array_unchecked(g))
            })
            .collect()
    }

    fn backward_node(&self, nodes: &[Node], i: usize, g: &ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)> {
        let val = |j: usize| &nodes[j].value;
        let out = &nodes[i].value;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g.clone(), val(*a).shape())),
                (*b, reduce_to(g.clone(), val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g.clone(), val(*a).shape())),
                (*b, reduce_to(-g, val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let mut r = Vec::new();
                if wants(*a) {
                    r.push((*a, reduce_to(g * val(*b), val(*a).shape())));
                }
                if wants(*b) {
                    r.push((*b, reduce_to(g * val(*a), val(*b).shape())));
                }
                r
            }
            Op::Div(a, b) => {
                let mut r = Vec::new();
                if wants(*a) {
                    r.push((*a, reduce_to(g / val(*b), val(*a).shape())));
                }
                if wants(*b) {
                    let gb = -(g * out) / val(*b);
                    r.push((*b, reduce_to(gb, val(*b).shape())));
                }
                r
            }
            Op::Neg(a) => vec![(*a, -g)],
            Op::Scale(a, c) => vec![(*a, g * *c)],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Exp(a) => vec![(*a, g * out)],
            Op::Ln(a) => vec![(*a, g / val(*a))],
            Op::Sqrt(a) => vec![(*a, g * &out.mapv(|y| 0.5 / y))],
            Op::Square(a) => vec![(*a, g * &val(*a).mapv(|x| 2.0 * x))],
            Op::Abs(a) => vec![(*a, g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }))],
            Op::Relu(a) => vec![(*a, g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))],
            Op::Gelu(a) => vec![(*a, g * &val(*a).mapv(gelu_grad))],
            Op::SoftThreshold(a, lambda) => {
                let l = *lambda;
                vec![(*a, g * &val(*a).mapv(|x| if x.abs() > l { 1.0 } else { 0.0 }))]
            }
            Op::Sum(a) => {
                let s = *g.iter().next().expect("scalar adjoint");
                vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), s))]
            }
            Op::SumAxis(a) => vec![(
                *a,
                g.broadcast(val(*a).raw_dim())
                    .expect("keepdims broadcast")
                    .to_owned(),
            )],
            Op::Reshape(a) => vec![(
                *a,
                std_owned(g.clone())
                    .into_shape_with_order(val(*a).raw_dim())
                    .expect("same element count"),
            )],
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                vec![(*a, g.view().permuted_axes(IxDyn(&inv)).to_owned())]
            }
            Op::MatMul(a, b) => {
                let (da, db) = matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Softmax(a) => {
                let last = Axis(out.ndim() - 1);
                let dot = (g * out).sum_axis(last).insert_axis(last);
                vec![(*a, out * &(g - &dot))]
            }
            Op::SymSolve(a, b, factors) => {
                let x = out;
                if x.ndim() == 2 {
                    let db = linalg::cholesky_solve(&factors[0], as2(g));
                    let da = -db.dot(&as2(x).t());
                    vec![(*a, da.into_dyn()), (*b, db.into_dyn())]
                } else {
                    let mut dbs = Vec::with_capacity(factors.len());
                    let mut das = Vec::with_capacity(factors.len());
                    for (k, l) in factors.iter().enumerate() {
                        let db = linalg::cholesky_solve(l, batch2(g, k));
                        das.push(-db.dot(&batch2(x, k).t()));
                        dbs.push(db);
                    }
                    vec![(*a, stack_batches(das)), (*b, stack_batches(dbs))]
                }
            }
            Op::CausalConv(u, k) => {
                let (du, dk) = fft::causal_conv_backward(val(*u), val(*k), g);
                vec![(*u, du), (*k, dk)]
            }
            Op::SlidingWindows(x, len) => {
                let mut dx = ArrayD::zeros(val(*x).raw_dim());
                let (w, n) = (g.shape()[0], g.shape()[1]);
                for s in 0..w {
                    for a in 0..n {
                        for j in 0..*len {
                            dx[[s + j, a]] += g[[s, a, j]];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Slice(a, axis, start) => {
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                let end = start + g.shape()[*axis];
                da.slice_axis_mut(Axis(*axis), Slice::from(*start..end))
                    .assign(g);
                vec![(*a, da)]
            }
            Op::Flip(a, axis) => {
                let mut view = g.view();
                view.invert_axis(Axis(*axis));
                vec![(*a, view.to_owned())]
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        offset += len;
                        (p, piece)
                    })
                    .collect()
            }
        }
    }
}
