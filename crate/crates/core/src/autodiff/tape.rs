//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. [`Var`] is a
//! cheap handle into the tape; operations on it append a node holding the
//! forward value, the operation and its parents. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients additively across fan-out.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use smallvec::{smallvec, SmallVec};

use super::tensor::{pairwise_sum, Shape, Tensor};
use crate::error::{Error, Result};

/// User-supplied operation with a hand-written backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient of the loss with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Abs,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
    Sin,
    Cos,
    Exp,
    Square,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Abs => x.abs(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    /// Derivative at input `x` with output `y`. Kinks take subgradient 0
    /// (abs, relu) or the left slope (leaky relu).
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Unary(Unary),
    Binary(Binary),
    Sum,
    Mean,
    Max,
    MatMul,
    Reshape,
    BroadcastTo,
    UpsampleNearest(usize),
    BilinearSample,
    Concat(usize),
    Narrow { axis: usize, start: usize },
    Custom(Arc<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(c) => write!(f, "Custom({})", c.name()),
            Op::Leaf => write!(f, "Leaf"),
            Op::Unary(u) => write!(f, "{u:?}"),
            Op::Binary(b) => write!(f, "{b:?}"),
            Op::Sum => write!(f, "Sum"),
            Op::Mean => write!(f, "Mean"),
            Op::Max => write!(f, "Max"),
            Op::MatMul => write!(f, "MatMul"),
            Op::Reshape => write!(f, "Reshape"),
            Op::BroadcastTo => write!(f, "BroadcastTo"),
            Op::UpsampleNearest(k) => write!(f, "UpsampleNearest({k})"),
            Op::BilinearSample => write!(f, "BilinearSample"),
            Op::Concat(a) => write!(f, "Concat({a})"),
            Op::Narrow { axis, start } => write!(f, "Narrow({axis}, {start})"),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    parents: SmallVec<[usize; 2]>,
    requires_grad: bool,
    /// Target shape for shape-only ops, needed again on replay.
    out_shape: Shape,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients from one backward pass, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when no path reaches the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf excluded from gradient propagation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let out_shape = Shape::from_slice(value.shape());
        self.push(Node {
            value,
            op: Op::Leaf,
            parents: SmallVec::new(),
            requires_grad,
            out_shape,
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op: Op, parents: &[usize], out_shape: Shape) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let inputs: SmallVec<[&Tensor; 4]> = parents.iter().map(|&p| &nodes[p].value).collect();
            let value = forward(&op, &inputs, &out_shape)?;
            (value, parents.iter().any(|&p| nodes[p].requires_grad))
        };
        Ok(self.push(Node {
            value,
            op,
            parents: SmallVec::from_slice(parents),
            requires_grad,
            out_shape,
        }))
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(shape_err("backward", root.value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::filled(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].as_ref() else { continue };
            let inputs: SmallVec<[&Tensor; 4]> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward_rule(&node.op, &inputs, &node.value, g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| Shape::from_slice(n.value.shape())).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Recomputes every node from the recorded operations and leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let inputs: SmallVec<[&Tensor; 4]> = node.parents.iter().map(|&p| &out[p]).collect();
                    forward(&node.op, &inputs, &node.out_shape)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Snapshot of all recorded values, in recording order.
    pub fn values(&self) -> Vec<Tensor> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }

    pub fn custom<'t>(&'t self, op: Arc<dyn CustomOp>, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let shape = {
            let nodes = self.nodes.borrow();
            let ins: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Shape::from_slice(op.forward(&ins)?.shape())
        };
        self.record(Op::Custom(op), &ids, shape)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut out: Shape = Shape::from_slice(&base);
        out[axis] = 0;
        for v in vars {
            let s = v.shape();
            let compatible = s.len() == base.len() && s.iter().zip(base.iter()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, &s));
            }
            out[axis] += s[axis];
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        self.record(Op::Concat(axis), &ids, out)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Shape {
        Shape::from_slice(self.tape.nodes.borrow()[self.id].value.shape())
    }

    /// Scalar value.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn unary(self, u: Unary) -> Var<'t> {
        let shape = self.shape();
        self.tape
            .record(Op::Unary(u), &[self.id], shape)
            .expect("elementwise op cannot fail")
    }

    fn binary(self, rhs: Var<'t>, b: Binary, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (l, r) = (self.shape(), rhs.shape());
        if l != r {
            return Err(shape_err(name, &l, &r));
        }
        self.tape.record(Op::Binary(b), &[self.id, rhs.id], l)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul, "mul")
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Div, "div")
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Unary::Offset(c))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    /// Sum of all elements (pairwise tree order).
    pub fn sum(self) -> Var<'t> {
        self.tape.record(Op::Sum, &[self.id], Shape::new()).expect("reduction cannot fail")
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.record(Op::Mean, &[self.id], Shape::new()).expect("reduction cannot fail")
    }

    /// Maximum element; the gradient flows to the first maximiser only.
    pub fn max(self) -> Result<Var<'t>> {
        if self.with_value(|t| t.is_empty()) {
            return Err(Error::invalid("max", "empty tensor"));
        }
        self.tape.record(Op::Max, &[self.id], Shape::new())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err("matmul", &a, &b));
        }
        self.tape.record(Op::MatMul, &[self.id, rhs.id], smallvec![a[0], b[1]])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.iter().product::<usize>() != shape.iter().product::<usize>() || shape.len() > super::tensor::MAX_RANK {
            return Err(shape_err("reshape", &s, shape));
        }
        self.tape.record(Op::Reshape, &[self.id], Shape::from_slice(shape))
    }

    /// Numpy-style broadcast: trailing dimensions align, size-1 or missing
    /// dimensions expand.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if !broadcastable(&s, shape) {
            return Err(shape_err("broadcast_to", &s, shape));
        }
        self.tape.record(Op::BroadcastTo, &[self.id], Shape::from_slice(shape))
    }

    /// Nearest-neighbour upsampling of the two axes preceding the channel
    /// axis: `[.., H, W, C] -> [.., H*f, W*f, C]`.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() < 3 || factor == 0 {
            return Err(Error::invalid(
                "upsample_nearest",
                format!("need rank >= 3 and factor >= 1, got shape {:?} factor {factor}", s.as_slice()),
            ));
        }
        let mut out = s.clone();
        let r = s.len();
        out[r - 3] *= factor;
        out[r - 2] *= factor;
        self.tape.record(Op::UpsampleNearest(factor), &[self.id], out)
    }

    /// Bilinear lookup of `self` (`[H, W, C]`, `H, W >= 2`) at continuous
    /// pixel coordinates `coords` (`[H', W', 2]`, `(x, y)` order). Coordinates
    /// are clamped to the border; the clamp passes zero gradient.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&coords);
        let (g, c) = (self.shape(), coords.shape());
        if g.len() != 3 || g[0] < 2 || g[1] < 2 || c.len() != 3 || c[2] != 2 {
            return Err(shape_err("bilinear_sample", &g, &c));
        }
        self.tape.record(Op::BilinearSample, &[self.id, coords.id], smallvec![c[0], c[1], g[2]])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of shape {:?}", start + len, s.as_slice()),
            ));
        }
        let mut out = s.clone();
        out[axis] = len;
        self.tape.record(Op::Narrow { axis, start }, &[self.id], out)
    }
}

fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter().enumerate().all(|(i, &d)| d == 1 || d == to[i + off])
}

/// Splits `shape` around `axis` into (outer, axis, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward(op: &Op, inputs: &[&Tensor], out_shape: &[usize]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves are not recomputed"),
        Op::Unary(u) => inputs[0].map(|x| u.apply(x)),
        Op::Binary(b) => {
            let f = match b {
                Binary::Add => |a: f64, b: f64| a + b,
                Binary::Sub => |a: f64, b: f64| a - b,
                Binary::Mul => |a: f64, b: f64| a * b,
                Binary::Div => |a: f64, b: f64| a / b,
            };
            inputs[0].zip_map(inputs[1], f)
        }
        Op::Sum => Tensor::scalar(pairwise_sum(inputs[0].data())),
        Op::Mean => Tensor::scalar(pairwise_sum(inputs[0].data()) / inputs[0].len() as f64),
        Op::Max => Tensor::scalar(inputs[0].data().iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut c, m, k, n);
            Tensor::new(&[m, n], c)?
        }
        Op::Reshape => inputs[0].clone().reshaped(out_shape)?,
        Op::BroadcastTo => broadcast_forward(inputs[0], out_shape),
        Op::UpsampleNearest(f) => upsample_forward(inputs[0], *f, out_shape),
        Op::BilinearSample => bilinear_forward(inputs[0], inputs[1]),
        Op::Concat(axis) => {
            let mut data = Vec::with_capacity(out_shape.iter().product());
            let (outer, _, inner) = split_axis(out_shape, *axis);
            for o in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(out_shape, data)?
        }
        Op::Narrow { axis, start } => {
            let (outer, n_in, inner) = split_axis(inputs[0].shape(), *axis);
            let len = out_shape[*axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n_in + start) * inner;
                data.extend_from_slice(&inputs[0].data()[base..base + len * inner]);
            }
            Tensor::new(out_shape, data)?
        }
        Op::Custom(c) => c.forward(inputs)?,
    };
    Ok(out)
}

fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn broadcast_index(out_idx: usize, out_shape: &[usize], in_shape: &[usize]) -> usize {
    let off = out_shape.len() - in_shape.len();
    let mut rem = out_idx;
    let mut in_idx = 0;
    let mut in_stride = 1;
    for d in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        if d >= off {
            let id = in_shape[d - off];
            if id != 1 {
                in_idx += coord * in_stride;
            }
            in_stride *= id;
        }
    }
    in_idx
}

fn broadcast_forward(x: &Tensor, out_shape: &[usize]) -> Tensor {
    let n: usize = out_shape.iter().product();
    let data = (0..n).map(|i| x.data()[broadcast_index(i, out_shape, x.shape())]).collect();
    Tensor::new(out_shape, data).expect("shape computed")
}

fn upsample_forward(x: &Tensor, f: usize, out_shape: &[usize]) -> Tensor {
    let s = x.shape();
    let r = s.len();
    let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
    let outer: usize = s[..r - 3].iter().product();
    let (oh, ow) = (h * f, w * f);
    let mut data = vec![0.0; outer * oh * ow * c];
    for o in 0..outer {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((o * h + y / f) * w + xx / f) * c;
                let dst = ((o * oh + y) * ow + xx) * c;
                data[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    Tensor::new(out_shape, data).expect("shape computed")
}

/// Corner indices and weights for a bilinear lookup; shared with the plain
/// (non-tape) sampler so both paths agree bitwise.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub x0: usize,
    pub y0: usize,
    pub ax: f64,
    pub ay: f64,
    /// Whether x / y were inside the clamp range (clamped axes have zero slope).
    pub free_x: bool,
    pub free_y: bool,
}

#[inline]
pub(crate) fn bilinear_tap(x: f64, y: f64, w: usize, h: usize) -> BilinearTap {
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let free_x = (0.0..=wm).contains(&x);
    let free_y = (0.0..=hm).contains(&y);
    let xc = if x.is_nan() { 0.0 } else { x.clamp(0.0, wm) };
    let yc = if y.is_nan() { 0.0 } else { y.clamp(0.0, hm) };
    let x0 = (xc.floor() as usize).min(w - 2);
    let y0 = (yc.floor() as usize).min(h - 2);
    BilinearTap {
        x0,
        y0,
        ax: xc - x0 as f64,
        ay: yc - y0 as f64,
        free_x,
        free_y,
    }
}

fn bilinear_forward(grid: &Tensor, coords: &Tensor) -> Tensor {
    let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let (oh, ow) = (coords.shape()[0], coords.shape()[1]);
    let g = grid.data();
    let mut data = vec![0.0; oh * ow * c];
    for (i, xy) in coords.data().chunks_exact(2).enumerate() {
        let tap = bilinear_tap(xy[0], xy[1], w, h);
        let (w00, w01, w10, w11) = (
            (1.0 - tap.ax) * (1.0 - tap.ay),
            tap.ax * (1.0 - tap.ay),
            (1.0 - tap.ax) * tap.ay,
            tap.ax * tap.ay,
        );
        let i00 = (tap.y0 * w + tap.x0) * c;
        let i10 = i00 + w * c;
        for ch in 0..c {
            data[i * c + ch] = w00 * g[i00 + ch] + w01 * g[i00 + c + ch] + w10 * g[i10 + ch] + w11 * g[i10 + c + ch];
        }
    }
    Tensor::new(&[oh, ow, c], data).expect("shape computed")
}

fn backward_rule(op: &Op, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> SmallVec<[Tensor; 2]> {
    match op {
        Op::Leaf => SmallVec::new(),
        Op::Unary(u) => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(output.data())
                .zip(grad.data())
                .map(|((&xv, &yv), &g)| g * u.derivative(xv, yv))
                .collect();
            smallvec![Tensor::new(x.shape(), data).expect("same shape")]
        }
        Op::Binary(b) => {
            let (a, bb) = (inputs[0], inputs[1]);
            match b {
                Binary::Add => smallvec![grad.clone(), grad.clone()],
                Binary::Sub => smallvec![grad.clone(), grad.map(|g| -g)],
                Binary::Mul => smallvec![grad.zip_map(bb, |g, y| g * y), grad.zip_map(a, |g, x| g * x)],
                Binary::Div => {
                    let ga = grad.zip_map(bb, |g, y| g / y);
                    let q = a.zip_map(bb, |x, y| -x / (y * y));
                    smallvec![ga, grad.zip_map(&q, |g, d| g * d)]
                }
            }
        }
        Op::Sum => smallvec![Tensor::filled(inputs[0].shape(), grad.item())],
        Op::Mean => smallvec![Tensor::filled(inputs[0].shape(), grad.item() / inputs[0].len() as f64)],
        Op::Max => {
            let x = inputs[0];
            let m = output.item();
            let mut g = Tensor::zeros(x.shape());
            if let Some(i) = x.data().iter().position(|&v| v == m) {
                g.data_mut()[i] = grad.item();
            }
            smallvec![g]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd, gd) = (a.data(), b.data(), grad.data());
            // dA = G Bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let brow = &bd[p * n..(p + 1) * n];
                    let grow = &gd[i * n..(i + 1) * n];
                    da[i * k + p] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                }
            }
            // dB = Aᵀ G
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (dv, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *dv += av * gv;
                    }
                }
            }
            smallvec![
                Tensor::new(&[m, k], da).expect("shape"),
                Tensor::new(&[k, n], db).expect("shape")
            ]
        }
        Op::Reshape => smallvec![grad.clone().reshaped(inputs[0].shape()).expect("same numel")],
        Op::BroadcastTo => {
            let x = inputs[0];
            let mut g = Tensor::zeros(x.shape());
            for (i, &gv) in grad.data().iter().enumerate() {
                g.data_mut()[broadcast_index(i, grad.shape(), x.shape())] += gv;
            }
            smallvec![g]
        }
        Op::UpsampleNearest(f) => {
            let s = inputs[0].shape();
            let r = s.len();
            let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
            let outer: usize = s[..r - 3].iter().product();
            let (oh, ow) = (h * f, w * f);
            let mut g = Tensor::zeros(s);
            let gd = grad.data();
            let out = g.data_mut();
            for o in 0..outer {
                for y in 0..oh {
                    for x in 0..ow {
                        let src = ((o * oh + y) * ow + x) * c;
                        let dst = ((o * h + y / f) * w + x / f) * c;
                        for ch in 0..c {
                            out[dst + ch] += gd[src + ch];
                        }
                    }
                }
            }
            smallvec![g]
        }
        Op::BilinearSample => {
            let (grid, coords) = (inputs[0], inputs[1]);
            let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
            let gdata = grid.data();
            let mut dgrid = Tensor::zeros(grid.shape());
            let mut dcoords = Tensor::zeros(coords.shape());
            {
                let dg = dgrid.data_mut();
                let dc = dcoords.data_mut();
                for (i, xy) in coords.data().chunks_exact(2).enumerate() {
                    let tap = bilinear_tap(xy[0], xy[1], w, h);
                    let (ax, ay) = (tap.ax, tap.ay);
                    let i00 = (tap.y0 * w + tap.x0) * c;
                    let i01 = i00 + c;
                    let i10 = i00 + w * c;
                    let i11 = i10 + c;
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for ch in 0..c {
                        let go = grad.data()[i * c + ch];
                        dg[i00 + ch] += go * (1.0 - ax) * (1.0 - ay);
                        dg[i01 + ch] += go * ax * (1.0 - ay);
                        dg[i10 + ch] += go * (1.0 - ax) * ay;
                        dg[i11 + ch] += go * ax * ay;
                        let (v00, v01, v10, v11) = (gdata[i00 + ch], gdata[i01 + ch], gdata[i10 + ch], gdata[i11 + ch]);
                        gx += go * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
                        gy += go * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01));
                    }
                    dc[2 * i] = if tap.free_x { gx } else { 0.0 };
                    dc[2 * i + 1] = if tap.free_y { gy } else { 0.0 };
                }
            }
            smallvec![dgrid, dcoords]
        }
        Op::Concat(axis) => {
            let (outer, n_out, inner) = split_axis(grad.shape(), *axis);
            let mut offset = 0;
            let mut out = SmallVec::new();
            for t in inputs {
                let n = t.shape()[*axis];
                let mut data = Vec::with_capacity(t.len());
                for o in 0..outer {
                    let base = (o * n_out + offset) * inner;
                    data.extend_from_slice(&grad.data()[base..base + n * inner]);
                }
                out.push(Tensor::new(t.shape(), data).expect("shape"));
                offset += n;
            }
            out
        }
        Op::Narrow { axis, start } => {
            let x = inputs[0];
            let (outer, n_in, inner) = split_axis(x.shape(), *axis);
            let len = grad.shape()[*axis];
            let mut g = Tensor::zeros(x.shape());
            for o in 0..outer {
                let base = (o * n_in + start) * inner;
                g.data_mut()[base..base + len * inner].copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
            }
            smallvec![g]
        }
        Op::Custom(c) => c.backward(inputs, output, grad).into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let tape = Tape::new();
        let xs = [0.3, -1.2, 2.5, 0.0, 7.25];
        let x = tape.input(t(&[5], &xs));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        for (gv, xv) in g.wrt(x).data().iter().zip(xs) {
            assert!((gv - 2.0 * xv).abs() <= 1e-12);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = x.add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 2.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[3, 2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        assert!(a.matmul(a).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.input(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = a.mul(c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(a).item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn broadcast_backward_sums() {
        let tape = Tape::new();
        let b = tape.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = b.broadcast_to(&[4, 3]).unwrap();
        assert_eq!(y.value().data()[9..], [1.0, 2.0, 3.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(b).data(), &[4.0, 4.0, 4.0]);
        assert!(b.broadcast_to(&[4, 2]).is_err());
    }

    #[test]
    fn upsample_nearest_repeats_blocks() {
        let tape = Tape::new();
        let x = tape.input(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.shape().as_slice(), &[4, 4, 1]);
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0; 4]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::new();
        let a = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.narrow(1, 2, 1).unwrap();
        assert_eq!(back.value(), b.value());
        let g = tape.backward(back.sum()).unwrap();
        assert_eq!(g.wrt(b).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(a).data(), &[0.0; 4]);
        assert!(tape.concat(&[a, tape.input(Tensor::zeros(&[3, 1]))], 1).is_err());
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let tape = Tape::new();
        let x = tape.input(t(&[4], &[1.0, 5.0, 5.0, -2.0]));
        let m = x.max().unwrap();
        assert_eq!(m.item(), 5.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t(&[2, 1], &[1.0, -1.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), &[-1.0, -1.0]);
        let g = tape.backward(c.sum()).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(g.wrt(b).data(), &[4.0, 6.0]);
    }

    #[test]
    fn bilinear_lattice_and_cell_centre() {
        let tape = Tape::new();
        let grid = tape.input(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let coords = tape.constant(t(&[1, 3, 2], &[0.0, 0.0, 1.0, 1.0, 0.5, 0.5]));
        let s = grid.bilinear_sample(coords).unwrap();
        assert_eq!(s.value().data(), &[1.0, 4.0, 2.5]);
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[0.1, -0.7, 1.3, 2.2, -0.4, 0.9]));
        let w = tape.input(t(&[3, 2], &[0.5, -0.3, 0.8, 0.1, -1.1, 0.6]));
        let h = x.matmul(w).unwrap().sigmoid().softplus().sin();
        let _ = h.mean();
        let replayed = tape.replay().unwrap();
        assert_eq!(replayed, tape.values());
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
