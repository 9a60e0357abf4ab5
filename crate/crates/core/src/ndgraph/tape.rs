use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels;
use super::{GraphError, Tensor};

type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    ExpandScalar(usize),
    SumAxis(usize, usize),
    ExpandAxis(usize, usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { src: usize, axis: usize, start: usize },
    SliceAdjoint { src: usize, axis: usize, start: usize },
    GatherRows { src: usize, idx: Rc<[usize]> },
    ScatterRows { src: usize, idx: Rc<[usize]> },
    GatherFlat { src: usize, idx: Rc<[usize]> },
    ScatterFlat { src: usize, idx: Rc<[usize]> },
    Unfold { src: usize, kernel: usize, pad: usize },
    Fold { src: usize, kernel: usize, pad: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Transpose(a) | Affine(a, _) | Sigmoid(a) | Tanh(a) | Relu(a) | Exp(a) | Log(a)
            | Softplus(a) | Square(a) | Softmax(a) | LogSoftmax(a) | Sum(a) | ExpandScalar(a)
            | SumAxis(a, _) | ExpandAxis(a, _) | Reshape(a) => vec![*a],
            Concat(parts, _) => parts.clone(),
            Slice { src, .. }
            | SliceAdjoint { src, .. }
            | GatherRows { src, .. }
            | ScatterRows { src, .. }
            | GatherFlat { src, .. }
            | ScatterFlat { src, .. }
            | Unfold { src, .. }
            | Fold { src, .. } => vec![*src],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded. Backward rules are themselves written with
/// tape operations, so gradients computed with `create_graph` can be
/// differentiated again.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), no_grad: Cell::new(false), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grad-tracked leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: name });
        }
        let requires_grad = !self.no_grad.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(GraphError::InvalidShape { op: "concat", detail: "no inputs".into() });
        }
        for p in parts {
            p.check_tape(self)?;
        }
        let value = {
            let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
            let first = values[0].shape();
            if axis >= first.len() {
                return Err(GraphError::InvalidShape {
                    op: "concat",
                    detail: format!("axis {} out of range for shape {:?}", axis, first),
                });
            }
            for v in &values[1..] {
                let s = v.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(GraphError::ShapeMismatch { op: "concat", lhs: first.to_vec(), rhs: s.to_vec() });
                }
            }
            let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
            kernels::concat(&refs, axis)
        };
        self.push("concat", value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// Stride-1 convolution over the sequence axis.
    ///
    /// `input` is `[B, L, C_in]`, `kernel` is `[k, C_in, C_out]`, `bias` is
    /// `[C_out]`. Zero padding of `pad` on both ends; `pad = (k-1)/2` keeps length.
    pub fn conv1d<'t>(&'t self, input: Var<'t>, kernel: Var<'t>, bias: Var<'t>, pad: usize) -> Result<Var<'t>> {
        let xs = input.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 3 || ks[1] != xs[2] {
            return Err(GraphError::ShapeMismatch { op: "conv1d", lhs: xs, rhs: ks });
        }
        let (b, l) = (xs[0], xs[1]);
        let (k, c_in, c_out) = (ks[0], ks[1], ks[2]);
        if l + 2 * pad < k {
            return Err(GraphError::InvalidShape {
                op: "conv1d",
                detail: format!("kernel {} longer than padded sequence {}", k, l + 2 * pad),
            });
        }
        let l_out = l + 2 * pad + 1 - k;
        let cols = input.unfold(k, pad)?.reshape(&[b * l_out, k * c_in])?;
        let out = cols.matmul(kernel.reshape(&[k * c_in, c_out])?)?;
        out.add_row(bias)?.reshape(&[b, l_out, c_out])
    }

    /// Max over the sequence axis of `[B, L, C]`, giving `[B, C]`.
    pub fn max_pool_seq<'t>(&'t self, input: Var<'t>) -> Result<Var<'t>> {
        let s = input.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(GraphError::InvalidShape { op: "max_pool_seq", detail: format!("shape {:?}", s) });
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let idx: Vec<usize> = {
            let v = self.value(input.id);
            let d = v.data();
            let mut idx = Vec::with_capacity(b * c);
            for bi in 0..b {
                for ci in 0..c {
                    let mut best = bi * l * c + ci;
                    for t in 1..l {
                        let at = (bi * l + t) * c + ci;
                        if d[at] > d[best] {
                            best = at;
                        }
                    }
                    idx.push(best);
                }
            }
            idx
        };
        input.gather_flat(&idx)?.reshape(&[b, c])
    }

    /// `loss` must be a scalar. Returns the gradient of `loss` for every
    /// grad-tracked node. With `retain_graph` the gradients are themselves
    /// recorded on this tape and can be differentiated again; without it the
    /// tape is consumed and a second call fails.
    pub fn backward<'t>(&'t self, loss: Var<'t>, retain_graph: bool) -> Result<Gradients<'t>> {
        loss.check_tape(self)?;
        let grads = self.run_backward(loss.id, None, retain_graph)?;
        if !retain_graph {
            self.consumed.set(true);
        }
        Ok(Gradients { tape: self, grads })
    }

    /// Gradients of `loss` with respect to `wrt` only. Never consumes the tape.
    pub fn grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Result<Vec<Var<'t>>> {
        loss.check_tape(self)?;
        for w in wrt {
            w.check_tape(self)?;
        }
        let ids: Vec<usize> = wrt.iter().map(|w| w.id).collect();
        let grads = self.run_backward(loss.id, Some(&ids), create_graph)?;
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => Ok(self.var(g)),
                None => Ok(self.constant(Tensor::zeros(&w.shape()))),
            })
            .collect()
    }

    fn run_backward(&self, loss: usize, wrt: Option<&[usize]>, create_graph: bool) -> Result<Vec<Option<usize>>> {
        if self.consumed.get() {
            return Err(GraphError::TapeConsumed);
        }
        {
            let v = self.value(loss);
            if v.len() != 1 {
                return Err(GraphError::NonScalarLoss { shape: v.shape().to_vec() });
            }
        }
        let n = loss + 1;
        let ops: Vec<(Op, bool)> = {
            let nodes = self.nodes.borrow();
            nodes[..n].iter().map(|nd| (nd.op.clone(), nd.requires_grad)).collect()
        };
        // Nodes whose gradient matters: tracked, and (when filtered) downstream of a target.
        let mut needed: Vec<bool> = ops.iter().map(|(_, rg)| *rg).collect();
        if let Some(targets) = wrt {
            let mut desc = vec![false; n];
            for &t in targets {
                if t < n {
                    desc[t] = true;
                }
            }
            for i in 0..n {
                if !desc[i] && ops[i].0.inputs().iter().any(|&j| desc[j]) {
                    desc[i] = true;
                }
            }
            for i in 0..n {
                needed[i] &= desc[i];
            }
        }

        let saved_mode = self.no_grad.replace(!create_graph);
        let result = self.propagate(loss, &ops, &needed);
        self.no_grad.set(saved_mode);
        result
    }

    fn propagate(&self, loss: usize, ops: &[(Op, bool)], needed: &[bool]) -> Result<Vec<Option<usize>>> {
        let shape_of = |id: usize| self.value(id).shape().to_vec();
        let mut grads: Vec<Option<usize>> = vec![None; ops.len()];
        let seed_shape = shape_of(loss);
        grads[loss] = Some(self.constant(Tensor::ones(&seed_shape)).id);

        for i in (0..ops.len()).rev() {
            let Some(gid) = grads[i] else { continue };
            if !needed[i] {
                continue;
            }
            let g = self.var(gid);
            let out = self.var(i);
            let v = |id: usize| self.var(id);
            let contributions: Vec<(usize, Var<'_>)> = match &ops[i].0 {
                Op::Leaf => vec![],
                Op::MatMul(a, b) => {
                    let mut res = Vec::with_capacity(2);
                    if needed[*a] {
                        res.push((*a, g.matmul(v(*b).transpose()?)?));
                    }
                    if needed[*b] {
                        res.push((*b, v(*a).transpose()?.matmul(g)?));
                    }
                    res
                }
                Op::Transpose(a) => vec![(*a, g.transpose()?)],
                Op::Add(a, b) => vec![(*a, g), (*b, g)],
                Op::Sub(a, b) => vec![(*a, g), (*b, g.neg()?)],
                Op::Mul(a, b) => {
                    let mut res = Vec::with_capacity(2);
                    if needed[*a] {
                        res.push((*a, g.mul(v(*b))?));
                    }
                    if needed[*b] {
                        res.push((*b, g.mul(v(*a))?));
                    }
                    res
                }
                Op::Div(a, b) => vec![(*a, g.div(v(*b))?), (*b, g.mul(out)?.div(v(*b))?.neg()?)],
                Op::Affine(a, scale) => vec![(*a, g.scale(*scale)?)],
                Op::Sigmoid(a) => vec![(*a, g.mul(out)?.mul(out.affine(-1.0, 1.0)?)?)],
                Op::Tanh(a) => vec![(*a, g.mul(out.square()?.affine(-1.0, 1.0)?)?)],
                Op::Relu(a) => {
                    let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    vec![(*a, g.mul(self.constant(mask))?)]
                }
                Op::Exp(a) => vec![(*a, g.mul(out)?)],
                Op::Log(a) => vec![(*a, g.div(v(*a))?)],
                Op::Softplus(a) => vec![(*a, g.mul(v(*a).sigmoid()?)?)],
                Op::Square(a) => vec![(*a, g.mul(v(*a))?.scale(2.0)?)],
                Op::Softmax(a) => {
                    let last = out.shape().len() - 1;
                    let n = out.shape()[last];
                    let dot = g.mul(out)?.sum_axis(last)?.expand_axis(last, n)?;
                    vec![(*a, out.mul(g.sub(dot)?)?)]
                }
                Op::LogSoftmax(a) => {
                    let last = out.shape().len() - 1;
                    let n = out.shape()[last];
                    let total = g.sum_axis(last)?.expand_axis(last, n)?;
                    vec![(*a, g.sub(out.exp()?.mul(total)?)?)]
                }
                Op::Sum(a) => vec![(*a, g.expand_to(&shape_of(*a))?)],
                Op::ExpandScalar(a) => vec![(*a, g.sum()?.reshape(&shape_of(*a))?)],
                Op::SumAxis(a, axis) => {
                    let n = shape_of(*a)[*axis];
                    vec![(*a, g.expand_axis(*axis, n)?)]
                }
                Op::ExpandAxis(a, axis) => vec![(*a, g.sum_axis(*axis)?)],
                Op::Reshape(a) => vec![(*a, g.reshape(&shape_of(*a))?)],
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    let mut res = Vec::with_capacity(parts.len());
                    for &p in parts {
                        let len = shape_of(p)[*axis];
                        res.push((p, g.slice(*axis, offset, len)?));
                        offset += len;
                    }
                    res
                }
                Op::Slice { src, axis, start } => {
                    let full = shape_of(*src)[*axis];
                    vec![(*src, g.slice_adjoint(*axis, *start, full)?)]
                }
                Op::SliceAdjoint { src, axis, start } => {
                    let len = shape_of(*src)[*axis];
                    vec![(*src, g.slice(*axis, *start, len)?)]
                }
                Op::GatherRows { src, idx } => {
                    let rows = shape_of(*src)[0];
                    vec![(*src, g.scatter_rows_rc(idx.clone(), rows)?)]
                }
                Op::ScatterRows { src, idx } => vec![(*src, g.gather_rows_rc(idx.clone())?)],
                Op::GatherFlat { src, idx } => {
                    let shape = shape_of(*src);
                    vec![(*src, g.scatter_flat_rc(idx.clone(), &shape)?)]
                }
                Op::ScatterFlat { src, idx } => vec![(*src, g.gather_flat_rc(idx.clone())?)],
                Op::Unfold { src, kernel, pad } => {
                    let len = shape_of(*src)[1];
                    vec![(*src, g.fold(*kernel, *pad, len)?)]
                }
                Op::Fold { src, kernel, pad } => vec![(*src, g.unfold(*kernel, *pad)?)],
            };
            for (inp, contrib) in contributions {
                if !needed[inp] {
                    continue;
                }
                grads[inp] = Some(match grads[inp] {
                    Some(prev) => self.var(prev).add(contrib)?.id,
                    None => contrib.id,
                });
            }
        }
        Ok(grads)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<usize>>,
}

impl<'t> Gradients<'t> {
    pub fn get(&self, var: Var<'t>) -> Option<Var<'t>> {
        self.grads.get(var.id).copied().flatten().map(|g| self.tape.var(g))
    }

    /// Gradient value, zeros when `var` does not influence the loss.
    pub fn tensor(&self, var: Var<'t>) -> Tensor {
        match self.get(var) {
            Some(g) => g.value(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

/// Handle to a node on a [`Tape`].
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

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GraphError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if std::ptr::eq(self.tape, tape) {
            Ok(())
        } else {
            Err(GraphError::ForeignVar)
        }
    }

    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(f);
        self.tape.push(name, value, op)
    }

    fn binary(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        other.check_tape(self.tape)?;
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            same_shape(name, &a, &b)?;
            kernels::zip(&a, &b, f)
        };
        self.tape.push(name, value, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        other.check_tape(self.tape)?;
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            let r = sa.len();
            let ok = (r == 2 || r == 3)
                && sb.len() == r
                && sa[r - 1] == sb[r - 2]
                && sa[..r - 2] == sb[..r - 2];
            if !ok {
                return Err(GraphError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
            }
            kernels::matmul(&a, &b)
        };
        self.tape.push("matmul", value, Op::MatMul(self.id, other.id))
    }

    /// Probability-weighted embedding: `[B, V] @ [V, E]`.
    pub fn row_lookup_weighted(&self, table: Var<'t>) -> Result<Var<'t>> {
        self.matmul(table)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.rank() < 2 || a.rank() > 3 {
                return Err(GraphError::InvalidShape {
                    op: "transpose",
                    detail: format!("need rank 2 or 3, got {:?}", a.shape()),
                });
            }
            kernels::transpose(&a)
        };
        self.tape.push("transpose", value, Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        if self.tape.value(other.id).data().iter().any(|&x| x == 0.0) {
            return Err(GraphError::Domain { op: "div", detail: "division by zero".into() });
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t>> {
        self.unary("affine", Op::Affine(self.id, scale), |x| scale * x + shift)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.affine(factor, 0.0)
    }

    pub fn add_scalar(&self, shift: f64) -> Result<Var<'t>> {
        self.affine(1.0, shift)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.affine(-1.0, 0.0)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if self.tape.value(self.id).data().iter().any(|&x| x <= 0.0) {
            return Err(GraphError::Domain { op: "log", detail: "non-positive argument".into() });
        }
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", Op::Softplus(self.id), kernels::softplus)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let value = kernels::softmax_last(&self.tape.value(self.id));
        self.tape.push("softmax", value, Op::Softmax(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let value = kernels::log_softmax_last(&self.tape.value(self.id));
        self.tape.push("log_softmax", value, Op::LogSoftmax(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let total: f64 = self.tape.value(self.id).data().iter().sum();
        self.tape.push("sum", Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).len();
        if n == 0 {
            return Err(GraphError::InvalidShape { op: "mean", detail: "empty tensor".into() });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.len() != 1 {
                return Err(GraphError::ShapeMismatch { op: "expand_to", lhs: a.shape().to_vec(), rhs: shape.to_vec() });
            }
            Tensor::filled(shape, a.item())
        };
        self.tape.push("expand_to", value, Op::ExpandScalar(self.id))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            self.check_axis("sum_axis", &a, axis)?;
            kernels::sum_axis(&a, axis)
        };
        self.tape.push("sum_axis", value, Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(0);
        self.sum_axis(axis)?.scale(1.0 / n.max(1) as f64)
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the data.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if axis > a.rank() {
                return Err(GraphError::InvalidShape {
                    op: "expand_axis",
                    detail: format!("axis {} out of range for shape {:?}", axis, a.shape()),
                });
            }
            kernels::expand_axis(&a, axis, n)
        };
        self.tape.push("expand_axis", value, Op::ExpandAxis(self.id, axis))
    }

    /// Adds a vector to every row (broadcast over all leading axes).
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let rs = row.shape();
        if rs.len() != 1 || shape.last() != rs.first() {
            return Err(GraphError::ShapeMismatch { op: "add_row", lhs: shape, rhs: rs });
        }
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let tiled = row.expand_axis(0, lead)?.reshape(&shape)?;
        self.add(tiled)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).clone().reshaped(shape)?;
        self.tape.push("reshape", value, Op::Reshape(self.id))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            self.check_axis("slice", &a, axis)?;
            if start + len > a.shape()[axis] {
                return Err(GraphError::InvalidShape {
                    op: "slice",
                    detail: format!("range {}..{} exceeds axis {} of {:?}", start, start + len, axis, a.shape()),
                });
            }
            kernels::slice(&a, axis, start, len)
        };
        self.tape.push("slice", value, Op::Slice { src: self.id, axis, start })
    }

    fn slice_adjoint(&self, axis: usize, start: usize, full: usize) -> Result<Var<'t>> {
        let value = kernels::slice_adjoint(&self.tape.value(self.id), axis, start, full);
        self.tape.push("slice_adjoint", value, Op::SliceAdjoint { src: self.id, axis, start })
    }

    /// Row lookup into a `[R, C]` table.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        self.gather_rows_rc(idx.into())
    }

    fn gather_rows_rc(&self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.rank() != 2 {
                return Err(GraphError::InvalidShape { op: "gather_rows", detail: format!("shape {:?}", a.shape()) });
            }
            if let Some(&bad) = idx.iter().find(|&&r| r >= a.shape()[0]) {
                return Err(GraphError::InvalidShape {
                    op: "gather_rows",
                    detail: format!("row {} out of range for {:?}", bad, a.shape()),
                });
            }
            kernels::gather_rows(&a, &idx)
        };
        self.tape.push("gather_rows", value, Op::GatherRows { src: self.id, idx })
    }

    fn scatter_rows_rc(&self, idx: Rc<[usize]>, rows: usize) -> Result<Var<'t>> {
        let value = kernels::scatter_rows(&self.tape.value(self.id), &idx, rows);
        self.tape.push("scatter_rows", value, Op::ScatterRows { src: self.id, idx })
    }

    /// Picks elements by flat row-major index into a 1-D result.
    pub fn gather_flat(&self, idx: &[usize]) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GraphError::InvalidShape {
                op: "gather_flat",
                detail: format!("index {} out of range for {} elements", bad, n),
            });
        }
        self.gather_flat_rc(idx.into())
    }

    fn gather_flat_rc(&self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let value = kernels::gather_flat(&self.tape.value(self.id), &idx);
        self.tape.push("gather_flat", value, Op::GatherFlat { src: self.id, idx })
    }

    fn scatter_flat_rc(&self, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let value = kernels::scatter_flat(&self.tape.value(self.id), &idx, shape);
        self.tape.push("scatter_flat", value, Op::ScatterFlat { src: self.id, idx })
    }

    fn unfold(&self, kernel: usize, pad: usize) -> Result<Var<'t>> {
        let value = kernels::unfold(&self.tape.value(self.id), kernel, pad);
        self.tape.push("unfold", value, Op::Unfold { src: self.id, kernel, pad })
    }

    fn fold(&self, kernel: usize, pad: usize, len: usize) -> Result<Var<'t>> {
        let value = kernels::fold(&self.tape.value(self.id), kernel, pad, len);
        self.tape.push("fold", value, Op::Fold { src: self.id, kernel, pad })
    }

    fn check_axis(&self, op: &'static str, a: &Tensor, axis: usize) -> Result<()> {
        if axis >= a.rank() {
            return Err(GraphError::InvalidShape {
                op,
                detail: format!("axis {} out of range for shape {:?}", axis, a.shape()),
            });
        }
        Ok(())
    }
}
