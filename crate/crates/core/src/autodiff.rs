//! Static dense-tensor computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from a fixed set of primitives and can then be
//! evaluated any number of times with different leaf bindings. Leaves are
//! either trainable parameters or frozen inputs; gradients stop at frozen
//! inputs, so anything bound as an input receives an all-zero gradient.
//!
//! Broadcasting is limited to two cases: a one-element operand against any
//! shape, and a `[R, 1]` column against an `[R, C]` matrix (a per-row scalar).

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{dense, Tensor};

/// Floor applied inside `log`.
pub const LOG_FLOOR: f64 = 1e-30;
/// Floor applied to norms used as denominators.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Input,
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Norm(NodeId),
    Dot(NodeId, NodeId),
    Cosine(NodeId, NodeId),
    RowSoftmax(NodeId),
    Frobenius(NodeId),
    SquaredError(NodeId, NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Input => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::ConcatRows(_) => "concat_rows",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Norm(_) => "l2_norm",
            Op::Dot(..) => "dot",
            Op::Cosine(..) => "cosine",
            Op::RowSoftmax(_) => "row_softmax",
            Op::Frobenius(_) => "frobenius",
            Op::SquaredError(..) => "squared_error",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param | Op::Input | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b)
            | Op::Cosine(a, b)
            | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm(a)
            | Op::RowSoftmax(a)
            | Op::Frobenius(a) => vec![*a],
            Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    label: String,
    /// True when some trainable parameter is upstream of this node.
    needs_grad: bool,
}

/// Append-only computation graph. Node inputs always refer to earlier nodes.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Leaf values for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: HashMap<NodeId, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        self.values.insert(leaf, value);
        self
    }

    pub fn with(mut self, leaf: NodeId, value: Tensor) -> Self {
        self.values.insert(leaf, value);
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.values.get(&leaf)
    }

    pub fn get_mut(&mut self, leaf: NodeId) -> Option<&mut Tensor> {
        self.values.get_mut(&leaf)
    }
}

/// Cached node outputs from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    guarded: Vec<NodeId>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Output of the last node in the graph.
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("empty graph")
    }

    /// Nodes where a `log` or norm floor was active during this pass.
    pub fn guarded_nodes(&self) -> &[NodeId] {
        &self.guarded
    }
}

/// Gradients of a scalar output with respect to every leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> &Tensor {
        &self.by_leaf[&leaf]
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.by_leaf.iter()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    if nb == 1 && na >= 1 && (na > 1 || a.len() >= b.len()) {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    if a.len() == 2 && b.len() == 2 && a[0] == b[0] {
        if b[1] == 1 {
            return Some(a.to_vec());
        }
        if a[1] == 1 {
            return Some(b.to_vec());
        }
    }
    None
}

/// Reads operand `x` (of shape `xs`) at the flat index `i` of a broadcast result of shape `out`.
#[inline]
fn bcast_index(xs: &[usize], xn: usize, out: &[usize], i: usize) -> usize {
    if xn == 1 {
        0
    } else if xs == out {
        i
    } else {
        // [R, 1] against [R, C]
        i / out[1]
    }
}

fn reduce_to(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    let tn: usize = target.iter().product();
    if target == out_shape {
        return grad.to_vec();
    }
    if tn == 1 {
        return vec![grad.iter().sum()];
    }
    let cols = out_shape[1];
    grad.chunks(cols).map(|r| r.iter().sum()).collect()
}

fn reduced_shape(shape: &[usize]) -> Option<Vec<usize>> {
    match shape.len() {
        1 => Some(vec![]),
        2 => Some(vec![shape[0], 1]),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    fn describe(&self, id: usize) -> String {
        match self.nodes.get(id) {
            Some(n) => format!("node #{id} ({})", n.label),
            None => format!("node #{id}"),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, label: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let needs_grad = match &op {
            Op::Param => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        let label = label.unwrap_or_else(|| op.tag().to_string());
        self.nodes.push(Node {
            op,
            shape,
            label,
            needs_grad,
        });
        id
    }

    fn shape_err(&self, tag: &str, msg: String) -> Error {
        Error::Shape {
            node: format!("node #{} ({tag})", self.nodes.len()),
            msg,
        }
    }

    fn check_ids(&self, tag: &str, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(self.shape_err(tag, format!("operand {id} does not exist yet")));
            }
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Param, shape.to_vec(), Some(name.to_string()));
        self.leaves.push(id);
        id
    }

    /// Frozen leaf: bound at evaluation time, never receives gradient.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Input, shape.to_vec(), Some(name.to_string()));
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape, None)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn elementwise(&mut self, tag: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        self.check_ids(tag, &[a, b])?;
        broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            self.shape_err(
                tag,
                format!("cannot combine {:?} with {:?}", self.shape(a), self.shape(b)),
            )
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.elementwise("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.elementwise("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.elementwise("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s, None))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.check_ids("scale", &[a])?;
        if !k.is_finite() {
            return Err(self.shape_err("scale", format!("non-finite factor {k}")));
        }
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a, k), s, None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let s = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), s, None))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("transpose", &[a])?;
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(self.shape_err("transpose", format!("needs a matrix, got {sa:?}")));
        }
        let s = vec![sa[1], sa[0]];
        Ok(self.push(Op::Transpose(a), s, None))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_ids("concat_rows", parts)?;
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "nothing to concatenate".into()));
        }
        let cols = self.shape(parts[0]).get(1).copied();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || Some(s[1]) != cols {
                return Err(self.shape_err(
                    "concat_rows",
                    format!("part {p} has shape {s:?}, expected [_, {}]", cols.unwrap_or(0)),
                ));
            }
            rows += s[0];
        }
        let s = vec![rows, cols.unwrap_or(0)];
        Ok(self.push(Op::ConcatRows(parts.to_vec()), s, None))
    }

    fn unary(&mut self, tag: &'static str, a: NodeId, op: Op) -> Result<NodeId> {
        self.check_ids(tag, &[a])?;
        let s = self.shape(a).to_vec();
        Ok(self.push(op, s, None))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, Op::Exp(a))
    }

    /// `ln(max(x, 1e-30))`.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("sum", &[a])?;
        Ok(self.push(Op::Sum(a), vec![], None))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("mean", &[a])?;
        Ok(self.push(Op::Mean(a), vec![], None))
    }

    /// Euclidean norm over the last axis: `[R, C] -> [R, 1]`, `[C] -> []`.
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("l2_norm", &[a])?;
        let s = reduced_shape(self.shape(a))
            .ok_or_else(|| self.shape_err("l2_norm", "needs rank 1 or 2".into()))?;
        Ok(self.push(Op::Norm(a), s, None))
    }

    fn paired_reduce(&mut self, tag: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        self.check_ids(tag, &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                tag,
                format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        reduced_shape(self.shape(a)).ok_or_else(|| self.shape_err(tag, "needs rank 1 or 2".into()))
    }

    /// Row-wise inner product.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.paired_reduce("dot", a, b)?;
        Ok(self.push(Op::Dot(a, b), s, None))
    }

    /// Row-wise cosine similarity with norms floored at `1e-12`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.paired_reduce("cosine", a, b)?;
        Ok(self.push(Op::Cosine(a, b), s, None))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("row_softmax", &[a])?;
        if self.shape(a).len() != 2 {
            return Err(self.shape_err("row_softmax", format!("needs a matrix, got {:?}", self.shape(a))));
        }
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::RowSoftmax(a), s, None))
    }

    /// Norm of all entries.
    pub fn frobenius_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("frobenius", &[a])?;
        Ok(self.push(Op::Frobenius(a), vec![], None))
    }

    /// `sum((a - b)^2)`.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids("squared_error", &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                "squared_error",
                format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.push(Op::SquaredError(a, b), vec![], None))
    }

    /// Attaches a readable name to an existing node, used in error messages.
    pub fn name(&mut self, id: NodeId, label: &str) -> NodeId {
        self.nodes[id.0].label = label.to_string();
        id
    }

    // ---- composites -------------------------------------------------------

    /// `1 - x` for any shape.
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        let one = self.scalar(1.0);
        self.sub(one, x)
    }

    /// Replicates a `[1, C]` row `n` times via a product with a column of ones.
    pub fn repeat_row(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let ones = self.constant(Tensor::ones(&[n, 1]));
        self.matmul(ones, row)
    }

    /// Column means of an `[R, C]` matrix as a `[1, C]` row.
    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let r = *self.shape(x).first().unwrap_or(&1);
        let w = self.constant(Tensor::full(&[1, r], 1.0 / r as f64));
        self.matmul(w, x)
    }

    /// Divides each row by its Euclidean norm (`exp(-log n)` keeps to the primitive set).
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.l2_norm(x)?;
        let ln = self.log(n)?;
        let neg = self.scale(ln, -1.0)?;
        let inv = self.exp(neg)?;
        self.mul(x, inv)
    }

    /// `x · wᵀ + b` with `w: [out, in]`, `b: [1, out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        let rows = self.shape(x)[0];
        let bias = self.repeat_row(b, rows)?;
        self.add(xw, bias)
    }

    // ---- evaluation -------------------------------------------------------

    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut guarded = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let v = |id: &NodeId| -> &Tensor { &values[id.0] };
            let out: Tensor = match &node.op {
                Op::Param | Op::Input => {
                    let t = bindings.get(NodeId(i)).ok_or_else(|| {
                        Error::usage(format!("{} is not bound", self.describe(i)))
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: self.describe(i),
                            msg: format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        });
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                Op::Add(a, b) => zip_bcast(v(a), v(b), &node.shape, |x, y| x + y),
                Op::Sub(a, b) => zip_bcast(v(a), v(b), &node.shape, |x, y| x - y),
                Op::Mul(a, b) => zip_bcast(v(a), v(b), &node.shape, |x, y| x * y),
                Op::Scale(a, k) => v(a).map(|x| x * k),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (v(a), v(b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    Tensor::from_parts(vec![m, n], dense::matmul(ta.data(), tb.data(), m, k, n))
                }
                Op::Transpose(a) => {
                    let t = v(a);
                    let (r, c) = (t.shape()[0], t.shape()[1]);
                    Tensor::from_parts(vec![c, r], dense::transpose(t.data(), r, c))
                }
                Op::ConcatRows(parts) => {
                    let mut data = Vec::new();
                    for p in parts {
                        data.extend_from_slice(v(p).data());
                    }
                    Tensor::from_parts(node.shape.clone(), data)
                }
                Op::Tanh(a) => v(a).map(f64::tanh),
                Op::Exp(a) => v(a).map(f64::exp),
                Op::Log(a) => {
                    let t = v(a);
                    if t.data().iter().any(|&x| x < LOG_FLOOR) {
                        guarded.push(NodeId(i));
                    }
                    t.map(|x| x.max(LOG_FLOOR).ln())
                }
                Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
                Op::Mean(a) => {
                    let t = v(a);
                    Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
                }
                Op::Norm(a) => {
                    let t = v(a);
                    Tensor::from_parts(node.shape.clone(), t.iter_rows().map(dense::norm).collect())
                }
                Op::Dot(a, b) => {
                    let (ta, tb) = (v(a), v(b));
                    let d = ta.iter_rows().zip(tb.iter_rows()).map(|(x, y)| dense::dot(x, y)).collect();
                    Tensor::from_parts(node.shape.clone(), d)
                }
                Op::Cosine(a, b) => {
                    let (ta, tb) = (v(a), v(b));
                    let mut d = Vec::with_capacity(ta.rows());
                    let mut hit = false;
                    for (x, y) in ta.iter_rows().zip(tb.iter_rows()) {
                        let (nx, ny) = (dense::norm(x), dense::norm(y));
                        hit |= nx < NORM_FLOOR || ny < NORM_FLOOR;
                        d.push(dense::dot(x, y) / (nx.max(NORM_FLOOR) * ny.max(NORM_FLOOR)));
                    }
                    if hit {
                        guarded.push(NodeId(i));
                    }
                    Tensor::from_parts(node.shape.clone(), d)
                }
                Op::RowSoftmax(a) => {
                    let t = v(a);
                    let mut d = Vec::with_capacity(t.numel());
                    for row in t.iter_rows() {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        d.extend(e.into_iter().map(|x| x / s));
                    }
                    Tensor::from_parts(node.shape.clone(), d)
                }
                Op::Frobenius(a) => Tensor::scalar(dense::norm(v(a).data())),
                Op::SquaredError(a, b) => Tensor::scalar(dense::sq_dist(v(a).data(), v(b).data())),
            };
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    node: self.describe(i),
                });
            }
            values.push(out);
        }
        Ok(Evaluation { values, guarded })
    }

    /// Gradient of the one-element node `output` with respect to every leaf.
    pub fn backward(&self, eval: &Evaluation, output: NodeId) -> Result<Gradients> {
        if eval.values.len() != self.nodes.len() {
            return Err(Error::usage("evaluation does not belong to this graph"));
        }
        if eval.value(output).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar output, {} has shape {:?}",
                self.describe(output.0),
                self.shape(output)
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Param | Op::Input) {
                grads[i] = Some(g);
                continue;
            }
            let val = |id: &NodeId| eval.value(*id);
            let out = &eval.values[i];
            let mut contribs: Vec<(NodeId, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Param | Op::Input | Op::Const(_) => {}
                Op::Add(a, b) => {
                    contribs.push((*a, reduce_to(&g, &node.shape, self.shape(*a))));
                    contribs.push((*b, reduce_to(&g, &node.shape, self.shape(*b))));
                }
                Op::Sub(a, b) => {
                    contribs.push((*a, reduce_to(&g, &node.shape, self.shape(*a))));
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    contribs.push((*b, reduce_to(&neg, &node.shape, self.shape(*b))));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * tb.data()[bcast_index(tb.shape(), tb.numel(), &node.shape, k)])
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * ta.data()[bcast_index(ta.shape(), ta.numel(), &node.shape, k)])
                        .collect();
                    contribs.push((*a, reduce_to(&ga, &node.shape, ta.shape())));
                    contribs.push((*b, reduce_to(&gb, &node.shape, tb.shape())));
                }
                Op::Scale(a, k) => contribs.push((*a, g.iter().map(|x| x * k).collect())),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k, nn) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    // dA = G Bᵀ, dB = Aᵀ G
                    let bt = dense::transpose(tb.data(), k, nn);
                    contribs.push((*a, dense::matmul(&g, &bt, m, nn, k)));
                    let at = dense::transpose(ta.data(), m, k);
                    contribs.push((*b, dense::matmul(&at, &g, k, m, nn)));
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    contribs.push((*a, dense::transpose(&g, r, c)));
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].shape.iter().product::<usize>();
                        contribs.push((*p, g[off..off + len].to_vec()));
                        off += len;
                    }
                }
                Op::Tanh(a) => {
                    let d = g.iter().zip(out.data()).map(|(gk, y)| gk * (1.0 - y * y)).collect();
                    contribs.push((*a, d));
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(out.data()).map(|(gk, y)| gk * y).collect();
                    contribs.push((*a, d));
                }
                Op::Log(a) => {
                    let d = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gk, &x)| if x < LOG_FLOOR { 0.0 } else { gk / x })
                        .collect();
                    contribs.push((*a, d));
                }
                Op::Sum(a) => {
                    let len = val(a).numel();
                    contribs.push((*a, vec![g[0]; len]));
                }
                Op::Mean(a) => {
                    let len = val(a).numel();
                    contribs.push((*a, vec![g[0] / len as f64; len]));
                }
                Op::Norm(a) => {
                    let t = val(a);
                    let mut d = Vec::with_capacity(t.numel());
                    for ((row, nrm), gk) in t.iter_rows().zip(out.data()).zip(&g) {
                        let denom = nrm.max(NORM_FLOOR);
                        d.extend(row.iter().map(|x| gk * x / denom));
                    }
                    contribs.push((*a, d));
                }
                Op::Dot(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let cols = ta.cols();
                    let ga = tb.data().iter().enumerate().map(|(k, y)| g[k / cols] * y).collect();
                    let gb = ta.data().iter().enumerate().map(|(k, x)| g[k / cols] * x).collect();
                    contribs.push((*a, ga));
                    contribs.push((*b, gb));
                }
                Op::Cosine(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let mut ga = Vec::with_capacity(ta.numel());
                    let mut gb = Vec::with_capacity(tb.numel());
                    for ((x, y), (gk, c)) in ta.iter_rows().zip(tb.iter_rows()).zip(g.iter().zip(out.data())) {
                        let (nx, ny) = (dense::norm(x), dense::norm(y));
                        let (dx, dy) = (nx.max(NORM_FLOOR), ny.max(NORM_FLOOR));
                        // Below the floor the denominator is constant, so only the numerator term remains.
                        let kx = if nx >= NORM_FLOOR { c / (dx * dx) } else { 0.0 };
                        let ky = if ny >= NORM_FLOOR { c / (dy * dy) } else { 0.0 };
                        for (xi, yi) in x.iter().zip(y) {
                            ga.push(gk * (yi / (dx * dy) - kx * xi));
                            gb.push(gk * (xi / (dx * dy) - ky * yi));
                        }
                    }
                    contribs.push((*a, ga));
                    contribs.push((*b, gb));
                }
                Op::RowSoftmax(a) => {
                    let cols = node.shape[1];
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(cols).zip(out.data().chunks(cols)) {
                        let s: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                        d.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - s)));
                    }
                    contribs.push((*a, d));
                }
                Op::Frobenius(a) => {
                    let denom = out.item().max(NORM_FLOOR);
                    contribs.push((*a, val(a).data().iter().map(|x| g[0] * x / denom).collect()));
                }
                Op::SquaredError(a, b) => {
                    let diff: Vec<f64> = val(a)
                        .data()
                        .iter()
                        .zip(val(b).data())
                        .map(|(x, y)| 2.0 * g[0] * (x - y))
                        .collect();
                    contribs.push((*b, diff.iter().map(|x| -x).collect()));
                    contribs.push((*a, diff));
                }
            }
            for (id, d) in contribs {
                if !self.nodes[id.0].needs_grad && !matches!(self.nodes[id.0].op, Op::Input) {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(x, y)| *x += y),
                    slot @ None => *slot = Some(d),
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for &leaf in &self.leaves {
            let shape = self.nodes[leaf.0].shape.clone();
            let t = match (&self.nodes[leaf.0].op, grads.get_mut(leaf.0).and_then(Option::take)) {
                (Op::Param, Some(d)) => Tensor::from_parts(shape, d),
                _ => Tensor::zeros(&shape),
            };
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("gradient of {}", self.describe(leaf.0)),
                });
            }
            by_leaf.insert(leaf, t);
        }
        Ok(Gradients { by_leaf })
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, out: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = out.iter().product();
    let (an, bn) = (a.numel(), b.numel());
    let data = (0..n)
        .map(|i| {
            f(
                a.data()[bcast_index(a.shape(), an, out, i)],
                b.data()[bcast_index(b.shape(), bn, out, i)],
            )
        })
        .collect();
    Tensor::from_parts(out.to_vec(), data)
}

/// Outcome of comparing backward gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Leaf label and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Relative error used by [`grad_check`].
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

/// Checks `d output / d param` for every parameter leaf against
/// `(f(x + h) - f(x - h)) / 2h`, one coordinate at a time.
pub fn grad_check(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let eval = graph.forward(bindings)?;
    let grads = graph.backward(&eval, output)?;
    let mut work = bindings.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        pass: true,
    };
    for &leaf in graph.leaves() {
        if !graph.is_param(leaf) {
            continue;
        }
        let analytic = grads.get(leaf).data().to_vec();
        for (idx, &a) in analytic.iter().enumerate() {
            let x0 = work.get(leaf).expect("bound").data()[idx];
            work.get_mut(leaf).unwrap().data_mut()[idx] = x0 + h;
            let fp = graph.forward(&work)?.value(output).item();
            work.get_mut(leaf).unwrap().data_mut()[idx] = x0 - h;
            let fm = graph.forward(&work)?.value(output).item();
            work.get_mut(leaf).unwrap().data_mut()[idx] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_error(a, numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((graph.label(leaf).to_string(), idx));
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v).unwrap()
    }

    #[test]
    fn dot_by_hand() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 2]);
        let y = g.param("y", &[1, 2]);
        g.dot(x, y).unwrap();
        let b = Bindings::new().with(x, row(&[1.0, 2.0])).with(y, row(&[3.0, 4.0]));
        assert_eq!(g.forward(&b).unwrap().output().item(), 11.0);
    }

    #[test]
    fn self_cosine_is_one() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 3]);
        g.cosine(x, x).unwrap();
        let b = Bindings::new().with(x, row(&[0.3, -2.0, 7.5]));
        assert!((g.forward(&b).unwrap().output().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_one_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 2]);
        g.row_softmax(x).unwrap();
        let out = g.forward(&Bindings::new().with(x, row(&[1.0, 0.0]))).unwrap();
        let e = std::f64::consts::E;
        assert!((out.output().data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((out.output().data()[0] - 0.7311).abs() < 1e-4);
        assert!((out.output().data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[]);
        let sq = g.mul(x, x).unwrap();
        let b = Bindings::new().with(x, Tensor::scalar(3.0));
        let ev = g.forward(&b).unwrap();
        assert_eq!(g.backward(&ev, sq).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn tanh_sum_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &[3, 4]);
        let t = g.tanh(x).unwrap();
        let s = g.sum(t).unwrap();
        let ev = g.forward(&Bindings::new().with(x, Tensor::zeros(&[3, 4]))).unwrap();
        let gr = g.backward(&ev, s).unwrap();
        assert!(gr.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cosine_gradient_on_orthogonal_units() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 2]);
        let y = g.param("y", &[1, 2]);
        let c = g.cosine(x, y).unwrap();
        let b = Bindings::new().with(x, row(&[1.0, 0.0])).with(y, row(&[0.0, 1.0]));
        let ev = g.forward(&b).unwrap();
        let gr = g.backward(&ev, c).unwrap();
        // Frozen by central differences with h = 1e-5.
        assert!(gr.get(x).max_abs_diff(&row(&[0.0, 1.0])) < 1e-12);
        assert!(gr.get(y).max_abs_diff(&row(&[1.0, 0.0])) < 1e-12);
        let rep = grad_check(&g, &b, c, 1e-5, 1e-4).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut g = Graph::new();
        let x = g.param("x", &[2, 2]);
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        let b = Bindings::new().with(x, Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let rep = grad_check(&g, &b, s, 1e-5, 1e-4).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 2]);
        let t = g.tanh(x).unwrap();
        let ev = g.forward(&Bindings::new().with(x, row(&[1.0, 2.0]))).unwrap();
        assert!(matches!(g.backward(&ev, t), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.param("a", &[2, 3]);
        let b = g.param("b", &[2, 3]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("node #2 (matmul)"), "{err}");
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let mut g = Graph::new();
        let a = g.param("a", &[]);
        let e = g.exp(a).unwrap();
        g.name(e, "blowup");
        let err = g.forward(&Bindings::new().with(a, Tensor::scalar(1e4))).unwrap_err();
        assert!(err.to_string().contains("blowup"), "{err}");
    }

    #[test]
    fn frozen_inputs_get_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param("p", &[1, 2]);
        let q = g.input("q", &[1, 2]);
        let d = g.dot(p, q).unwrap();
        let b = Bindings::new().with(p, row(&[1.0, 2.0])).with(q, row(&[3.0, 4.0]));
        let gr = g.backward(&g.forward(&b).unwrap(), d).unwrap();
        assert_eq!(gr.get(p).data(), &[3.0, 4.0]);
        assert_eq!(gr.get(q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_and_cosine_guards_stay_finite() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 2]);
        let y = g.param("y", &[1, 2]);
        let c = g.cosine(x, y).unwrap();
        let l = g.log(x).unwrap();
        let s1 = g.sum(l).unwrap();
        let s = g.add(c, s1).unwrap();
        let b = Bindings::new().with(x, row(&[0.0, 0.0])).with(y, row(&[1.0, 0.0]));
        let ev = g.forward(&b).unwrap();
        assert_eq!(ev.value(c).item(), 0.0);
        assert_eq!(ev.guarded_nodes().len(), 2);
        let gr = g.backward(&ev, s).unwrap();
        assert!(gr.get(x).is_finite());
    }

    #[test]
    fn row_broadcast_multiply() {
        let mut g = Graph::new();
        let m = g.param("m", &[2, 3]);
        let c = g.param("c", &[2, 1]);
        let p = g.mul(m, c).unwrap();
        let s = g.sum(p).unwrap();
        let b = Bindings::new()
            .with(m, Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .with(c, Tensor::matrix(2, 1, vec![10.0, -1.0]).unwrap());
        let ev = g.forward(&b).unwrap();
        assert_eq!(ev.value(p).data(), &[10.0, 20.0, 30.0, -4.0, -5.0, -6.0]);
        let gr = g.backward(&ev, s).unwrap();
        assert_eq!(gr.get(c).data(), &[6.0, 15.0]);
        assert!(grad_check(&g, &b, s, 1e-5, 1e-6).unwrap().pass);
    }
}
