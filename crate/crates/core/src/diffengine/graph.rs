use std::collections::BTreeMap;

use super::store::ParamStore;
use super::tensor::{gemm, gemm_t, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Fed per execution; differentiable.
    Input,
    /// Fed per execution; class indices, never differentiated.
    Labels,
    /// Read from a parameter store; differentiated.
    Param,
    /// Read from a parameter store; excluded from gradients.
    Frozen,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { kind: LeafKind, name: String },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f64),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    },
    Reshape(NodeId, Vec<usize>),
    SumAll(NodeId),
    CrossEntropy { logits: NodeId, labels: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::SumAll(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::CrossEntropy { logits, labels } => vec![*logits, *labels],
            Op::AddScalar(a, _)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::Reshape(a, _)
            | Op::SumAll(a) => vec![*a],
            Op::Slice { src, .. } => vec![*src],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

/// Static computation graph, built once and executed many times.
///
/// Nodes are appended in construction order, which is also the
/// evaluation order; operands always precede their consumers so the
/// graph is acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    leaves: BTreeMap<String, NodeId>,
    needs_grad: Vec<bool>,
}

/// Node values from one forward execution.
#[derive(Debug, Clone)]
pub struct Values {
    vals: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.vals[node.0]
    }
}

/// Gradients of a scalar output with respect to named leaves.
pub type Gradients = BTreeMap<String, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs = match &op {
            Op::Leaf { kind, .. } => matches!(kind, LeafKind::Input | LeafKind::Param),
            Op::Const(_) => false,
            other => other.operands().iter().any(|o| self.needs_grad[o.0]),
        };
        self.ops.push(op);
        self.needs_grad.push(needs);
        NodeId(self.ops.len() - 1)
    }

    fn leaf(&mut self, kind: LeafKind, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            if let Op::Leaf { kind: k, .. } = &self.ops[id.0] {
                assert_eq!(*k, kind, "leaf `{name}` redeclared with a different kind");
            }
            return id;
        }
        let id = self.push(Op::Leaf {
            kind,
            name: name.to_string(),
        });
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(LeafKind::Input, name)
    }

    pub fn labels(&mut self, name: &str) -> NodeId {
        self.leaf(LeafKind::Labels, name)
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(LeafKind::Param, name)
    }

    pub fn frozen(&mut self, name: &str) -> NodeId {
        self.leaf(LeafKind::Frozen, name)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `a + b`, where `b` may be a row vector or a single element broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    /// Column-wise concatenation of operands with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: NodeId, row0: usize, rows: usize, col0: usize, cols: usize) -> NodeId {
        self.push(Op::Slice {
            src,
            row0,
            rows,
            col0,
            cols,
        })
    }

    pub fn slice_cols(&mut self, src: NodeId, col0: usize, cols: usize) -> NodeId {
        // Row extent resolved at execution time.
        self.push(Op::Slice {
            src,
            row0: 0,
            rows: usize::MAX,
            col0,
            cols,
        })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }

    /// Mean softmax cross-entropy of `logits: n x c` against integer `labels: [n]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::CrossEntropy { logits, labels })
    }

    /// Names of leaves of the given kind, in name order.
    pub fn leaf_names(&self, kind: LeafKind) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(&self.ops[id.0], Op::Leaf { kind: k, .. } if *k == kind))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    fn shape_err(&self, node: usize, detail: String) -> Error {
        Error::Shape {
            node,
            op: self.ops[node].name(),
            detail,
        }
    }

    /// Evaluates every node. Parameter leaves are looked up in `params` in
    /// order (first match wins); input leaves in `feed`.
    pub fn forward(&self, params: &[&ParamStore], feed: &[(&str, &Tensor)]) -> Result<Values> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = self.eval_op(i, op, &vals, params, feed)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            vals.push(v);
        }
        Ok(Values { vals })
    }

    /// Nodes whose value depends on the leaf `name`, in evaluation order.
    pub(crate) fn downstream_of(&self, name: &str) -> Vec<usize> {
        let Some(root) = self.leaf_id(name) else {
            return Vec::new();
        };
        let mut dirty = vec![false; self.ops.len()];
        dirty[root.0] = true;
        for (i, op) in self.ops.iter().enumerate().skip(root.0 + 1) {
            dirty[i] = op.operands().iter().any(|n| dirty[n.0]);
        }
        (0..self.ops.len()).filter(|&i| dirty[i]).collect()
    }

    /// Re-evaluates only `nodes` (ascending), reusing every other value.
    pub(crate) fn refresh(
        &self,
        values: &mut Values,
        nodes: &[usize],
        params: &[&ParamStore],
        feed: &[(&str, &Tensor)],
    ) -> Result<()> {
        for &i in nodes {
            let op = &self.ops[i];
            let v = self.eval_op(i, op, &values.vals, params, feed)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { node: i, op: op.name() });
            }
            values.vals[i] = v;
        }
        Ok(())
    }

    fn eval_op(
        &self,
        i: usize,
        op: &Op,
        vals: &[Tensor],
        params: &[&ParamStore],
        feed: &[(&str, &Tensor)],
    ) -> Result<Tensor> {
        let v = |n: &NodeId| &vals[n.0];
        Ok(match op {
            Op::Leaf { kind, name } => match kind {
                LeafKind::Input | LeafKind::Labels => feed
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| Error::MissingLeaf(name.clone()))?,
                LeafKind::Param | LeafKind::Frozen => params
                    .iter()
                    .find_map(|s| s.get(name))
                    .cloned()
                    .ok_or_else(|| Error::MissingLeaf(name.clone()))?,
            },
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let ((m, k), (k2, n)) = (a.dims(), b.dims());
                if k != k2 {
                    return Err(self.shape_err(i, format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.values(), b.values(), &mut out);
                Tensor::from_parts(vec![m, n], out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                let kind = broadcast_kind(a, b).ok_or_else(|| {
                    self.shape_err(i, format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()))
                })?;
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let cols = a.cols();
                let out = a
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| f(x, b.values()[kind.index(j, cols)]))
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), out)
            }
            Op::AddScalar(a, c) => v(a).map(|x| x + c),
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => {
                let a = v(a);
                if a.values().iter().any(|&x| x <= 0.0) {
                    return Err(Error::NonFinite { node: i, op: "log" });
                }
                a.map(f64::ln)
            }
            Op::Softmax(a) => {
                let a = v(a);
                let (r, c) = a.dims();
                let mut out = a.values().to_vec();
                for row in out.chunks_mut(c).take(r) {
                    softmax_in_place(row);
                }
                Tensor::from_parts(a.shape().to_vec(), out)
            }
            Op::Concat(parts) => {
                let rows = v(&parts[0]).rows();
                if let Some(p) = parts.iter().find(|p| v(p).rows() != rows) {
                    return Err(self.shape_err(
                        i,
                        format!("row count {} vs {} (operand node {})", v(p).rows(), rows, p.0),
                    ));
                }
                let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        out.extend_from_slice(v(p).row(r));
                    }
                }
                Tensor::from_parts(vec![rows, total], out)
            }
            Op::Slice {
                src,
                row0,
                rows,
                col0,
                cols,
            } => {
                let a = v(src);
                let (r, c) = a.dims();
                let rows = if *rows == usize::MAX { r } else { *rows };
                if row0 + rows > r || col0 + cols > c || rows == 0 || *cols == 0 {
                    return Err(self.shape_err(
                        i,
                        format!("slice [{row0}+{rows}, {col0}+{cols}] of {:?}", a.shape()),
                    ));
                }
                let mut out = Vec::with_capacity(rows * cols);
                for rr in *row0..row0 + rows {
                    out.extend_from_slice(&a.row(rr)[*col0..col0 + cols]);
                }
                Tensor::from_parts(vec![rows, *cols], out)
            }
            Op::Reshape(a, shape) => {
                let a = v(a);
                if shape.iter().product::<usize>() != a.len() {
                    return Err(self.shape_err(i, format!("reshape {:?} -> {shape:?}", a.shape())));
                }
                Tensor::from_parts(shape.clone(), a.values().to_vec())
            }
            Op::SumAll(a) => Tensor::scalar(v(a).values().iter().sum()),
            Op::CrossEntropy { logits, labels } => {
                let (z, y) = (v(logits), v(labels));
                let (n, c) = z.dims();
                if y.len() != n {
                    return Err(self.shape_err(i, format!("{} labels for {n} rows", y.len())));
                }
                let mut total = 0.0;
                for r in 0..n {
                    let k = label_index(y.values()[r], c).ok_or_else(|| {
                        self.shape_err(i, format!("label {} outside 0..{c}", y.values()[r]))
                    })?;
                    let row = z.row(r);
                    total += log_sum_exp(row) - row[k];
                }
                Tensor::scalar(total / n as f64)
            }
        })
    }

    /// Reverse-mode gradients of the scalar node `output` with respect to
    /// every `Input` and `Param` leaf reachable from it.
    pub fn backward(&self, values: &Values, output: NodeId) -> Result<Gradients> {
        let out = values.get(output);
        if out.len() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.ops[i];
            if let Op::Leaf { .. } = op {
                grads[i] = Some(g);
                continue;
            }
            let val = |n: &NodeId| values.get(*n);
            let needs = |n: &NodeId| self.needs_grad[n.0];
            let mut contribs: Vec<(NodeId, Tensor)> = Vec::with_capacity(2);
            match op {
                Op::Leaf { .. } | Op::Const(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let ((m, k), (_, n)) = (av.dims(), bv.dims());
                    if needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm_t(false, true, m, n, k, g.values(), bv.values(), &mut da, 0.0);
                        contribs.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                    }
                    if needs(b) {
                        let mut db = vec![0.0; k * n];
                        gemm_t(true, false, k, m, n, av.values(), g.values(), &mut db, 0.0);
                        contribs.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let kind = broadcast_kind(av, bv).expect("checked in forward");
                    let cols = av.cols();
                    if needs(a) {
                        let da = match op {
                            Op::Mul(..) => {
                                let d = g
                                    .values()
                                    .iter()
                                    .enumerate()
                                    .map(|(j, &gj)| gj * bv.values()[kind.index(j, cols)])
                                    .collect();
                                Tensor::from_parts(av.shape().to_vec(), d)
                            }
                            _ => g.clone(),
                        };
                        contribs.push((*a, da));
                    }
                    if needs(b) {
                        let mut db = vec![0.0; bv.len()];
                        for (j, &gj) in g.values().iter().enumerate() {
                            let term = match op {
                                Op::Add(..) => gj,
                                Op::Sub(..) => -gj,
                                _ => gj * av.values()[j],
                            };
                            db[kind.index(j, cols)] += term;
                        }
                        contribs.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                    }
                }
                Op::AddScalar(a, _) => contribs.push((*a, g)),
                Op::Scale(a, c) => contribs.push((*a, g.map(|x| x * c))),
                Op::Relu(a) => {
                    let x = val(a);
                    let d = zip_map(&g, x, |gj, xj| if xj > 0.0 { gj } else { 0.0 });
                    contribs.push((*a, d));
                }
                Op::Sigmoid(_) | Op::Exp(_) => {
                    // Both derivatives are expressed through the output value.
                    let y = values.get(NodeId(i));
                    let d = match op {
                        Op::Sigmoid(_) => zip_map(&g, y, |gj, s| gj * s * (1.0 - s)),
                        _ => zip_map(&g, y, |gj, e| gj * e),
                    };
                    let src = op.operands()[0];
                    contribs.push((src, d));
                }
                Op::Log(a) => contribs.push((*a, zip_map(&g, val(a), |gj, x| gj / x))),
                Op::Softmax(a) => {
                    let y = values.get(NodeId(i));
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d
                        .chunks_mut(c)
                        .zip(y.values().chunks(c))
                        .zip(g.values().chunks(c))
                    {
                        let inner: f64 = yr.iter().zip(gr).map(|(s, gg)| s * gg).sum();
                        for ((dj, s), gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *dj = s * (gg - inner);
                        }
                    }
                    contribs.push((*a, Tensor::from_parts(val(a).shape().to_vec(), d)));
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(p);
                        let pc = pv.cols();
                        if needs(p) {
                            let mut d = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                let base = r * total + offset;
                                d.extend_from_slice(&g.values()[base..base + pc]);
                            }
                            contribs.push((*p, Tensor::from_parts(pv.shape().to_vec(), d)));
                        }
                        offset += pc;
                    }
                }
                Op::Slice {
                    src, row0, col0, ..
                } => {
                    let sv = val(src);
                    let sc = sv.cols();
                    let (gr, gc) = g.dims();
                    let mut d = vec![0.0; sv.len()];
                    for r in 0..gr {
                        let base = (row0 + r) * sc + col0;
                        d[base..base + gc].copy_from_slice(&g.values()[r * gc..(r + 1) * gc]);
                    }
                    contribs.push((*src, Tensor::from_parts(sv.shape().to_vec(), d)));
                }
                Op::Reshape(a, _) => {
                    let shape = val(a).shape().to_vec();
                    contribs.push((*a, Tensor::from_parts(shape, g.into_values())));
                }
                Op::SumAll(a) => {
                    let av = val(a);
                    contribs.push((*a, Tensor::full(av.shape(), g.item())));
                }
                Op::CrossEntropy { logits, .. } => {
                    let z = val(logits);
                    let (n, c) = z.dims();
                    let y = val(&op.operands()[1]);
                    let scale = g.item() / n as f64;
                    let mut d = z.values().to_vec();
                    for (r, row) in d.chunks_mut(c).enumerate() {
                        softmax_in_place(row);
                        let k = label_index(y.values()[r], c).expect("checked in forward");
                        row[k] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= scale;
                        }
                    }
                    contribs.push((*logits, Tensor::from_parts(z.shape().to_vec(), d)));
                }
            }
            for (node, d) in contribs {
                if !self.needs_grad[node.0] {
                    continue;
                }
                match &mut grads[node.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            }
        }

        let mut out = Gradients::new();
        for (name, id) in &self.leaves {
            if let Op::Leaf { kind, .. } = &self.ops[id.0] {
                if !matches!(kind, LeafKind::Input | LeafKind::Param) || id.0 > output.0 {
                    continue;
                }
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(values.get(*id).shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Single,
}

impl Broadcast {
    fn index(self, j: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => j,
            Broadcast::Row => j % cols,
            Broadcast::Single => 0,
        }
    }
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.dims() == b.dims() {
        Some(Broadcast::Same)
    } else if b.len() == 1 {
        Some(Broadcast::Single)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Some(Broadcast::Row)
    } else {
        None
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = g.values().iter().zip(x.values()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(x.shape().to_vec(), d)
}

fn label_index(y: f64, classes: usize) -> Option<usize> {
    (y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes).then_some(y as usize)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed1(g: &Graph, t: &Tensor) -> Values {
        g.forward(&[], &[("x", t)]).unwrap()
    }

    #[test]
    fn relu_softmax_matmul_values() {
        let mut g = Graph::new();
        let x = g.input("x");
        let r = g.relu(x);
        let v = feed1(&g, &Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(v.get(r).values(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x);
        let v = feed1(&g, &Tensor::vector(vec![0.0; 3]));
        for &p in v.get(s).values() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut g = Graph::new();
        let a = g.input("x");
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let m = g.matmul(a, b);
        let v = feed1(&g, &Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert_eq!(v.get(m).values(), &[11.0]);
    }

    #[test]
    fn scalar_derivatives() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, 3.0);
        let v = feed1(&g, &Tensor::scalar(2.0));
        assert_eq!(g.backward(&v, y).unwrap()["x"].item(), 3.0);

        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.mul(x, x);
        let v = feed1(&g, &Tensor::scalar(2.0));
        assert_eq!(g.backward(&v, y).unwrap()["x"].item(), 4.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        let r = g.relu(x);
        let s = g.sum(r);
        let v = feed1(&g, &Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(g.backward(&v, s).unwrap()["x"].values(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.input("x");
        let v = feed1(&g, &Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(&v, x), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("x");
        let b = g.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let _ = g.matmul(a, b);
        let err = g
            .forward(&[], &[("x", &Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 2") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn missing_leaf_rejected() {
        let mut g = Graph::new();
        g.param("w");
        assert!(matches!(g.forward(&[], &[]), Err(Error::MissingLeaf(n)) if n == "w"));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut g = Graph::new();
        let z = g.input("z");
        let y = g.labels("y");
        let l = g.cross_entropy(z, y);
        let zt = Tensor::zeros(&[4, 10]);
        let yt = Tensor::vector(vec![0.0, 3.0, 9.0, 5.0]);
        let v = g.forward(&[], &[("z", &zt), ("y", &yt)]).unwrap();
        assert!((v.get(l).item() - 10f64.ln()).abs() < 1e-12);
        let grads = g.backward(&v, l).unwrap();
        assert!(!grads.contains_key("y"));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        store.insert("f", Tensor::scalar(5.0));
        let mut g = Graph::new();
        let w = g.param("w");
        let f = g.frozen("f");
        let y = g.mul(w, f);
        let v = g.forward(&[&store], &[]).unwrap();
        let grads = g.backward(&v, y).unwrap();
        assert_eq!(grads["w"].item(), 5.0);
        assert!(!grads.contains_key("f"));
    }
}
