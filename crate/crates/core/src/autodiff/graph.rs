use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param,
    Const,
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Scale(f64),
    AddScalar(f64),
    Pow(f64),
    Relu,
    /// Heaviside step `1[x > 0]`; derivative is zero almost everywhere.
    Step,
    Tanh,
    Exp,
    Log,
    /// Row-wise softmax.
    Softmax,
    /// Row-wise log-softmax.
    LogSoftmax,
    /// Broadcast a `1xn`, `mx1` or `1x1` input to `rows x cols`.
    Expand { rows: usize, cols: usize },
    /// Sum-reduce to `rows x cols`; each target dim must be 1 or unchanged.
    SumTo { rows: usize, cols: usize },
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    /// Zero-pad rows so the input lands at `start` in a `total`-row output.
    PadRows { start: usize, total: usize },
    PadCols { start: usize, total: usize },
    /// Embedding lookup: gather rows of a table.
    Embedding(Arc<[usize]>),
    /// Adjoint of `Embedding`: scatter-add rows into a `rows`-row output.
    ScatterRows { ids: Arc<[usize]>, rows: usize },
    /// Gather columns.
    IndexSelect(Arc<[usize]>),
    /// Adjoint of `IndexSelect`.
    ScatterCols { ids: Arc<[usize]>, cols: usize },
    StopGrad,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Pow(_) => "pow",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Expand { .. } => "expand",
            Op::SumTo { .. } => "sum",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadRows { .. } => "pad_rows",
            Op::PadCols { .. } => "pad_cols",
            Op::Embedding(_) => "embedding",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::IndexSelect(_) => "index_select",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::StopGrad => "stop_grad",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input(_) | Op::Param | Op::Const)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    /// Filled by [`Graph::grad`] for the nodes it differentiates against.
    pub grad: Option<Tensor>,
}

/// Whether gradients returned by [`Graph::grad`] stay differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients are ordinary graph nodes; a later `grad` call differentiates
    /// through them.
    CreateGraph,
    /// Gradients are wrapped in stop-gradient nodes (first-order).
    Detached,
}

/// Append-only define-by-run computation graph.
///
/// Values are computed eagerly as nodes are appended, so node order is a
/// topological order. [`Graph::eval`] replays the whole list against new input
/// bindings.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<bool>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn row_softmax(x: &Tensor, log: bool) -> Tensor {
    let (rows, cols) = x.shape();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = x.row_slice(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let dst = &mut out[r * cols..(r + 1) * cols];
        if log {
            let lse = max + sum.ln();
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        } else {
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp() / sum;
            }
        }
    }
    Tensor::new(rows, cols, out)
}

/// Forward rule for every non-leaf op.
fn compute(op: &Op, xs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let unary = || -> Result<&Tensor> {
        if xs.len() != 1 {
            return Err(shape_err(name, format!("expected 1 input, got {}", xs.len())));
        }
        Ok(xs[0])
    };
    let binary = || -> Result<(&Tensor, &Tensor)> {
        if xs.len() != 2 {
            return Err(shape_err(name, format!("expected 2 inputs, got {}", xs.len())));
        }
        Ok((xs[0], xs[1]))
    };
    Ok(match op {
        Op::Input(_) | Op::Param | Op::Const => unreachable!("leaf ops are not recomputed"),
        Op::Add => {
            let (a, b) = binary()?;
            same_shape(name, a, b)?;
            a.zip_map(b, |x, y| x + y)
        }
        Op::Sub => {
            let (a, b) = binary()?;
            same_shape(name, a, b)?;
            a.zip_map(b, |x, y| x - y)
        }
        Op::Mul => {
            let (a, b) = binary()?;
            same_shape(name, a, b)?;
            a.zip_map(b, |x, y| x * y)
        }
        Op::MatMul => {
            let (a, b) = binary()?;
            if a.cols() != b.rows() {
                return Err(shape_err(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            a.matmul(b)
        }
        Op::Transpose => unary()?.transpose(),
        Op::Scale(c) => {
            let c = *c;
            unary()?.map(|x| x * c)
        }
        Op::AddScalar(c) => {
            let c = *c;
            unary()?.map(|x| x + c)
        }
        Op::Pow(p) => {
            let p = *p;
            unary()?.map(|x| if p == -1.0 { 1.0 / x } else { x.powf(p) })
        }
        Op::Relu => unary()?.map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Step => unary()?.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Tanh => unary()?.map(f64::tanh),
        Op::Exp => unary()?.map(f64::exp),
        Op::Log => unary()?.map(f64::ln),
        Op::Softmax => row_softmax(unary()?, false),
        Op::LogSoftmax => row_softmax(unary()?, true),
        Op::Expand { rows, cols } => {
            let a = unary()?;
            let (r, c) = a.shape();
            if (r != 1 && r != *rows) || (c != 1 && c != *cols) {
                return Err(shape_err(name, format!("{:?} -> {}x{}", a.shape(), rows, cols)));
            }
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..*rows {
                let src_r = if r == 1 { 0 } else { i };
                for j in 0..*cols {
                    out.push(a.get(src_r, if c == 1 { 0 } else { j }));
                }
            }
            Tensor::new(*rows, *cols, out)
        }
        Op::SumTo { rows, cols } => {
            let a = unary()?;
            let (r, c) = a.shape();
            if (*rows != 1 && *rows != r) || (*cols != 1 && *cols != c) {
                return Err(shape_err(name, format!("{:?} -> {}x{}", a.shape(), rows, cols)));
            }
            let mut out = Tensor::zeros(*rows, *cols);
            for i in 0..r {
                let dr = if *rows == 1 { 0 } else { i };
                for j in 0..c {
                    let dc = if *cols == 1 { 0 } else { j };
                    let v = out.get(dr, dc) + a.get(i, j);
                    out.set(dr, dc, v);
                }
            }
            out
        }
        Op::ConcatRows => {
            if xs.is_empty() {
                return Err(shape_err(name, "no inputs".into()));
            }
            let cols = xs[0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for x in xs {
                if x.cols() != cols {
                    return Err(shape_err(name, format!("cols {} vs {}", x.cols(), cols)));
                }
                rows += x.rows();
                data.extend_from_slice(x.data());
            }
            Tensor::new(rows, cols, data)
        }
        Op::ConcatCols => {
            if xs.is_empty() {
                return Err(shape_err(name, "no inputs".into()));
            }
            let rows = xs[0].rows();
            if let Some(x) = xs.iter().find(|x| x.rows() != rows) {
                return Err(shape_err(name, format!("rows {} vs {}", x.rows(), rows)));
            }
            let cols: usize = xs.iter().map(|x| x.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for x in xs {
                    data.extend_from_slice(x.row_slice(r));
                }
            }
            Tensor::new(rows, cols, data)
        }
        Op::SliceRows { start, len } => {
            let a = unary()?;
            if start + len > a.rows() {
                return Err(shape_err(name, format!("rows {}..{} of {}", start, start + len, a.rows())));
            }
            let c = a.cols();
            Tensor::new(*len, c, a.data()[start * c..(start + len) * c].to_vec())
        }
        Op::SliceCols { start, len } => {
            let a = unary()?;
            if start + len > a.cols() {
                return Err(shape_err(name, format!("cols {}..{} of {}", start, start + len, a.cols())));
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row_slice(r)[*start..start + len]);
            }
            Tensor::new(a.rows(), *len, data)
        }
        Op::PadRows { start, total } => {
            let a = unary()?;
            if start + a.rows() > *total {
                return Err(shape_err(name, format!("{} rows at {} into {}", a.rows(), start, total)));
            }
            let c = a.cols();
            let mut out = Tensor::zeros(*total, c);
            out.data_mut()[start * c..(start + a.rows()) * c].copy_from_slice(a.data());
            out
        }
        Op::PadCols { start, total } => {
            let a = unary()?;
            if start + a.cols() > *total {
                return Err(shape_err(name, format!("{} cols at {} into {}", a.cols(), start, total)));
            }
            let mut out = Tensor::zeros(a.rows(), *total);
            for r in 0..a.rows() {
                out.data_mut()[r * total + start..r * total + start + a.cols()]
                    .copy_from_slice(a.row_slice(r));
            }
            out
        }
        Op::Embedding(ids) => {
            let a = unary()?;
            let c = a.cols();
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids.iter() {
                if id >= a.rows() {
                    return Err(shape_err(name, format!("id {} out of {} rows", id, a.rows())));
                }
                data.extend_from_slice(a.row_slice(id));
            }
            Tensor::new(ids.len(), c, data)
        }
        Op::ScatterRows { ids, rows } => {
            let a = unary()?;
            if a.rows() != ids.len() {
                return Err(shape_err(name, format!("{} rows for {} ids", a.rows(), ids.len())));
            }
            let c = a.cols();
            let mut out = Tensor::zeros(*rows, c);
            for (i, &id) in ids.iter().enumerate() {
                if id >= *rows {
                    return Err(shape_err(name, format!("id {} out of {} rows", id, rows)));
                }
                let dst = &mut out.data_mut()[id * c..(id + 1) * c];
                for (d, s) in dst.iter_mut().zip(a.row_slice(i)) {
                    *d += s;
                }
            }
            out
        }
        Op::IndexSelect(ids) => {
            let a = unary()?;
            if let Some(&id) = ids.iter().find(|&&id| id >= a.cols()) {
                return Err(shape_err(name, format!("column {} out of {}", id, a.cols())));
            }
            let mut data = Vec::with_capacity(a.rows() * ids.len());
            for r in 0..a.rows() {
                let row = a.row_slice(r);
                data.extend(ids.iter().map(|&id| row[id]));
            }
            Tensor::new(a.rows(), ids.len(), data)
        }
        Op::ScatterCols { ids, cols } => {
            let a = unary()?;
            if a.cols() != ids.len() {
                return Err(shape_err(name, format!("{} cols for {} ids", a.cols(), ids.len())));
            }
            let mut out = Tensor::zeros(a.rows(), *cols);
            for r in 0..a.rows() {
                for (j, &id) in ids.iter().enumerate() {
                    if id >= *cols {
                        return Err(shape_err(name, format!("column {} out of {}", id, cols)));
                    }
                    let v = out.get(r, id) + a.get(r, j);
                    out.set(r, id, v);
                }
            }
            out
        }
        Op::StopGrad => unary()?.clone(),
    })
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.trainable.get(id.0).copied().unwrap_or(false)
    }

    /// Mark an existing node as a differentiation target.
    pub fn mark_trainable(&mut self, id: NodeId) {
        self.trainable[id.0] = true;
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value, grad: None });
        self.trainable.push(false);
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            compute(&op, &xs)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite { node: NodeId(self.nodes.len()), op: op.name() });
        }
        Ok(self.push_raw(op, inputs, value))
    }

    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push_raw(Op::Input(name.into()), Vec::new(), value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Const, Vec::new(), value)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push_raw(Op::Param, Vec::new(), value);
        self.trainable[id.0] = true;
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(c), vec![a])
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.push(Op::Pow(p), vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![a])
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Step, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![a])
    }

    pub fn expand(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.push(Op::Expand { rows, cols }, vec![a])
    }

    pub fn sum_to(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.push(Op::SumTo { rows, cols }, vec![a])
    }

    /// Sum of all elements, as a `1x1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.sum_to(a, 1, 1)
    }

    /// Mean of all elements, as a `1x1` node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows, parts.to_vec())
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols, parts.to_vec())
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { start, len }, vec![a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { start, len }, vec![a])
    }

    pub fn pad_rows(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        self.push(Op::PadRows { start, total }, vec![a])
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        self.push(Op::PadCols { start, total }, vec![a])
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.push(Op::Embedding(ids.into()), vec![table])
    }

    pub fn scatter_rows(&mut self, a: NodeId, ids: &[usize], rows: usize) -> Result<NodeId> {
        self.push(Op::ScatterRows { ids: ids.into(), rows }, vec![a])
    }

    pub fn index_select(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.push(Op::IndexSelect(ids.into()), vec![a])
    }

    pub fn scatter_cols(&mut self, a: NodeId, ids: &[usize], cols: usize) -> Result<NodeId> {
        self.push(Op::ScatterCols { ids: ids.into(), cols }, vec![a])
    }

    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::StopGrad, vec![a])
    }

    /// Add a row-vector bias to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let b = self.expand(bias, r, c)?;
        self.add(a, b)
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} targets for {} rows", targets.len(), rows)));
        }
        if targets.iter().any(|&t| t >= cols) {
            return Err(shape_err("cross_entropy", format!("target out of {} classes", cols)));
        }
        let logp = self.log_softmax(logits)?;
        let mut onehot = Tensor::zeros(rows, cols);
        for (r, &t) in targets.iter().enumerate() {
            onehot.set(r, t, -1.0 / rows as f64);
        }
        let w = self.constant(onehot);
        let picked = self.mul(logp, w)?;
        self.sum(picked)
    }

    /// Replay the graph with new input bindings and return `output`'s value.
    ///
    /// Every `Input` node must be bound. Parameters and constants keep their
    /// stored values.
    pub fn eval(&mut self, bindings: &HashMap<String, Tensor>, output: NodeId) -> Result<Tensor> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            match &op {
                Op::Input(name) => {
                    let v = bindings.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    self.nodes[i].value = v.clone();
                }
                Op::Param | Op::Const => {}
                _ => {
                    let value = {
                        let xs: Vec<&Tensor> =
                            self.nodes[i].inputs.iter().map(|j| &self.nodes[j.0].value).collect();
                        compute(&op, &xs)?
                    };
                    if !value.all_finite() {
                        return Err(Error::NonFinite { node: NodeId(i), op: op.name() });
                    }
                    self.nodes[i].value = value;
                }
            }
        }
        Ok(self.value(output).clone())
    }

    /// Reverse-mode gradient of scalar `output` with respect to `wrt`.
    ///
    /// The result is a node per entry of `wrt`. In [`GradMode::CreateGraph`] the
    /// backward computation is itself recorded in the graph, so calling `grad`
    /// again differentiates through it. Fan-out contributions are summed.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId], mode: GradMode) -> Result<Vec<NodeId>> {
        let (rows, cols) = self.shape(output);
        if rows * cols != 1 {
            return Err(Error::NonScalarOutput { node: output, rows, cols });
        }
        if let Some(&w) = wrt.iter().find(|w| !self.is_trainable(**w)) {
            return Err(Error::NotTrainable(w));
        }

        let end = output.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] && !self.nodes[i].op.is_leaf() {
                needs[i] = self.nodes[i].inputs.iter().any(|j| needs[j.0]);
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        if needs[output.0] {
            grads[output.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !needs[i] || self.nodes[i].op.is_leaf() {
                continue;
            }
            let contributions = self.vjp(NodeId(i), g, &needs)?;
            for (input, contrib) in contributions {
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(Tensor::zeros(r, c))
                }
            };
            let g = match mode {
                GradMode::CreateGraph => g,
                GradMode::Detached => self.stop_grad(g)?,
            };
            self.nodes[w.0].grad = Some(self.value(g).clone());
            out.push(g);
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `id` given upstream gradient `g`,
    /// expressed as new graph nodes. Only inputs flagged in `needs` are
    /// returned.
    fn vjp(&mut self, id: NodeId, g: NodeId, needs: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let node = &self.nodes[id.0];
        let op = node.op.clone();
        let inputs = node.inputs.clone();
        let need = |k: usize| needs[inputs[k].0];
        let mut out = Vec::with_capacity(inputs.len());
        match op {
            Op::Input(_) | Op::Param | Op::Const | Op::Step | Op::StopGrad => {}
            Op::Add => {
                for k in 0..2 {
                    if need(k) {
                        out.push((inputs[k], g));
                    }
                }
            }
            Op::Sub => {
                if need(0) {
                    out.push((inputs[0], g));
                }
                if need(1) {
                    let n = self.scale(g, -1.0)?;
                    out.push((inputs[1], n));
                }
            }
            Op::Mul => {
                if need(0) {
                    let d = self.mul(g, inputs[1])?;
                    out.push((inputs[0], d));
                }
                if need(1) {
                    let d = self.mul(g, inputs[0])?;
                    out.push((inputs[1], d));
                }
            }
            Op::MatMul => {
                if need(0) {
                    let bt = self.transpose(inputs[1])?;
                    let d = self.matmul(g, bt)?;
                    out.push((inputs[0], d));
                }
                if need(1) {
                    let at = self.transpose(inputs[0])?;
                    let d = self.matmul(at, g)?;
                    out.push((inputs[1], d));
                }
            }
            Op::Transpose => {
                let d = self.transpose(g)?;
                out.push((inputs[0], d));
            }
            Op::Scale(c) => {
                let d = self.scale(g, c)?;
                out.push((inputs[0], d));
            }
            Op::AddScalar(_) => out.push((inputs[0], g)),
            Op::Pow(p) => {
                if p != 0.0 {
                    let xp = self.pow(inputs[0], p - 1.0)?;
                    let gx = self.mul(g, xp)?;
                    let d = self.scale(gx, p)?;
                    out.push((inputs[0], d));
                }
            }
            Op::Relu => {
                let mask = self.step(inputs[0])?;
                let d = self.mul(g, mask)?;
                out.push((inputs[0], d));
            }
            Op::Tanh => {
                let yy = self.mul(id, id)?;
                let gyy = self.mul(g, yy)?;
                let d = self.sub(g, gyy)?;
                out.push((inputs[0], d));
            }
            Op::Exp => {
                let d = self.mul(g, id)?;
                out.push((inputs[0], d));
            }
            Op::Log => {
                let inv = self.pow(inputs[0], -1.0)?;
                let d = self.mul(g, inv)?;
                out.push((inputs[0], d));
            }
            Op::Softmax => {
                let (r, c) = self.shape(id);
                let gy = self.mul(g, id)?;
                let s = self.sum_to(gy, r, 1)?;
                let s = self.expand(s, r, c)?;
                let centered = self.sub(g, s)?;
                let d = self.mul(id, centered)?;
                out.push((inputs[0], d));
            }
            Op::LogSoftmax => {
                let (r, c) = self.shape(id);
                let p = self.exp(id)?;
                let s = self.sum_to(g, r, 1)?;
                let s = self.expand(s, r, c)?;
                let ps = self.mul(p, s)?;
                let d = self.sub(g, ps)?;
                out.push((inputs[0], d));
            }
            Op::Expand { .. } => {
                let (r, c) = self.shape(inputs[0]);
                let d = self.sum_to(g, r, c)?;
                out.push((inputs[0], d));
            }
            Op::SumTo { .. } => {
                let (r, c) = self.shape(inputs[0]);
                let d = self.expand(g, r, c)?;
                out.push((inputs[0], d));
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for (k, &inp) in inputs.iter().enumerate() {
                    let len = self.shape(inp).0;
                    if need(k) {
                        let d = self.slice_rows(g, offset, len)?;
                        out.push((inp, d));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols => {
                let mut offset = 0;
                for (k, &inp) in inputs.iter().enumerate() {
                    let len = self.shape(inp).1;
                    if need(k) {
                        let d = self.slice_cols(g, offset, len)?;
                        out.push((inp, d));
                    }
                    offset += len;
                }
            }
            Op::SliceRows { start, .. } => {
                let total = self.shape(inputs[0]).0;
                let d = self.pad_rows(g, start, total)?;
                out.push((inputs[0], d));
            }
            Op::SliceCols { start, .. } => {
                let total = self.shape(inputs[0]).1;
                let d = self.pad_cols(g, start, total)?;
                out.push((inputs[0], d));
            }
            Op::PadRows { start, .. } => {
                let len = self.shape(inputs[0]).0;
                let d = self.slice_rows(g, start, len)?;
                out.push((inputs[0], d));
            }
            Op::PadCols { start, .. } => {
                let len = self.shape(inputs[0]).1;
                let d = self.slice_cols(g, start, len)?;
                out.push((inputs[0], d));
            }
            Op::Embedding(ids) => {
                let rows = self.shape(inputs[0]).0;
                let d = self.push(Op::ScatterRows { ids, rows }, vec![g])?;
                out.push((inputs[0], d));
            }
            Op::ScatterRows { ids, .. } => {
                let d = self.push(Op::Embedding(ids), vec![g])?;
                out.push((inputs[0], d));
            }
            Op::IndexSelect(ids) => {
                let cols = self.shape(inputs[0]).1;
                let d = self.push(Op::ScatterCols { ids, cols }, vec![g])?;
                out.push((inputs[0], d));
            }
            Op::ScatterCols { ids, .. } => {
                let d = self.push(Op::IndexSelect(ids), vec![g])?;
                out.push((inputs[0], d));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_derivatives() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let dx = g.grad(y, &[x], GradMode::CreateGraph).unwrap()[0];
        assert_eq!(g.value(dx).item(), 6.0);
        let ddx = g.grad(dx, &[x], GradMode::CreateGraph).unwrap()[0];
        assert_eq!(g.value(ddx).item(), 2.0);
    }

    #[test]
    fn fourth_power_second_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let x2 = g.mul(x, x).unwrap();
        let x4 = g.mul(x2, x2).unwrap();
        let d1 = g.grad(x4, &[x], GradMode::CreateGraph).unwrap()[0];
        assert!((g.value(d1).item() - 32.0).abs() < 1e-12);
        let d2 = g.grad(d1, &[x], GradMode::CreateGraph).unwrap()[0];
        assert!((g.value(d2).item() - 48.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln4() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.7; 4]));
        for label in 0..4 {
            let ce = g.cross_entropy(x, &[label]).unwrap();
            assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let a = g.scale(x, 2.0).unwrap();
        let b = g.scale(x, 5.0).unwrap();
        let c = g.add(a, b).unwrap();
        let s = g.add(c, x).unwrap();
        let dx = g.grad(s, &[x], GradMode::Detached).unwrap()[0];
        assert_eq!(g.value(dx).item(), 8.0);
        assert_eq!(g.node(x).grad.as_ref().unwrap().item(), 8.0);
    }

    #[test]
    fn detached_gradient_has_no_second_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let dx = g.grad(y, &[x], GradMode::Detached).unwrap()[0];
        let ddx = g.grad(dx, &[x], GradMode::CreateGraph).unwrap()[0];
        assert_eq!(g.value(ddx).item(), 0.0);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let m = g.matmul(a, b).unwrap();
        let p = g.param(Tensor::scalar(1.0));
        assert!(matches!(g.grad(m, &[p], GradMode::Detached), Err(Error::NonScalarOutput { .. })));
        let s = g.sum(m).unwrap();
        assert!(matches!(g.grad(s, &[a], GradMode::Detached), Err(Error::NotTrainable(_))));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.log(z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn eval_replays_with_new_bindings() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let mut b = HashMap::new();
        b.insert("x".to_string(), Tensor::scalar(4.0));
        assert_eq!(g.eval(&b, y).unwrap().item(), 16.0);
        let first = g.eval(&b, y).unwrap();
        let second = g.eval(&b, y).unwrap();
        assert_eq!(first.data()[0].to_bits(), second.data()[0].to_bits());
        assert!(matches!(g.eval(&HashMap::new(), y), Err(Error::UnboundInput(_))));
    }
}
