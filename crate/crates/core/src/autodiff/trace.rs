//! Tape-based reverse-mode differentiation.
//!
//! Every primitive's vector-Jacobian product is expressed with other traced
//! primitives. With `create_graph` the backward pass is recorded on the same
//! trace, so gradients are ordinary nodes and can be differentiated again.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Prim {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sqrt,
    Square,
    /// `1/x`, defined as 0 at `x == 0`.
    RecipSafe,
    Relu,
    /// Heaviside mask `x > 0`; not differentiable.
    Step,
    MatMul { ta: bool, tb: bool },
    BroadcastRows(usize),
    SumRows,
    BroadcastCols(usize),
    SumCols,
    /// Row-wise maximum; not differentiable.
    MaxCols,
    SumAll,
    BroadcastScalar(Vec<usize>),
    Reshape(Vec<usize>),
    ConcatCols,
    SliceCols { start: usize, len: usize },
    PadCols { start: usize, total: usize },
    Gather(Arc<[usize]>),
    Scatter { index: Arc<[usize]>, classes: usize },
    Im2Col(ConvGeom),
    Col2Im(ConvGeom),
    SegmentPool(PoolGeom),
    SegmentUnpool(PoolGeom),
}

impl Prim {
    fn name(&self) -> &'static str {
        match self {
            Prim::Leaf => "leaf",
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::Neg => "neg",
            Prim::Scale(_) => "scale",
            Prim::AddScalar(_) => "add_scalar",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Sqrt => "sqrt",
            Prim::Square => "square",
            Prim::RecipSafe => "recip",
            Prim::Relu => "relu",
            Prim::Step => "step",
            Prim::MatMul { .. } => "matmul",
            Prim::BroadcastRows(_) => "broadcast_rows",
            Prim::SumRows => "sum_rows",
            Prim::BroadcastCols(_) => "broadcast_cols",
            Prim::SumCols => "sum_cols",
            Prim::MaxCols => "max_cols",
            Prim::SumAll => "sum",
            Prim::BroadcastScalar(_) => "broadcast_scalar",
            Prim::Reshape(_) => "reshape",
            Prim::ConcatCols => "concat",
            Prim::SliceCols { .. } => "slice_cols",
            Prim::PadCols { .. } => "pad_cols",
            Prim::Gather(_) => "gather",
            Prim::Scatter { .. } => "scatter",
            Prim::Im2Col(_) => "im2col",
            Prim::Col2Im(_) => "col2im",
            Prim::SegmentPool(_) => "segment_pool",
            Prim::SegmentUnpool(_) => "segment_unpool",
        }
    }

    fn differentiable(&self) -> bool {
        !matches!(self, Prim::Step | Prim::MaxCols)
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0])),
    }
}

/// Forward evaluation of one primitive on concrete inputs.
fn eval(prim: &Prim, inputs: &[&Tensor]) -> Result<Tensor> {
    let op = prim.name();
    let unary = |f: fn(f64) -> f64| inputs[0].map(f);
    let out = match prim {
        Prim::Leaf => unreachable!("leaves carry their own value"),
        Prim::Add => inputs[0].zip_map(inputs[1], op, |a, b| a + b)?,
        Prim::Sub => inputs[0].zip_map(inputs[1], op, |a, b| a - b)?,
        Prim::Mul => inputs[0].zip_map(inputs[1], op, |a, b| a * b)?,
        Prim::Div => inputs[0].zip_map(inputs[1], op, |a, b| a / b)?,
        Prim::Neg => unary(|v| -v),
        Prim::Scale(c) => {
            let c = *c;
            inputs[0].map(|v| v * c)
        }
        Prim::AddScalar(c) => {
            let c = *c;
            inputs[0].map(|v| v + c)
        }
        Prim::Exp => unary(f64::exp),
        Prim::Log => unary(f64::ln),
        Prim::Sqrt => unary(f64::sqrt),
        Prim::Square => unary(|v| v * v),
        Prim::RecipSafe => unary(|v| if v == 0.0 { 0.0 } else { 1.0 / v }),
        Prim::Relu => unary(|v| if v > 0.0 { v } else { 0.0 }),
        Prim::Step => unary(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Prim::MatMul { ta, tb } => {
            let (ar, ac) = matrix_dims(op, inputs[0])?;
            let (br, bc) = matrix_dims(op, inputs[1])?;
            let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if *tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(Error::shape(op, inputs[0].shape(), inputs[1].shape()));
            }
            let data = kernels::matmul(inputs[0].data(), inputs[1].data(), m, k, n, *ta, *tb);
            Tensor::from_parts(vec![m, n], data)
        }
        Prim::BroadcastRows(rows) => {
            if inputs[0].shape().len() != 1 {
                return Err(Error::shape(op, inputs[0].shape(), &[0]));
            }
            let n = inputs[0].len();
            Tensor::from_parts(vec![*rows, n], kernels::broadcast_rows(inputs[0].data(), *rows))
        }
        Prim::SumRows => {
            let (r, c) = matrix_dims(op, inputs[0])?;
            Tensor::from_parts(vec![c], kernels::sum_rows(inputs[0].data(), r, c))
        }
        Prim::BroadcastCols(cols) => {
            if inputs[0].shape().len() != 1 {
                return Err(Error::shape(op, inputs[0].shape(), &[0]));
            }
            let r = inputs[0].len();
            Tensor::from_parts(vec![r, *cols], kernels::broadcast_cols(inputs[0].data(), *cols))
        }
        Prim::SumCols => {
            let (r, c) = matrix_dims(op, inputs[0])?;
            Tensor::from_parts(vec![r], kernels::sum_cols(inputs[0].data(), c))
        }
        Prim::MaxCols => {
            let (r, c) = matrix_dims(op, inputs[0])?;
            Tensor::from_parts(vec![r], kernels::max_cols(inputs[0].data(), c))
        }
        Prim::SumAll => Tensor::scalar(inputs[0].data().iter().sum()),
        Prim::BroadcastScalar(shape) => {
            if inputs[0].len() != 1 {
                return Err(Error::shape(op, inputs[0].shape(), &[1]));
            }
            Tensor::full(shape, inputs[0].data()[0])
        }
        Prim::Reshape(shape) => inputs[0].reshaped(shape)?,
        Prim::ConcatCols => {
            let (ra, ca) = matrix_dims(op, inputs[0])?;
            let (rb, cb) = matrix_dims(op, inputs[1])?;
            if ra != rb {
                return Err(Error::shape(op, inputs[0].shape(), inputs[1].shape()));
            }
            Tensor::from_parts(
                vec![ra, ca + cb],
                kernels::concat_cols(inputs[0].data(), inputs[1].data(), ra, ca, cb),
            )
        }
        Prim::SliceCols { start, len } => {
            let (r, c) = matrix_dims(op, inputs[0])?;
            if start + len > c {
                return Err(Error::shape(op, inputs[0].shape(), &[r, start + len]));
            }
            Tensor::from_parts(vec![r, *len], kernels::slice_cols(inputs[0].data(), r, c, *start, *len))
        }
        Prim::PadCols { start, total } => {
            let (r, c) = matrix_dims(op, inputs[0])?;
            if start + c > *total {
                return Err(Error::shape(op, inputs[0].shape(), &[r, *total]));
            }
            Tensor::from_parts(vec![r, *total], kernels::pad_cols(inputs[0].data(), r, c, *start, *total))
        }
        Prim::Gather(index) => {
            let (r, c) = matrix_dims(op, inputs[0])?;
            if r != index.len() || index.iter().any(|&i| i >= c) {
                return Err(Error::shape(op, inputs[0].shape(), &[index.len()]));
            }
            Tensor::from_parts(vec![r], kernels::gather(inputs[0].data(), c, index))
        }
        Prim::Scatter { index, classes } => {
            if inputs[0].shape() != [index.len()] || index.iter().any(|&i| i >= *classes) {
                return Err(Error::shape(op, inputs[0].shape(), &[index.len()]));
            }
            Tensor::from_parts(
                vec![index.len(), *classes],
                kernels::scatter(inputs[0].data(), *classes, index),
            )
        }
        Prim::Im2Col(g) => {
            let want = [g.batch, g.channels, g.len];
            if inputs[0].shape() != want {
                return Err(Error::shape(op, inputs[0].shape(), &want));
            }
            Tensor::from_parts(vec![g.rows(), g.cols()], kernels::im2col(inputs[0].data(), g))
        }
        Prim::Col2Im(g) => {
            let want = [g.rows(), g.cols()];
            if inputs[0].shape() != want {
                return Err(Error::shape(op, inputs[0].shape(), &want));
            }
            Tensor::from_parts(vec![g.batch, g.channels, g.len], kernels::col2im(inputs[0].data(), g))
        }
        Prim::SegmentPool(g) => {
            let want = [g.batch * g.len, g.feat];
            if inputs[0].shape() != want {
                return Err(Error::shape(op, inputs[0].shape(), &want));
            }
            Tensor::from_parts(vec![g.batch, g.segments * g.feat], kernels::segment_pool(inputs[0].data(), g))
        }
        Prim::SegmentUnpool(g) => {
            let want = [g.batch, g.segments * g.feat];
            if inputs[0].shape() != want {
                return Err(Error::shape(op, inputs[0].shape(), &want));
            }
            Tensor::from_parts(vec![g.batch * g.len, g.feat], kernels::segment_unpool(inputs[0].data(), g))
        }
    };
    Ok(out)
}

struct Node {
    prim: Prim,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// One recorded operation, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub op: &'static str,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

/// Gradients of a scalar with respect to a set of leaves, keyed by leaf id.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&leaf.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

/// An append-only computation trace. Single-threaded; build one per thread.
pub struct Trace {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            prim: Prim::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var {
            trace: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, prim: Prim, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = eval(&prim, &vals)?;
            let rg = self.grad_enabled.get()
                && prim.differentiable()
                && inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, rg)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            prim,
            inputs: inputs.iter().map(|v| v.id).collect(),
            value,
            requires_grad,
        });
        Ok(Var {
            trace: self,
            id: nodes.len() - 1,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(id, n)| Record {
                op: n.prim.name(),
                inputs: n.inputs.clone(),
                output: id,
            })
            .collect()
    }

    /// Re-evaluate every recorded operation in order, substituting the given
    /// leaf values. Returns the value of every node.
    pub fn replay(&self, overrides: &[(NodeId, Tensor)]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            let v = match node.prim {
                Prim::Leaf => overrides
                    .iter()
                    .find(|(k, _)| *k == id)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    eval(&node.prim, &ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Exact reverse-mode gradients of `scalar` with respect to `leaves`.
    /// Leaves not connected to `scalar` receive zeros.
    pub fn backward(&self, scalar: Var<'_>, leaves: &[Var<'_>]) -> Result<GradientMap> {
        let adj = self.adjoints(scalar, leaves, false)?;
        let nodes = self.nodes.borrow();
        let mut grads = BTreeMap::new();
        for leaf in leaves {
            let g = match adj[leaf.id] {
                Some(g) => nodes[g].value.clone(),
                None => Tensor::zeros(nodes[leaf.id].value.shape()),
            };
            grads.insert(leaf.id, g);
        }
        Ok(GradientMap { grads })
    }

    /// Like [`Trace::backward`] but the backward pass is itself traced, so
    /// the returned gradients can feed further differentiable computation.
    pub fn grad_with_graph<'t>(&'t self, scalar: Var<'t>, leaves: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let adj = self.adjoints(scalar, leaves, true)?;
        Ok(leaves
            .iter()
            .map(|leaf| match adj[leaf.id] {
                Some(g) => Var { trace: self, id: g },
                None => self.constant(Tensor::zeros(&leaf.shape())),
            })
            .collect())
    }

    fn adjoints(&self, scalar: Var<'_>, leaves: &[Var<'_>], create_graph: bool) -> Result<Vec<Option<NodeId>>> {
        let out = scalar.id;
        let needed = {
            let nodes = self.nodes.borrow();
            if nodes[out].value.len() != 1 {
                return Err(Error::shape("backward", nodes[out].value.shape(), &[1]));
            }
            let mut needed = vec![false; out + 1];
            for leaf in leaves {
                if leaf.id <= out {
                    needed[leaf.id] = true;
                }
            }
            let targets = needed.clone();
            for id in 0..=out {
                let n = &nodes[id];
                if !needed[id] && n.requires_grad {
                    needed[id] = n.inputs.iter().any(|&i| needed[i]);
                }
            }
            (needed, targets)
        };
        let (needed, targets) = needed;

        let mut adj: Vec<Option<NodeId>> = vec![None; out + 1];
        if !needed[out] {
            return Ok(adj);
        }

        let previous = self.grad_enabled.replace(create_graph);
        let result = (|| -> Result<()> {
            adj[out] = Some(self.constant(Tensor::ones(&[1])).id);
            for id in (0..=out).rev() {
                let Some(g) = adj[id] else { continue };
                let (prim, inputs) = {
                    let nodes = self.nodes.borrow();
                    if matches!(nodes[id].prim, Prim::Leaf) {
                        continue;
                    }
                    (nodes[id].prim.clone(), nodes[id].inputs.clone())
                };
                let want: Vec<bool> = inputs.iter().map(|&i| needed[i]).collect();
                if !want.iter().any(|&w| w) {
                    continue;
                }
                let g = Var { trace: self, id: g };
                let ins: Vec<Var<'_>> = inputs.iter().map(|&i| Var { trace: self, id: i }).collect();
                let out_var = Var { trace: self, id };
                let contribs = vjp(&prim, &ins, out_var, g, &want)?;
                for (k, c) in contribs.into_iter().enumerate() {
                    if let Some(c) = c {
                        let target = inputs[k];
                        adj[target] = Some(match adj[target] {
                            None => c.id,
                            Some(prev) => Var { trace: self, id: prev }.add(c)?.id,
                        });
                    }
                }
                if id != out && !targets[id] {
                    // Interior adjoints are no longer needed once propagated.
                    adj[id] = None;
                }
            }
            Ok(())
        })();
        self.grad_enabled.set(previous);
        result?;
        Ok(adj)
    }
}

/// Vector-Jacobian products, one entry per input (None when not wanted).
fn vjp<'t>(prim: &Prim, ins: &[Var<'t>], out: Var<'t>, g: Var<'t>, want: &[bool]) -> Result<Vec<Option<Var<'t>>>> {
    let w = |k: usize| want.get(k).copied().unwrap_or(false);
    let one = |v: Result<Var<'t>>| -> Result<Vec<Option<Var<'t>>>> { Ok(vec![Some(v?)]) };
    match prim {
        Prim::Leaf | Prim::Step | Prim::MaxCols => Ok(vec![None; ins.len()]),
        Prim::Add => Ok(vec![w(0).then_some(g), w(1).then_some(g)]),
        Prim::Sub => Ok(vec![w(0).then_some(g), if w(1) { Some(g.neg()?) } else { None }]),
        Prim::Mul => Ok(vec![
            if w(0) { Some(g.mul(ins[1])?) } else { None },
            if w(1) { Some(g.mul(ins[0])?) } else { None },
        ]),
        Prim::Div => Ok(vec![
            if w(0) { Some(g.div(ins[1])?) } else { None },
            if w(1) { Some(g.mul(out)?.div(ins[1])?.neg()?) } else { None },
        ]),
        Prim::Neg => one(g.neg()),
        Prim::Scale(c) => one(g.scale(*c)),
        Prim::AddScalar(_) => Ok(vec![Some(g)]),
        Prim::Exp => one(g.mul(out)),
        Prim::Log => one(g.div(ins[0])),
        Prim::Sqrt => one(g.mul(out.recip_safe()?)?.scale(0.5)),
        Prim::Square => one(g.mul(ins[0])?.scale(2.0)),
        Prim::RecipSafe => one(g.mul(out.square()?)?.neg()),
        Prim::Relu => one(g.mul(ins[0].step()?)),
        Prim::MatMul { ta, tb } => {
            let (a, b) = (ins[0], ins[1]);
            let (ga, gb) = match (ta, tb) {
                (false, false) => (g.matmul_t(b, false, true), a.matmul_t(g, true, false)),
                (false, true) => (g.matmul_t(b, false, false), g.matmul_t(a, true, false)),
                (true, false) => (b.matmul_t(g, false, true), a.matmul_t(g, false, false)),
                (true, true) => (b.matmul_t(g, true, true), g.matmul_t(a, true, true)),
            };
            Ok(vec![
                if w(0) { Some(ga?) } else { None },
                if w(1) { Some(gb?) } else { None },
            ])
        }
        Prim::BroadcastRows(_) => one(g.sum_rows()),
        Prim::SumRows => {
            let rows = ins[0].shape()[0];
            one(g.broadcast_rows(rows))
        }
        Prim::BroadcastCols(_) => one(g.sum_cols()),
        Prim::SumCols => {
            let cols = ins[0].shape()[1];
            one(g.broadcast_cols(cols))
        }
        Prim::SumAll => one(g.broadcast_scalar(&ins[0].shape())),
        Prim::BroadcastScalar(_) => one(g.sum()),
        Prim::Reshape(_) => one(g.reshape(&ins[0].shape())),
        Prim::ConcatCols => {
            let ca = ins[0].shape()[1];
            let cb = ins[1].shape()[1];
            Ok(vec![
                if w(0) { Some(g.slice_cols(0, ca)?) } else { None },
                if w(1) { Some(g.slice_cols(ca, cb)?) } else { None },
            ])
        }
        Prim::SliceCols { start, .. } => {
            let total = ins[0].shape()[1];
            one(g.pad_cols(*start, total))
        }
        Prim::PadCols { start, .. } => {
            let len = ins[0].shape()[1];
            one(g.slice_cols(*start, len))
        }
        Prim::Gather(index) => {
            let classes = ins[0].shape()[1];
            one(g.trace.push(
                Prim::Scatter {
                    index: Arc::clone(index),
                    classes,
                },
                &[g],
            ))
        }
        Prim::Scatter { index, .. } => one(g.trace.push(Prim::Gather(Arc::clone(index)), &[g])),
        Prim::Im2Col(geom) => one(g.col2im(*geom)),
        Prim::Col2Im(geom) => one(g.im2col(*geom)),
        Prim::SegmentPool(geom) => one(g.segment_unpool(*geom)),
        Prim::SegmentUnpool(geom) => one(g.segment_pool(*geom)),
    }
}

/// Handle to a node of a [`Trace`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    trace: &'t Trace,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn trace(&self) -> &'t Trace {
        self.trace
    }

    pub fn value(&self) -> Tensor {
        self.trace.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.trace.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.trace.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, prim: Prim) -> Result<Var<'t>> {
        self.trace.push(prim, &[self])
    }

    fn binary(self, prim: Prim, other: Var<'t>) -> Result<Var<'t>> {
        self.trace.push(prim, &[self, other])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Prim::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Prim::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Prim::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Prim::Div, other)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Prim::Neg)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Prim::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Prim::AddScalar(c))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Prim::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Prim::Log)
    }

    /// Square root; its gradient is defined as 0 where the radicand is 0.
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Prim::Sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Prim::Square)
    }

    pub fn recip_safe(self) -> Result<Var<'t>> {
        self.unary(Prim::RecipSafe)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Prim::Relu)
    }

    pub fn step(self) -> Result<Var<'t>> {
        self.unary(Prim::Step)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.binary(Prim::MatMul { ta, tb }, other)
    }

    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t>> {
        self.unary(Prim::BroadcastRows(rows))
    }

    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.unary(Prim::SumRows)
    }

    pub fn broadcast_cols(self, cols: usize) -> Result<Var<'t>> {
        self.unary(Prim::BroadcastCols(cols))
    }

    pub fn sum_cols(self) -> Result<Var<'t>> {
        self.unary(Prim::SumCols)
    }

    pub fn max_cols(self) -> Result<Var<'t>> {
        self.unary(Prim::MaxCols)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Prim::SumAll)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.trace.nodes.borrow()[self.id].value.len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn broadcast_scalar(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Prim::BroadcastScalar(shape.to_vec()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Prim::Reshape(shape.to_vec()))
    }

    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Prim::ConcatCols, other)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Prim::SliceCols { start, len })
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Result<Var<'t>> {
        self.unary(Prim::PadCols { start, total })
    }

    /// Picks `self[r, index[r]]` for every row.
    pub fn gather(self, index: &[usize]) -> Result<Var<'t>> {
        self.unary(Prim::Gather(index.into()))
    }

    pub fn im2col(self, geom: ConvGeom) -> Result<Var<'t>> {
        self.unary(Prim::Im2Col(geom))
    }

    pub fn col2im(self, geom: ConvGeom) -> Result<Var<'t>> {
        self.unary(Prim::Col2Im(geom))
    }

    pub fn segment_pool(self, geom: PoolGeom) -> Result<Var<'t>> {
        self.unary(Prim::SegmentPool(geom))
    }

    pub fn segment_unpool(self, geom: PoolGeom) -> Result<Var<'t>> {
        self.unary(Prim::SegmentUnpool(geom))
    }

    /// Adds a `[n]` vector to every row of a `[m, n]` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let rows = self.shape()[0];
        self.add(row.broadcast_rows(rows)?)
    }

    /// Row-wise softmax of a `[m, n]` matrix.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let cols = self.shape()[1];
        let shifted = self.sub(self.max_cols()?.broadcast_cols(cols)?)?;
        let e = shifted.exp()?;
        e.div(e.sum_cols()?.broadcast_cols(cols)?)
    }

    /// Row-wise log-softmax, shifted by the (constant) row maximum for stability.
    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let cols = self.shape()[1];
        let shifted = self.sub(self.max_cols()?.broadcast_cols(cols)?)?;
        let lse = shifted.exp()?.sum_cols()?.log()?;
        shifted.sub(lse.broadcast_cols(cols)?)
    }

    /// Stride-1 1D convolution of `self: [B, C, L]` with `weight: [O, C, K]`
    /// and optional `bias: [O]`. The result is laid out time-major as
    /// `[B * L_out, O]` (row `b * L_out + t`).
    pub fn conv1d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeom) -> Result<Var<'t>> {
        let ws = weight.shape();
        if ws.len() != 3 || ws[1] != geom.channels || ws[2] != geom.kernel {
            return Err(Error::shape("conv1d", &self.shape(), &ws));
        }
        let w2 = weight.reshape(&[ws[0], ws[1] * ws[2]])?;
        let y = self.im2col(geom)?.matmul_t(w2, false, true)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    /// Batch normalization of a `[N, F]` matrix over its rows using the batch
    /// mean and biased variance. Returns the output plus the batch statistics.
    pub fn batch_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Tensor, Tensor)> {
        let shape = self.shape();
        if shape.len() != 2 || gamma.shape() != [shape[1]] || beta.shape() != [shape[1]] {
            return Err(Error::shape("batch_norm", &shape, &gamma.shape()));
        }
        let rows = shape[0];
        let inv_n = 1.0 / rows as f64;
        let mean = self.sum_rows()?.scale(inv_n)?;
        let centered = self.sub(mean.broadcast_rows(rows)?)?;
        let var = centered.square()?.sum_rows()?.scale(inv_n)?;
        let inv_std = var.add_scalar(eps)?.sqrt()?.recip_safe()?;
        let y = centered
            .mul(inv_std.mul(gamma)?.broadcast_rows(rows)?)?
            .add(beta.broadcast_rows(rows)?)?;
        Ok((y, mean.value(), var.value()))
    }
}
