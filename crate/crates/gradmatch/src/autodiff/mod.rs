//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! The backward pass emits ordinary graph nodes (reverse-over-reverse), so a
//! gradient produced with `create_graph = true` is itself a differentiable
//! node. That is the mechanism behind the meta-gradient of the matching loss
//! with respect to the synthetic images: the loss is built from gradient
//! nodes, and differentiating it sweeps through their backward construction.
//!
//! A [`Graph`] is an append-only tape confined to one thread; node parents
//! always precede their children, so tape order is a topological order and
//! the graph is acyclic by construction.

pub mod check;
pub(crate) mod conv;
mod ops;

pub use ops::softmax_cross_entropy;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Operation record: kind plus parent node ids and captured attributes.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Recip(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    BroadcastScalar(usize),
    SumAxis1(usize),
    BroadcastAxis1(usize),
    SumRows(usize),
    BroadcastRows(usize),
    SliceRows(usize, usize),
    PadRows(usize, usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ConvDx { gy: usize, w: usize, stride: usize, pad: usize },
    ConvDw { x: usize, gy: usize, stride: usize, pad: usize },
    AvgPool(usize, usize),
    AvgUnpool(usize, usize),
    SumChannels(usize),
    BroadcastChannels(usize),
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(usize)) {
        match *self {
            Op::Leaf => {}
            Op::Scale(a, _)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::BroadcastScalar(a)
            | Op::SumAxis1(a)
            | Op::BroadcastAxis1(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SliceRows(a, _)
            | Op::PadRows(a, _)
            | Op::AvgPool(a, _)
            | Op::AvgUnpool(a, _)
            | Op::SumChannels(a)
            | Op::BroadcastChannels(a) => f(a),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::Conv2d { x: a, w: b, .. }
            | Op::ConvDx { gy: a, w: b, .. }
            | Op::ConvDw { x: a, gy: b, .. } => {
                f(a);
                f(b);
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Clones share the same tape.
#[derive(Clone)]
pub struct Graph {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// New differentiation root: a tensor entering the graph.
    pub fn leaf(&self, tensor: Tensor, requires_grad: bool) -> Result<Var> {
        tensor.assert_finite("leaf")?;
        Ok(self.push_unchecked(tensor, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor, false)
    }

    pub fn scalar(&self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    pub(crate) fn push(
        &self,
        tensor: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        tensor.assert_finite(name)?;
        Ok(self.push_unchecked(tensor, op, requires_grad))
    }

    fn push_unchecked(&self, tensor: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions) {
            let next = nodes.len();
            op.for_each_parent(|p| debug_assert!(p < next, "parent {} >= id {}", p, next));
        }
        nodes.push(Node {
            tensor,
            op,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn tensor_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].tensor.clone()
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn var(&self, id: usize) -> Var {
        debug_assert!(id < self.len());
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Verify that every node's parents precede it on the tape.
    pub fn check_acyclic(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().all(|(id, n)| {
            let mut ok = true;
            n.op.for_each_parent(|p| ok &= p < id);
            ok
        })
    }
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Forward value (cheap: shares storage).
    pub fn value(&self) -> Tensor {
        self.graph.tensor_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Scalar value; panics if not a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Fresh constant leaf holding this node's value, cut off from the graph.
    pub fn detach(&self) -> Result<Var> {
        self.graph.constant(self.value())
    }

    pub(crate) fn same_graph_as(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.graph.same_graph(&other.graph) {
            Ok(())
        } else {
            Err(Error::Graph(format!("{op}: operands belong to different graphs")))
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, shape {:?})", self.id, self.value().shape())
    }
}

/// Emit partial-derivative nodes of `id`'s op into `sink(parent, partial)`.
/// `want` filters parents so inactive branches cost nothing.
fn emit_partials(
    g: &Graph,
    id: usize,
    op: &Op,
    gy: &Var,
    want: &dyn Fn(usize) -> bool,
    sink: &mut dyn FnMut(usize, Var) -> Result<()>,
) -> Result<()> {
    let v = |pid: usize| g.var(pid);
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if want(a) {
                sink(a, gy.clone())?;
            }
            if want(b) {
                sink(b, gy.clone())?;
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                sink(a, gy.clone())?;
            }
            if want(b) {
                sink(b, gy.scale(-1.0)?)?;
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                sink(a, gy.mul(&v(b))?)?;
            }
            if want(b) {
                sink(b, gy.mul(&v(a))?)?;
            }
        }
        Op::Scale(a, c) => {
            if want(a) {
                sink(a, gy.scale(c)?)?;
            }
        }
        Op::Recip(a) => {
            if want(a) {
                let y = g.var(id);
                sink(a, gy.mul(&y)?.mul(&y)?.scale(-1.0)?)?;
            }
        }
        Op::Exp(a) => {
            if want(a) {
                sink(a, gy.mul(&g.var(id))?)?;
            }
        }
        Op::Log(a) => {
            if want(a) {
                sink(a, gy.mul(&v(a).recip()?)?)?;
            }
        }
        Op::Sqrt(a) => {
            if want(a) {
                sink(a, gy.mul(&g.var(id).recip()?)?.scale(0.5)?)?;
            }
        }
        Op::Relu(a) => {
            if want(a) {
                // Subgradient at 0 is 0: strict positivity mask.
                let mask = g.constant(v(a).value().map(|x| if x > 0.0 { 1.0 } else { 0.0 }))?;
                sink(a, gy.mul(&mask)?)?;
            }
        }
        Op::Matmul(a, b) => {
            if want(a) {
                sink(a, gy.matmul(&v(b).transpose()?)?)?;
            }
            if want(b) {
                sink(b, v(a).transpose()?.matmul(gy)?)?;
            }
        }
        Op::Transpose(a) => {
            if want(a) {
                sink(a, gy.transpose()?)?;
            }
        }
        Op::Reshape(a) => {
            if want(a) {
                sink(a, gy.reshape(v(a).value().shape().to_vec())?)?;
            }
        }
        Op::Sum(a) => {
            if want(a) {
                sink(a, gy.broadcast_to(v(a).value().shape())?)?;
            }
        }
        Op::BroadcastScalar(a) => {
            if want(a) {
                sink(a, gy.sum()?)?;
            }
        }
        Op::SumAxis1(a) => {
            if want(a) {
                sink(a, gy.broadcast_axis1(v(a).value().shape()[1])?)?;
            }
        }
        Op::BroadcastAxis1(a) => {
            if want(a) {
                sink(a, gy.sum_axis1()?)?;
            }
        }
        Op::SumRows(a) => {
            if want(a) {
                sink(a, gy.broadcast_rows(v(a).value().shape()[0])?)?;
            }
        }
        Op::BroadcastRows(a) => {
            if want(a) {
                sink(a, gy.sum_rows()?)?;
            }
        }
        Op::SliceRows(a, start) => {
            if want(a) {
                sink(a, gy.pad_rows(v(a).value().shape()[0], start)?)?;
            }
        }
        Op::PadRows(a, start) => {
            if want(a) {
                let rows = v(a).value().shape()[0];
                sink(a, gy.slice_rows(start, start + rows)?)?;
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            if want(x) {
                sink(x, gy.conv2d_grad_input(&v(w), stride, pad, v(x).value().shape())?)?;
            }
            if want(w) {
                sink(w, v(x).conv2d_grad_kernel(gy, stride, pad, v(w).value().shape())?)?;
            }
        }
        Op::ConvDx { gy: gp, w, stride, pad } => {
            // Node value u has image shape; incoming gradient gu likewise.
            if want(gp) {
                sink(gp, gy.conv2d(&v(w), stride, pad)?)?;
            }
            if want(w) {
                sink(w, gy.conv2d_grad_kernel(&v(gp), stride, pad, v(w).value().shape())?)?;
            }
        }
        Op::ConvDw { x, gy: gp, stride, pad } => {
            // Node value has kernel shape; incoming gradient gv likewise.
            if want(x) {
                sink(x, v(gp).conv2d_grad_input(gy, stride, pad, v(x).value().shape())?)?;
            }
            if want(gp) {
                sink(gp, v(x).conv2d(gy, stride, pad)?)?;
            }
        }
        Op::AvgPool(a, k) => {
            if want(a) {
                sink(a, gy.avg_unpool(k, v(a).value().shape())?)?;
            }
        }
        Op::AvgUnpool(a, k) => {
            if want(a) {
                sink(a, gy.avg_pool2d(k)?)?;
            }
        }
        Op::SumChannels(a) => {
            if want(a) {
                let s = v(a).value().shape().to_vec();
                sink(a, gy.broadcast_channels(s[0], s[2], s[3])?)?;
            }
        }
        Op::BroadcastChannels(a) => {
            if want(a) {
                sink(a, gy.sum_channels()?)?;
            }
        }
    }
    Ok(())
}

/// Reverse-mode gradients of a scalar `output` with respect to `inputs`.
///
/// With `create_graph = true` the returned nodes stay wired into the tape and
/// can be differentiated again; with `false` they are detached constants.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    let g = output.graph().clone();
    for v in inputs {
        v.same_graph_as(output, "grad")?;
    }
    if output.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad output must be scalar, got shape {:?}",
            output.value().shape()
        )));
    }
    let out_id = output.id();

    // Ancestors of the output, via parent edges.
    let mut reach = vec![false; out_id + 1];
    reach[out_id] = true;
    for id in (0..=out_id).rev() {
        if reach[id] {
            g.op_of(id).for_each_parent(|p| reach[p] = true);
        }
    }
    for v in inputs {
        if v.id() > out_id || !reach[v.id()] {
            return Err(Error::Graph(format!(
                "grad input #{} is not reachable from the output",
                v.id()
            )));
        }
    }

    // Nodes from which some requested input is reachable.
    let mut needy = vec![false; out_id + 1];
    for v in inputs {
        needy[v.id()] = true;
    }
    for id in 0..=out_id {
        if !needy[id] {
            let mut hit = false;
            g.op_of(id).for_each_parent(|p| hit |= needy[p]);
            needy[id] = hit;
        }
    }

    let active = |id: usize| reach[id] && needy[id];

    let mut acc: Vec<Option<Var>> = vec![None; out_id + 1];
    acc[out_id] = Some(g.constant(Tensor::ones(output.value().shape()))?);

    for id in (0..=out_id).rev() {
        if !active(id) {
            continue;
        }
        let Some(gy) = acc[id].clone() else { continue };
        let op = g.op_of(id);
        emit_partials(&g, id, &op, &gy, &|pid| active(pid), &mut |pid, partial| {
            debug_assert_eq!(partial.value().shape(), g.tensor_of(pid).shape());
            acc[pid] = Some(match acc[pid].take() {
                Some(prev) => prev.add(&partial)?,
                None => partial,
            });
            Ok(())
        })?;
    }

    let mut out = Vec::with_capacity(inputs.len());
    for v in inputs {
        let gv = acc[v.id()]
            .clone()
            .expect("active input missed by backward sweep");
        out.push(if create_graph { gv } else { gv.detach()? });
    }
    Ok(out)
}
