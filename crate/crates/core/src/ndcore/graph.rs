//! Reverse-mode autodiff over a linear tape of tensor operations.
//!
//! The graph owns a registry of named parameter leaves followed by forward
//! nodes appended by each operation. `backward` replays the tape in reverse
//! and returns one gradient per registered parameter; `reset` truncates the
//! tape back to the parameters so the next step starts clean. A node produced
//! by `detach` blocks gradient flow to everything behind it.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ndcore::tensor::{validate_shape, Repr, Tensor};

pub type NodeId = usize;

/// Gradients keyed by parameter name, in sorted name order.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    /// Forward identity whose backward contributes nothing to its source.
    Detach,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Broadcast multiply by a one-element tensor.
    MulScalar { a: NodeId, s: NodeId },
    Recip { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Sum { a: NodeId },
    MeanRows { a: NodeId },
    Row { a: NodeId, index: usize },
    ConcatCols { a: NodeId, b: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    L2Normalize { a: NodeId, eps: f64 },
    Dot { a: NodeId, b: NodeId },
    MaxAll { a: NodeId },
    LogSumExp { a: NodeId },
    StackScalars { parts: Vec<NodeId> },
    Reshape { a: NodeId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

struct GraphInner {
    nodes: Vec<Node>,
    param_order: Vec<(String, NodeId)>,
    param_index: BTreeMap<String, NodeId>,
    /// Nodes below the watermark are parameters and survive `reset`.
    watermark: usize,
    epoch: u64,
    eval_depth: u32,
}

/// Cheap-clone handle to a shared autodiff tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Graph")
            .field("params", &inner.param_order.len())
            .field("nodes", &inner.nodes.len())
            .field("epoch", &inner.epoch)
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                param_order: Vec::new(),
                param_index: BTreeMap::new(),
                watermark: 0,
                epoch: 0,
                eval_depth: 0,
            })),
        }
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register a named learnable leaf. All parameters must be registered
    /// before the first forward operation so that `reset` can truncate the
    /// tape without invalidating them.
    pub fn param(&self, name: &str, init: Tensor) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.len() != inner.watermark {
            return Err(Error::contract(format!(
                "parameter `{name}` registered after forward operations; reset first"
            )));
        }
        if inner.param_index.contains_key(name) {
            return Err(Error::contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let shape = init.shape().to_vec();
        let data = init.values();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            op: Op::Param,
            requires_grad: true,
        });
        inner.param_order.push((name.to_string(), id));
        inner.param_index.insert(name.to_string(), id);
        inner.watermark = inner.nodes.len();
        let epoch = inner.epoch;
        drop(inner);
        Ok(Tensor::from_node(self.clone(), id, shape, epoch))
    }

    /// Handle to an already registered parameter.
    pub fn param_tensor(&self, name: &str) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let id = *inner
            .param_index
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let shape = inner.nodes[id].shape.clone();
        let epoch = inner.epoch;
        drop(inner);
        Ok(Tensor::from_node(self.clone(), id, shape, epoch))
    }

    /// Current value of a parameter as a plain tensor.
    pub fn param_value(&self, name: &str) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let id = *inner
            .param_index
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        Tensor::from_vec(inner.nodes[id].shape.clone(), inner.nodes[id].data.clone())
    }

    /// Overwrite a parameter's data in place (optimizer update path).
    pub fn set_param_data(&self, name: &str, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let id = *inner
            .param_index
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if data.len() != inner.nodes[id].data.len() {
            return Err(Error::contract(format!(
                "parameter `{name}` has {} elements, update has {}",
                inner.nodes[id].data.len(),
                data.len()
            )));
        }
        inner.nodes[id].data = data;
        Ok(())
    }

    /// Parameter names in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.inner
            .borrow()
            .param_order
            .iter()
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.inner.borrow().param_index.contains_key(name)
    }

    pub fn num_params(&self) -> usize {
        self.inner.borrow().param_order.len()
    }

    /// Total number of learnable scalar elements.
    pub fn num_param_elements(&self) -> usize {
        let inner = self.inner.borrow();
        inner
            .param_order
            .iter()
            .map(|(_, id)| inner.nodes[*id].data.len())
            .sum()
    }

    /// Drop all forward nodes, keeping parameters. Invalidates tensors that
    /// referred to the dropped nodes.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        let watermark = inner.watermark;
        inner.nodes.truncate(watermark);
        inner.epoch += 1;
    }

    /// Number of live nodes (parameters plus forward tape).
    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// While the guard lives, operations compute values without recording
    /// tape nodes; used for inference and evaluation passes.
    pub fn eval_scope(&self) -> EvalGuard {
        self.inner.borrow_mut().eval_depth += 1;
        EvalGuard {
            graph: self.clone(),
        }
    }

    fn is_eval(&self) -> bool {
        self.inner.borrow().eval_depth > 0
    }

    pub(crate) fn node_values(&self, id: NodeId, epoch: u64) -> Vec<f64> {
        let inner = self.inner.borrow();
        if id >= inner.watermark && epoch != inner.epoch {
            panic!("tensor refers to a forward node of a graph that was reset");
        }
        inner.nodes[id].data.clone()
    }

    pub(crate) fn node_requires_grad(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn push_node(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite forward value");
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            op,
            requires_grad,
        });
        let epoch = inner.epoch;
        drop(inner);
        Tensor::from_node(self.clone(), id, shape, epoch)
    }

    /// Inject a value tensor as a constant node so it can participate in ops.
    fn constant(&self, t: &Tensor) -> Tensor {
        self.push_node(t.shape().to_vec(), t.values(), Op::Constant, false)
    }

    /// Reverse pass from a scalar loss; returns one gradient per parameter,
    /// exact zeros for parameters the loss does not reach.
    pub fn backward(&self, loss: &Tensor) -> Result<GradMap> {
        let (loss_id, loss_epoch) = match (&loss.repr, loss.graph()) {
            (Repr::Node { id, epoch, .. }, Some(g)) if self.same_graph(&g) => (*id, *epoch),
            (Repr::Node { .. }, _) => {
                return Err(Error::contract(
                    "loss tensor belongs to a different graph".to_string(),
                ))
            }
            (Repr::Value(_), _) => {
                return Err(Error::contract(
                    "loss is not connected to the graph".to_string(),
                ))
            }
        };
        {
            let inner = self.inner.borrow();
            if loss_id >= inner.watermark && loss_epoch != inner.epoch {
                return Err(Error::contract(
                    "loss belongs to a tape that was reset".to_string(),
                ));
            }
        }
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }

        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            backprop(&inner.nodes, id, &gout, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[id] = Some(gout); // keep parameter gradients for collection
            }
        }

        let mut map = GradMap::new();
        for (name, id) in &inner.param_order {
            let node = &inner.nodes[*id];
            let g = grads[*id]
                .take()
                .unwrap_or_else(|| vec![0.0; node.data.len()]);
            map.insert(name.clone(), Tensor::from_vec(node.shape.clone(), g)?);
        }
        Ok(map)
    }

    /// Resolve operand data, injecting constants for plain values. Returns
    /// `None` node ids in eval mode so no tape is recorded.
    fn operand(&self, t: &Tensor) -> Result<(Option<NodeId>, Vec<f64>)> {
        match &t.repr {
            Repr::Value(data) => Ok((None, data.as_ref().clone())),
            Repr::Node { graph, id, epoch } => {
                if !self.same_graph(graph) {
                    return Err(Error::contract(
                        "operands belong to different graphs".to_string(),
                    ));
                }
                let data = self.node_values(*id, *epoch);
                Ok((Some(*id), data))
            }
        }
    }
}

/// RAII guard for no-record evaluation; see [`Graph::eval_scope`].
pub struct EvalGuard {
    graph: Graph,
}

impl Drop for EvalGuard {
    fn drop(&mut self) {
        self.graph.inner.borrow_mut().eval_depth -= 1;
    }
}

// ---------------------------------------------------------------------------
// Forward implementations
// ---------------------------------------------------------------------------

fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn l2_normalize_forward(x: &[f64], eps: f64) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(eps);
    x.iter().map(|v| v / denom).collect()
}

fn logsumexp_forward(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

fn max_all_forward(x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut val = x[0];
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > val {
            val = v;
            best = i;
        }
    }
    (best, val)
}

// ---------------------------------------------------------------------------
// Backward rule dispatch
// ---------------------------------------------------------------------------

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, add: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    add(slot);
}

fn backprop(nodes: &[Node], id: NodeId, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Param | Op::Constant | Op::Detach => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let adata = &nodes[*a].data;
            let bdata = &nodes[*b].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gout[i * n + j] * bdata[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += adata[i * k + p] * gout[i * n + j];
                        }
                        gb[p * n + j] += acc;
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(grads, nodes, *a, |ga| {
                for (g, &v) in ga.iter_mut().zip(gout) {
                    *g += v;
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (g, &v) in gb.iter_mut().zip(gout) {
                    *g += v;
                }
            });
        }
        Op::Sub { a, b } => {
            accumulate(grads, nodes, *a, |ga| {
                for (g, &v) in ga.iter_mut().zip(gout) {
                    *g += v;
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (g, &v) in gb.iter_mut().zip(gout) {
                    *g -= v;
                }
            });
        }
        Op::Mul { a, b } => {
            let adata = &nodes[*a].data;
            let bdata = &nodes[*b].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] += gout[i] * bdata[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..gout.len() {
                    gb[i] += gout[i] * adata[i];
                }
            });
        }
        Op::Scale { a, c } => {
            let c = *c;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] += gout[i] * c;
                }
            });
        }
        Op::MulScalar { a, s } => {
            let sval = nodes[*s].data[0];
            let adata = &nodes[*a].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] += gout[i] * sval;
                }
            });
            accumulate(grads, nodes, *s, |gs| {
                let mut acc = 0.0;
                for i in 0..gout.len() {
                    acc += gout[i] * adata[i];
                }
                gs[0] += acc;
            });
        }
        Op::Recip { a } => {
            let ydata = &node.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] -= gout[i] * ydata[i] * ydata[i];
                }
            });
        }
        Op::Tanh { a } => {
            let ydata = &node.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] += gout[i] * (1.0 - ydata[i] * ydata[i]);
                }
            });
        }
        Op::Exp { a } => {
            let ydata = &node.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] += gout[i] * ydata[i];
                }
            });
        }
        Op::Ln { a } => {
            let xdata = &nodes[*a].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] += gout[i] / xdata[i];
                }
            });
        }
        Op::Sum { a } => {
            let g = gout[0];
            accumulate(grads, nodes, *a, |ga| {
                for v in ga.iter_mut() {
                    *v += g;
                }
            });
        }
        Op::MeanRows { a } => {
            let rows = nodes[*a].shape[0];
            let cols = nodes[*a].shape[1];
            let inv = 1.0 / rows as f64;
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += gout[c] * inv;
                    }
                }
            });
        }
        Op::Row { a, index } => {
            let cols = gout.len();
            let offset = index * cols;
            accumulate(grads, nodes, *a, |ga| {
                for c in 0..cols {
                    ga[offset + c] += gout[c];
                }
            });
        }
        Op::ConcatCols { a, b } => {
            let rows = nodes[*a].shape[0];
            let ca = nodes[*a].shape[1];
            let cb = nodes[*b].shape[1];
            let cols = ca + cb;
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    for c in 0..ca {
                        ga[r * ca + c] += gout[r * cols + c];
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for r in 0..rows {
                    for c in 0..cb {
                        gb[r * cb + c] += gout[r * cols + ca + c];
                    }
                }
            });
        }
        Op::ConcatRows { a, b } => {
            let na = nodes[*a].data.len();
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..na {
                    ga[i] += gout[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (i, g) in gb.iter_mut().enumerate() {
                    *g += gout[na + i];
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let cols = nodes[*table].shape[1];
            accumulate(grads, nodes, *table, |gt| {
                for (r, &row) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[row * cols + c] += gout[r * cols + c];
                    }
                }
            });
        }
        Op::L2Normalize { a, eps } => {
            let x = &nodes[*a].data;
            let y = &node.data;
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            accumulate(grads, nodes, *a, |ga| {
                if norm >= *eps {
                    let gy: f64 = gout.iter().zip(y).map(|(g, v)| g * v).sum();
                    for i in 0..gout.len() {
                        ga[i] += (gout[i] - y[i] * gy) / norm;
                    }
                } else {
                    for i in 0..gout.len() {
                        ga[i] += gout[i] / eps;
                    }
                }
            });
        }
        Op::Dot { a, b } => {
            let g = gout[0];
            let adata = &nodes[*a].data;
            let bdata = &nodes[*b].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g * bdata[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g * adata[i];
                }
            });
        }
        Op::MaxAll { a } => {
            // Ties resolve to the first maximal element, matching forward.
            let (argmax, _) = max_all_forward(&nodes[*a].data);
            let g = gout[0];
            accumulate(grads, nodes, *a, |ga| {
                ga[argmax] += g;
            });
        }
        Op::LogSumExp { a } => {
            let out = node.data[0];
            let x = &nodes[*a].data;
            let g = gout[0];
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g * (x[i] - out).exp();
                }
            });
        }
        Op::StackScalars { parts } => {
            for (i, part) in parts.iter().enumerate() {
                let gi = gout[i];
                accumulate(grads, nodes, *part, |gp| {
                    gp[0] += gi;
                });
            }
        }
        Op::Reshape { a } => {
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..gout.len() {
                    ga[i] += gout[i];
                }
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor operations
// ---------------------------------------------------------------------------

/// Resolve the graph shared by the operands, if any operand carries one.
fn common_graph(ts: &[&Tensor]) -> Result<Option<Graph>> {
    let mut found: Option<Graph> = None;
    for t in ts {
        if let Some(g) = t.graph() {
            match &found {
                None => found = Some(g),
                Some(f) if f.same_graph(&g) => {}
                Some(_) => {
                    return Err(Error::contract(
                        "operands belong to different graphs".to_string(),
                    ))
                }
            }
        }
    }
    Ok(found)
}

/// Run `forward` on operand data and either record `op` on the tape or return
/// a plain value, depending on graph presence and eval mode.
fn apply(
    out_shape: Vec<usize>,
    operands: &[&Tensor],
    forward: impl FnOnce(&[Vec<f64>]) -> Vec<f64>,
    make_op: impl FnOnce(&[NodeId]) -> Op,
) -> Result<Tensor> {
    let graph = common_graph(operands)?;
    match graph {
        Some(g) if !g.is_eval() => {
            let mut ids = Vec::with_capacity(operands.len());
            let mut datas = Vec::with_capacity(operands.len());
            for t in operands {
                let (id, data) = g.operand(t)?;
                let id = match id {
                    Some(id) => id,
                    None => g.constant(t).node_id().expect("constant is a node"),
                };
                ids.push(id);
                datas.push(data);
            }
            let out = forward(&datas);
            validate_shape(&out_shape, out.len())?;
            let requires_grad = {
                let inner = g.inner.borrow();
                ids.iter().any(|&id| inner.nodes[id].requires_grad)
            };
            let op = make_op(&ids);
            let requires_grad = requires_grad && !matches!(op, Op::Detach);
            Ok(g.push_node(out_shape, out, op, requires_grad))
        }
        _ => {
            let datas: Vec<Vec<f64>> = operands.iter().map(|t| t.values()).collect();
            let out = forward(&datas);
            Tensor::from_vec(out_shape, out)
        }
    }
}

fn expect_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

fn expect_rank1(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        other => Err(Error::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

impl Tensor {
    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = expect_rank2(self, "matmul")?;
        let (k2, n) = expect_rank2(other, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        apply(
            vec![m, n],
            &[self, other],
            |d| matmul_forward(&d[0], &d[1], m, k, n),
            |ids| Op::Matmul { a: ids[0], b: ids[1] },
        )
    }

    fn elementwise_binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        apply(
            self.shape().to_vec(),
            &[self, other],
            |d| d[0].iter().zip(&d[1]).map(|(&a, &b)| f(a, b)).collect(),
            |ids| make(ids[0], ids[1]),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        apply(
            self.shape().to_vec(),
            &[self],
            |d| d[0].iter().map(|v| v * c).collect(),
            |ids| Op::Scale { a: ids[0], c },
        )
    }

    /// Broadcast multiply by a one-element tensor (the only broadcast allowed
    /// besides the row mean).
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        apply(
            self.shape().to_vec(),
            &[self, s],
            |d| {
                let sv = d[1][0];
                d[0].iter().map(|v| v * sv).collect()
            },
            |ids| Op::MulScalar { a: ids[0], s: ids[1] },
        )
    }

    /// Elementwise reciprocal; rejects zero entries.
    pub fn recip(&self) -> Result<Tensor> {
        if self.values().iter().any(|&v| v == 0.0) {
            return Err(Error::contract("recip of a zero element".to_string()));
        }
        apply(
            self.shape().to_vec(),
            &[self],
            |d| d[0].iter().map(|v| 1.0 / v).collect(),
            |ids| Op::Recip { a: ids[0] },
        )
    }

    pub fn tanh(&self) -> Result<Tensor> {
        apply(
            self.shape().to_vec(),
            &[self],
            |d| d[0].iter().map(|v| v.tanh()).collect(),
            |ids| Op::Tanh { a: ids[0] },
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        apply(
            self.shape().to_vec(),
            &[self],
            |d| d[0].iter().map(|v| v.exp()).collect(),
            |ids| Op::Exp { a: ids[0] },
        )
    }

    /// Natural log; requires strictly positive entries.
    pub fn ln(&self) -> Result<Tensor> {
        if self.values().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("ln of a non-positive element".to_string()));
        }
        apply(
            self.shape().to_vec(),
            &[self],
            |d| d[0].iter().map(|v| v.ln()).collect(),
            |ids| Op::Ln { a: ids[0] },
        )
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        apply(
            vec![1],
            &[self],
            |d| vec![d[0].iter().sum::<f64>()],
            |ids| Op::Sum { a: ids[0] },
        )
    }

    /// Arithmetic mean over the token (row) axis: `[n,d] -> [d]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (rows, cols) = expect_rank2(self, "mean_rows")?;
        if rows == 0 {
            return Err(Error::contract("mean_rows of an empty tensor".to_string()));
        }
        apply(
            vec![cols],
            &[self],
            |d| {
                let x = &d[0];
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[c] += x[r * cols + c];
                    }
                }
                for v in out.iter_mut() {
                    *v /= rows as f64;
                }
                out
            },
            |ids| Op::MeanRows { a: ids[0] },
        )
    }

    /// One row of a matrix as a vector; on a vector, one element as a scalar.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        let (rows, cols) = match self.shape() {
            [r, c] => (*r, *c),
            [n] => (*n, 1),
            other => {
                return Err(Error::Shape {
                    op: "row",
                    lhs: other.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if index >= rows {
            return Err(Error::contract(format!(
                "row index {index} out of bounds for {rows} rows"
            )));
        }
        apply(
            vec![cols],
            &[self],
            |d| d[0][index * cols..(index + 1) * cols].to_vec(),
            |ids| Op::Row { a: ids[0], index },
        )
    }

    /// Column-wise concatenation `[n,a] ++ [n,b] -> [n,a+b]`.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = expect_rank2(self, "concat_cols")?;
        let (rb, cb) = expect_rank2(other, "concat_cols")?;
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        apply(
            vec![ra, ca + cb],
            &[self, other],
            |d| {
                let mut out = Vec::with_capacity(ra * (ca + cb));
                for r in 0..ra {
                    out.extend_from_slice(&d[0][r * ca..(r + 1) * ca]);
                    out.extend_from_slice(&d[1][r * cb..(r + 1) * cb]);
                }
                out
            },
            |ids| Op::ConcatCols { a: ids[0], b: ids[1] },
        )
    }

    /// Row-wise concatenation `[m,d] ++ [n,d] -> [m+n,d]`.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = expect_rank2(self, "concat_rows")?;
        let (rb, cb) = expect_rank2(other, "concat_rows")?;
        if ca != cb {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        apply(
            vec![ra + rb, ca],
            &[self, other],
            |d| {
                let mut out = Vec::with_capacity((ra + rb) * ca);
                out.extend_from_slice(&d[0]);
                out.extend_from_slice(&d[1]);
                out
            },
            |ids| Op::ConcatRows { a: ids[0], b: ids[1] },
        )
    }

    /// Embedding lookup: rows of `self` selected by index, scatter-add backward.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (rows, cols) = expect_rank2(self, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no indices".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of bounds for {rows} rows"
            )));
        }
        let ids_vec = ids.to_vec();
        apply(
            vec![ids.len(), cols],
            &[self],
            |d| {
                let mut out = Vec::with_capacity(ids_vec.len() * cols);
                for &r in &ids_vec {
                    out.extend_from_slice(&d[0][r * cols..(r + 1) * cols]);
                }
                out
            },
            |nids| Op::GatherRows {
                table: nids[0],
                ids: ids_vec.clone(),
            },
        )
    }

    /// `x / max(||x||_2, eps)` over a vector.
    pub fn l2_normalize(&self, eps: f64) -> Result<Tensor> {
        let n = expect_rank1(self, "l2_normalize")?;
        if eps <= 0.0 {
            return Err(Error::contract(format!(
                "l2_normalize requires eps > 0, got {eps}"
            )));
        }
        apply(
            vec![n],
            &[self],
            |d| l2_normalize_forward(&d[0], eps),
            |ids| Op::L2Normalize { a: ids[0], eps },
        )
    }

    /// Inner product of two vectors as a scalar tensor.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        let na = expect_rank1(self, "dot")?;
        let nb = expect_rank1(other, "dot")?;
        if na != nb {
            return Err(Error::Shape {
                op: "dot",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        apply(
            vec![1],
            &[self, other],
            |d| vec![d[0].iter().zip(&d[1]).map(|(a, b)| a * b).sum()],
            |ids| Op::Dot { a: ids[0], b: ids[1] },
        )
    }

    /// Maximum element as a scalar; gradient flows to the first maximum.
    pub fn max_all(&self) -> Result<Tensor> {
        apply(
            vec![1],
            &[self],
            |d| vec![max_all_forward(&d[0]).1],
            |ids| Op::MaxAll { a: ids[0] },
        )
    }

    /// Numerically stable `log(sum(exp(x)))` over a vector.
    pub fn logsumexp(&self) -> Result<Tensor> {
        expect_rank1(self, "logsumexp")?;
        apply(
            vec![1],
            &[self],
            |d| vec![logsumexp_forward(&d[0])],
            |ids| Op::LogSumExp { a: ids[0] },
        )
    }

    /// Same data, new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        validate_shape(&shape, self.len())?;
        apply(
            shape,
            &[self],
            |d| d[0].clone(),
            |ids| Op::Reshape { a: ids[0] },
        )
    }

    /// Value-identical tensor whose backward contribution to every ancestor
    /// is exactly zero.
    pub fn detach(&self) -> Tensor {
        match &self.repr {
            Repr::Value(_) => self.clone(),
            Repr::Node { graph, .. } => {
                if graph.is_eval() {
                    return self.to_value();
                }
                apply(
                    self.shape().to_vec(),
                    &[self],
                    |d| d[0].clone(),
                    |_| Op::Detach,
                )
                .expect("detach preserves a valid shape")
            }
        }
    }
}

/// Assemble scalar tensors into one vector tensor.
pub fn stack_scalars(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("stack_scalars of no tensors".to_string()));
    }
    for p in parts {
        if !p.is_scalar() {
            return Err(Error::Shape {
                op: "stack_scalars",
                lhs: p.shape().to_vec(),
                rhs: vec![1],
            });
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    apply(
        vec![parts.len()],
        &refs,
        |d| d.iter().map(|v| v[0]).collect(),
        |ids| Op::StackScalars {
            parts: ids.to_vec(),
        },
    )
}
