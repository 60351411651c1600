//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value; inputs always
//! precede outputs, so a reverse sweep over the node list is a valid
//! backward order. Fan-out gradients accumulate by addition.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Axis, Ids, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Constant,
    Param(String),
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    MatMul,
    ReduceSum(Axis),
    GatherRows(Arc<Ids>),
    SoftmaxTime,
    LogSoftmax,
    Concat,
    SliceFeature { start: usize, len: usize },
    Select { axis: Axis, index: usize },
    Stack(Axis),
    GatherTime(Arc<Vec<Option<usize>>>),
    ScatterTime { pos: Arc<Vec<Vec<Option<usize>>>>, time: usize, lens: Option<Arc<Vec<usize>>> },
    LstmCell,
    SmoothedCe { targets: Arc<Ids>, lens: Arc<Vec<usize>>, eps: f64 },
    SeqLogLik { targets: Arc<Ids>, lens: Arc<Vec<usize>> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::MatMul => "matmul",
            Op::ReduceSum(_) => "reduce_sum",
            Op::GatherRows(_) => "gather_rows",
            Op::SoftmaxTime => "softmax_time",
            Op::LogSoftmax => "log_softmax",
            Op::Concat => "concat",
            Op::SliceFeature { .. } => "slice_feature",
            Op::Select { .. } => "select",
            Op::Stack(_) => "stack",
            Op::GatherTime(_) => "gather_time",
            Op::ScatterTime { .. } => "scatter_time",
            Op::LstmCell => "lstm_cell",
            Op::SmoothedCe { .. } => "smoothed_ce",
            Op::SeqLogLik { .. } => "seq_log_lik",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

impl<T> Node<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Grads<T> {
    nodes: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of an arbitrary node (zeros if unreachable).
    pub fn of(&self, id: NodeId) -> Tensor<T> {
        let shape = self.shapes[id.0].clone();
        match &self.nodes[id.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients for every parameter registered on the tape; parameters the
    /// loss does not reach get zeros.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params.iter().map(|(n, &id)| (n.clone(), self.of(id))).collect()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes[id.0].value.clone()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value: Arc::new(value), requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor<T>>>) -> NodeId {
        self.nodes.push(Node { op: Op::Constant, inputs: Vec::new(), value: value.into(), requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf. Registering the same name twice
    /// returns the first node.
    pub fn param(&mut self, name: &str, value: impl Into<Arc<Tensor<T>>>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            inputs: Vec::new(),
            value: value.into(),
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        id
    }

    fn record(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|i| &*self.nodes[i.0].value).collect();
            eval(&op, &vals)?
        };
        Ok(self.push(op, inputs, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(c), vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Log, vec![a])
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, vec![x, w])
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        self.record(Op::ReduceSum(axis), vec![x])
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Arc<Ids>) -> Result<NodeId> {
        self.record(Op::GatherRows(ids), vec![table])
    }

    pub fn softmax_time(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::SoftmaxTime, vec![x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::LogSoftmax, vec![x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.record(Op::Concat, parts.to_vec())
    }

    pub fn slice_feature(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Op::SliceFeature { start, len }, vec![x])
    }

    pub fn select(&mut self, x: NodeId, axis: Axis, index: usize) -> Result<NodeId> {
        self.record(Op::Select { axis, index }, vec![x])
    }

    pub fn stack(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        self.record(Op::Stack(axis), parts.to_vec())
    }

    pub fn gather_time(&mut self, x: NodeId, pos: Arc<Vec<Option<usize>>>) -> Result<NodeId> {
        self.record(Op::GatherTime(pos), vec![x])
    }

    /// `lens` become the result's sequence lengths.
    pub fn scatter_time(
        &mut self,
        parts: &[NodeId],
        pos: Arc<Vec<Vec<Option<usize>>>>,
        time: usize,
        lens: Option<Arc<Vec<usize>>>,
    ) -> Result<NodeId> {
        self.record(Op::ScatterTime { pos, time, lens }, parts.to_vec())
    }

    pub fn lstm_cell(&mut self, z: NodeId, c_prev: NodeId) -> Result<NodeId> {
        self.record(Op::LstmCell, vec![z, c_prev])
    }

    pub fn smoothed_ce(&mut self, log_probs: NodeId, targets: Arc<Ids>, lens: Arc<Vec<usize>>, eps: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
        }
        self.record(Op::SmoothedCe { targets, lens, eps }, vec![log_probs])
    }

    pub fn seq_log_lik(&mut self, log_probs: NodeId, targets: Arc<Ids>, lens: Arc<Vec<usize>>) -> Result<NodeId> {
        self.record(Op::SeqLogLik { targets, lens }, vec![log_probs])
    }

    /// Recomputes every non-leaf node from the recorded ops and leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let v = match n.op {
                Op::Constant | Op::Param(_) => (*n.value).clone(),
                _ => {
                    let vals: Vec<&Tensor<T>> = n.inputs.iter().map(|i| &out[i.0]).collect();
                    eval(&n.op, &vals)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Gradients of a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {}", v.shape())));
        }
        self.backward_with(loss, Tensor::filled(v.shape().clone(), T::one()))
    }

    /// Backward sweep seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: NodeId, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "seed gradient {} does not match node {}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let (true, Op::Select { .. } | Op::GatherTime(_)) = (node.requires_grad, &node.op) {
                // Scatter straight into the input's gradient instead of
                // materializing a mostly-zero buffer for every step.
                let j = node.inputs[0];
                if self.nodes[j.0].requires_grad {
                    let x = &*self.nodes[j.0].value;
                    let acc = grads[j.0].get_or_insert_with(|| vec![T::zero(); x.len()]);
                    scatter_grad(&node.op, x, &g, acc)?;
                }
            } else if node.requires_grad && !node.inputs.is_empty() {
                let needs: Vec<bool> = node.inputs.iter().map(|j| self.nodes[j.0].requires_grad).collect();
                let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|j| &*self.nodes[j.0].value).collect();
                let input_grads = backward_op(&node.op, &ins, &node.value, &g, &needs)?;
                for ((j, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    let (Some(ig), true) = (ig, need) else { continue };
                    match &mut grads[j.0] {
                        Some(acc) => acc.iter_mut().zip(ig).for_each(|(a, b)| *a = *a + b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads {
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().clone()).collect(),
            params: self.params.clone(),
        })
    }
}

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn eval<T: Scalar>(op: &Op, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
    Ok(match op {
        Op::Constant | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::Add => tensor::binary(x[0], x[1], |a, b| a + b)?,
        Op::Sub => tensor::binary(x[0], x[1], |a, b| a - b)?,
        Op::Mul => tensor::binary(x[0], x[1], |a, b| a * b)?,
        Op::Scale(c) => {
            let c = T::from_f64(*c);
            unary(x[0], |a| a * c)
        }
        Op::Tanh => unary(x[0], |a| a.tanh_()),
        Op::Sigmoid => unary(x[0], tensor::sigmoid),
        Op::Relu => unary(x[0], |a| a.max(T::zero())),
        Op::Exp => unary(x[0], |a| a.exp_()),
        Op::Log => unary(x[0], |a| a.ln()),
        Op::MatMul => tensor::matmul(x[0], x[1])?,
        Op::ReduceSum(axis) => tensor::reduce_sum(x[0], *axis)?,
        Op::GatherRows(ids) => tensor::gather_rows(x[0], ids)?,
        Op::SoftmaxTime => tensor::softmax_time(x[0])?,
        Op::LogSoftmax => tensor::log_softmax(x[0])?,
        Op::Concat => tensor::concat_features(x)?.0,
        Op::SliceFeature { start, len } => tensor::slice_features(x[0], *start, *len)?,
        Op::Select { axis, index } => x[0].select(*axis, *index)?,
        Op::Stack(axis) => Tensor::stack(*axis, x)?,
        Op::GatherTime(pos) => tensor::gather_time(x[0], pos)?,
        Op::ScatterTime { pos, time, lens } => {
            let mut t = tensor::scatter_time(x, pos, *time)?;
            t.set_seq_lens(lens.clone());
            t
        }
        Op::LstmCell => tensor::lstm_cell(x[0], x[1])?,
        Op::SmoothedCe { targets, lens, eps } => Tensor::scalar(tensor::smoothed_ce(x[0], targets, lens, *eps)?.0),
        Op::SeqLogLik { targets, lens } => seq_log_lik(x[0], targets, lens)?,
    })
}

fn seq_log_lik<T: Scalar>(lp: &Tensor<T>, targets: &Ids, lens: &[usize]) -> Result<Tensor<T>> {
    let (b, s, v) = tensor::step_layout(lp.shape())?;
    tensor::check_targets(targets, b, s, v)?;
    let mut out = vec![T::zero(); b];
    for (bi, o) in out.iter_mut().enumerate() {
        for t in 0..lens[bi].min(s) {
            let y = targets.data()[bi * s + t] as usize;
            *o = *o + lp.data()[(bi * s + t) * v + y];
        }
    }
    Tensor::new(&[(Axis::Batch, b)], out)
}

type InputGrads<T> = Vec<Option<Vec<T>>>;

/// Adds the gradient of a `Select` or `GatherTime` output into `acc`, laid
/// out like the input `x`.
fn scatter_grad<T: Scalar>(op: &Op, x: &Tensor<T>, g: &[T], acc: &mut [T]) -> Result<()> {
    let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
    match op {
        Op::Select { axis, index } => {
            let (outer, n, inner) = x.shape().split_at(*axis).expect("forward succeeded");
            for o in 0..outer {
                let dst = (o * n + index) * inner;
                add(&mut acc[dst..dst + inner], &g[o * inner..(o + 1) * inner]);
            }
        }
        Op::GatherTime(pos) => {
            let (_, t, inner) = tensor::batch_time_layout(x.shape())?;
            for (b, p) in pos.iter().enumerate() {
                if let Some(p) = *p {
                    let dst = (b * t + p) * inner;
                    add(&mut acc[dst..dst + inner], &g[b * inner..(b + 1) * inner]);
                }
            }
        }
        _ => unreachable!("only selections scatter"),
    }
    Ok(())
}

fn backward_op<T: Scalar>(op: &Op, x: &[&Tensor<T>], y: &Tensor<T>, g: &[T], needs: &[bool]) -> Result<InputGrads<T>> {
    let map1 = |f: &dyn Fn(usize) -> T| -> InputGrads<T> { vec![Some((0..g.len()).map(f).collect())] };
    Ok(match op {
        Op::Constant | Op::Param(_) => Vec::new(),
        Op::Add | Op::Sub | Op::Mul => {
            let same = x[0].shape() == x[1].shape();
            let bc = if same { None } else { Some(tensor::broadcast_shapes(&[x[0].shape(), x[1].shape()])?) };
            let mut out = Vec::with_capacity(2);
            for k in 0..2 {
                if !needs[k] {
                    out.push(None);
                    continue;
                }
                let other = x[1 - k];
                let gk = match (&bc, op) {
                    (None, Op::Mul) => g.iter().zip(other.data()).map(|(&a, &b)| a * b).collect(),
                    (None, _) => g.to_vec(),
                    (Some(bc), Op::Mul) => tensor::unbroadcast(
                        g,
                        &bc.shape,
                        &bc.strides[k],
                        x[k].len(),
                        Some((other.data(), &bc.strides[1 - k])),
                    ),
                    (Some(bc), _) => tensor::unbroadcast(g, &bc.shape, &bc.strides[k], x[k].len(), None),
                };
                let gk = if matches!(op, Op::Sub) && k == 1 { gk.into_iter().map(|v: T| -v).collect() } else { gk };
                out.push(Some(gk));
            }
            out
        }
        Op::Scale(c) => {
            let c = T::from_f64(*c);
            map1(&|i| g[i] * c)
        }
        Op::Tanh => {
            let yd = y.data();
            map1(&|i| g[i] * (T::one() - yd[i] * yd[i]))
        }
        Op::Sigmoid => {
            let yd = y.data();
            map1(&|i| g[i] * yd[i] * (T::one() - yd[i]))
        }
        Op::Relu => {
            let xd = x[0].data();
            map1(&|i| if xd[i] > T::zero() { g[i] } else { T::zero() })
        }
        Op::Exp => {
            let yd = y.data();
            map1(&|i| g[i] * yd[i])
        }
        Op::Log => {
            let xd = x[0].data();
            map1(&|i| g[i] / xd[i])
        }
        Op::MatMul => {
            let (k, n) = tensor::matrix_dims(x[1])?;
            let m = x[0].len() / k;
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, x[1].data(), true, &mut gx, false);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); k * n];
                T::gemm(k, m, n, x[0].data(), true, g, false, &mut gw, false);
                gw
            });
            vec![gx, gw]
        }
        Op::ReduceSum(axis) => {
            let (outer, n, inner) = x[0].shape().split_at(*axis).expect("forward succeeded");
            let lens = time_mask(x[0], *axis);
            let mut gx = vec![T::zero(); x[0].len()];
            for o in 0..outer {
                let valid = lens.as_ref().map_or(n, |l| l[o]);
                for t in 0..valid {
                    gx[(o * n + t) * inner..(o * n + t + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        Op::GatherRows(ids) => {
            let (_, d) = tensor::matrix_dims(x[0])?;
            let mut gt = vec![T::zero(); x[0].len()];
            for (r, &id) in ids.data().iter().enumerate() {
                let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a = *a + b);
            }
            vec![Some(gt)]
        }
        Op::SoftmaxTime => {
            let (outer, n, inner) = y.shape().split_at(Axis::Time).expect("forward succeeded");
            let lens = time_mask(x[0], Axis::Time);
            let yd = y.data();
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                let valid = lens.as_ref().map_or(n, |l| l[o]);
                for i in 0..inner {
                    let at = |t: usize| (o * n + t) * inner + i;
                    let dot: T = (0..valid).map(|t| yd[at(t)] * g[at(t)]).sum();
                    for t in 0..valid {
                        gx[at(t)] = yd[at(t)] * (g[at(t)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::LogSoftmax => {
            let v = y.shape().extent(Axis::Feature).expect("forward succeeded");
            let yd = y.data();
            let mut gx = vec![T::zero(); yd.len()];
            for r in 0..yd.len() / v {
                let gs: T = g[r * v..(r + 1) * v].iter().copied().sum();
                for j in r * v..(r + 1) * v {
                    gx[j] = g[j] - yd[j].exp_() * gs;
                }
            }
            vec![Some(gx)]
        }
        Op::Concat => {
            let (_, offsets) = tensor::concat_features(x)?;
            let widths: Vec<usize> = x.iter().map(|p| p.shape().extent(Axis::Feature).unwrap_or(0)).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut out: InputGrads<T> = x.iter().zip(needs).map(|(p, &n)| n.then(|| vec![T::zero(); p.len()])).collect();
            let mut col = 0;
            for (p, gp) in out.iter_mut().enumerate() {
                if let Some(gp) = gp {
                    for r in 0..rows {
                        let o = offsets[p][r];
                        let src = &g[r * total + col..r * total + col + widths[p]];
                        gp[o..o + widths[p]].iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                col += widths[p];
            }
            out
        }
        Op::SliceFeature { start, len } => {
            let f = x[0].shape().extent(Axis::Feature).expect("forward succeeded");
            let mut gx = vec![T::zero(); x[0].len()];
            for (r, row) in g.chunks(*len).enumerate() {
                gx[r * f + start..r * f + start + len].copy_from_slice(row);
            }
            vec![Some(gx)]
        }
        Op::Select { .. } | Op::GatherTime(_) => {
            let mut gx = vec![T::zero(); x[0].len()];
            scatter_grad(op, x[0], g, &mut gx)?;
            vec![Some(gx)]
        }
        Op::Stack(axis) => {
            let (outer, n, inner) = y.shape().split_at(*axis).expect("forward succeeded");
            (0..n)
                .map(|k| {
                    needs[k].then(|| {
                        let mut gk = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            gk.extend_from_slice(&g[(o * n + k) * inner..(o * n + k + 1) * inner]);
                        }
                        gk
                    })
                })
                .collect()
        }
        Op::ScatterTime { pos, time, .. } => {
            let (_, t, inner) = tensor::batch_time_layout(y.shape())?;
            debug_assert_eq!(t, *time);
            pos.iter()
                .zip(needs)
                .map(|(ps, &need)| {
                    need.then(|| {
                        let mut gk = vec![T::zero(); ps.len() * inner];
                        for (b, p) in ps.iter().enumerate() {
                            if let Some(p) = *p {
                                let src = (b * t + p) * inner;
                                gk[b * inner..(b + 1) * inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        gk
                    })
                })
                .collect()
        }
        Op::LstmCell => {
            let h = x[1].shape().extent(Axis::Feature).expect("forward succeeded");
            let (dz, dc) = tensor::lstm_cell_backward(x[0].data(), x[1].data(), g, h);
            vec![Some(dz), Some(dc)]
        }
        Op::SmoothedCe { targets, lens, eps } => {
            let (b, s, v) = tensor::step_layout(x[0].shape())?;
            let count: usize = (0..b).map(|bi| lens[bi].min(s)).sum();
            let (on, off) = tensor::smoothing_weights::<T>(*eps, v);
            let scale = -g[0] / T::from_f64(count as f64);
            let mut gx = vec![T::zero(); x[0].len()];
            for bi in 0..b {
                for t in 0..lens[bi].min(s) {
                    let base = (bi * s + t) * v;
                    gx[base..base + v].iter_mut().for_each(|a| *a = scale * off);
                    let y = targets.data()[bi * s + t] as usize;
                    gx[base + y] = scale * on;
                }
            }
            vec![Some(gx)]
        }
        Op::SeqLogLik { targets, lens } => {
            let (b, s, v) = tensor::step_layout(x[0].shape())?;
            let mut gx = vec![T::zero(); x[0].len()];
            for bi in 0..b {
                for t in 0..lens[bi].min(s) {
                    let y = targets.data()[bi * s + t] as usize;
                    gx[(bi * s + t) * v + y] = g[bi];
                }
            }
            vec![Some(gx)]
        }
    })
}

fn time_mask<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Option<Vec<usize>> {
    if axis != Axis::Time {
        return None;
    }
    let lens = x.seq_lens()?;
    let (outer, _, _) = x.shape().split_at(axis)?;
    let per = outer / lens.len();
    Some((0..outer).map(|o| lens[o / per]).collect())
}
