use std::collections::HashMap;
use std::rc::Rc;

use super::{kernels, Graph, Segment};
use crate::error::{Error, Result};
use crate::tensor::{causal_mask_unchecked, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

type Replay<T> = Rc<dyn Fn(&mut Tape<T>, &[NodeId]) -> Vec<NodeId>>;

enum Op<T: Real> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulTN(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    CausalMask(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    RowScale(NodeId, NodeId),
    ColScale(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    BcastRows(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    Gelu(NodeId),
    GeluPrime(NodeId),
    Sigmoid(NodeId),
    RsqrtEps(NodeId),
    CausalSoftmax(NodeId),
    CrossEntropy(NodeId, Vec<Option<usize>>),
    GatherCols(NodeId, Vec<usize>),
    CausalConv(NodeId, NodeId, usize),
    Checkpoint {
        inputs: Vec<NodeId>,
        replay: Replay<T>,
        outputs: usize,
    },
    CheckpointOut(NodeId, usize),
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Append-only record of graph ops with eagerly computed values.
///
/// Nodes only reference earlier nodes, so the recording order is a
/// topological order. A tape supports exactly one [`Tape::backward`].
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct GradMap<T: Real = f64> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.grads.get(&id).ok_or_else(|| {
            Error::Autodiff(format!("node {} is not a parameter of this tape", id.0))
        })
    }

    pub fn take(&mut self, id: NodeId) -> Result<Tensor<T>> {
        self.grads.remove(&id).ok_or_else(|| {
            Error::Autodiff(format!("node {} is not a parameter of this tape", id.0))
        })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, t);
        self.params.push(id);
        id
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn v(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Reverse sweep of a scalar node. Gradients accumulate by summation.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap<T>> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new one".into(),
            ));
        }
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("node {} not on tape", loss.0)))?;
        if lv.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                lv.value.shape()
            )));
        }
        self.consumed = true;
        let seed = Tensor::full(lv.value.shape(), T::one());
        let mut grads = self.reverse(vec![(loss, seed)]);
        let map = self
            .params
            .iter()
            .map(|&p| {
                let g = grads[p.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.v(p).shape()));
                (p, g)
            })
            .collect();
        Ok(GradMap { grads: map })
    }

    fn reverse(&self, seeds: Vec<(NodeId, Tensor<T>)>) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pending: HashMap<usize, Vec<Option<Tensor<T>>>> = HashMap::new();
        let mut top = 0;
        for (id, g) in seeds {
            top = top.max(id.0);
            acc(&mut grads, id, g);
        }
        for i in (0..=top).rev() {
            if let Op::Checkpoint {
                inputs,
                replay,
                outputs,
            } = &self.nodes[i].op
            {
                if let Some(upstream) = pending.remove(&i) {
                    self.replay_checkpoint(&mut grads, inputs, replay, *outputs, upstream);
                }
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, g, &mut grads, &mut pending);
        }
        grads
    }

    fn replay_checkpoint(
        &self,
        grads: &mut [Option<Tensor<T>>],
        inputs: &[NodeId],
        replay: &Replay<T>,
        outputs: usize,
        upstream: Vec<Option<Tensor<T>>>,
    ) {
        let mut sub = Tape::new();
        let leaves: Vec<NodeId> = inputs
            .iter()
            .map(|&id| sub.push(Op::Leaf, self.v(id).clone()))
            .collect();
        let outs = replay(&mut sub, &leaves);
        debug_assert_eq!(outs.len(), outputs);
        let seeds: Vec<(NodeId, Tensor<T>)> = outs
            .into_iter()
            .zip(upstream)
            .filter_map(|(o, g)| g.map(|g| (o, g)))
            .collect();
        if seeds.is_empty() {
            return;
        }
        let mut sub_grads = sub.reverse(seeds);
        for (leaf, &input) in leaves.iter().zip(inputs) {
            if let Some(g) = sub_grads[leaf.0].take() {
                acc(grads, input, g);
            }
        }
    }

    fn backprop(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        pending: &mut HashMap<usize, Vec<Option<Tensor<T>>>>,
    ) {
        use kernels as k;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Checkpoint { .. } => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, k::matmul_nt(&g, self.v(*b)));
                acc(grads, *b, k::matmul_tn(self.v(*a), &g));
            }
            Op::MatMulTN(a, b) => {
                acc(grads, *a, k::matmul_nt(self.v(*b), &g));
                acc(grads, *b, k::matmul(self.v(*a), &g));
            }
            Op::MatMulNT(a, b) => {
                acc(grads, *a, k::matmul(&g, self.v(*b)));
                acc(grads, *b, k::matmul_tn(&g, self.v(*a)));
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *b, g.clone());
                acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *b, g.scale(-T::one()));
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, k::mul(&g, self.v(*b)));
                acc(grads, *b, k::mul(&g, self.v(*a)));
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::CausalMask(a) => acc(grads, *a, causal_mask_unchecked(&g)),
            Op::SliceRows(a, start) => {
                let src = self.v(*a);
                let c = src.cols();
                let mut full = Tensor::zeros(src.shape());
                full.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(grads, *a, full);
            }
            Op::SliceCols(a, start) => {
                let src = self.v(*a);
                let (r, c) = src.dims2();
                let len = g.cols();
                let mut full = Tensor::zeros(src.shape());
                for row in 0..r {
                    full.data_mut()[row * c + start..row * c + start + len]
                        .copy_from_slice(&g.data()[row * len..(row + 1) * len]);
                }
                acc(grads, *a, full);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let len = self.v(p).rows();
                    acc(grads, p, g.slice_rows(at, len).reshape(self.v(p).shape()).expect("sized"));
                    at += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let len = self.v(p).cols();
                    acc(grads, p, g.slice_cols(at, len).reshape(self.v(p).shape()).expect("sized"));
                    at += len;
                }
            }
            Op::RowScale(a, v) => {
                acc(grads, *a, k::row_scale(&g, self.v(*v)));
                let dv = k::sum_cols(&k::mul(&g, self.v(*a)));
                acc(grads, *v, dv.reshape(self.v(*v).shape()).expect("sized"));
            }
            Op::ColScale(a, v) => {
                acc(grads, *a, k::col_scale(&g, self.v(*v)));
                let dv = k::sum_rows(&k::mul(&g, self.v(*a)));
                acc(grads, *v, dv.reshape(self.v(*v).shape()).expect("sized"));
            }
            Op::AddCol(a, v) => {
                let dv = k::sum_cols(&g);
                acc(grads, *v, dv.reshape(self.v(*v).shape()).expect("sized"));
                acc(grads, *a, g);
            }
            Op::BcastRows(v) => {
                let dv = k::sum_rows(&g);
                acc(grads, *v, dv.reshape(self.v(*v).shape()).expect("sized"));
            }
            Op::MeanRows(a) => {
                let m = self.v(*a).rows();
                let row = g.scale(T::one() / T::c(m as f64));
                acc(grads, *a, k::bcast_rows(&row, m).reshape(self.v(*a).shape()).expect("sized"));
            }
            Op::SumAll(a) => acc(grads, *a, Tensor::full(self.v(*a).shape(), g.item())),
            Op::Gelu(a) => acc(grads, *a, k::gelu_bwd(self.v(*a), &g)),
            Op::GeluPrime(a) => acc(grads, *a, k::mul(&g, &k::gelu_second_map(self.v(*a)))),
            Op::Sigmoid(a) => acc(grads, *a, k::sigmoid_bwd(&node.value, &g)),
            Op::RsqrtEps(a) => {
                let half = T::c(-0.5);
                let dy = node.value.map(|y| half * y * y * y);
                acc(grads, *a, k::mul(&g, &dy));
            }
            Op::CausalSoftmax(a) => acc(grads, *a, k::causal_softmax_bwd(&node.value, &g)),
            Op::CrossEntropy(a, targets) => {
                acc(grads, *a, k::cross_entropy_bwd(self.v(*a), targets, g.item()))
            }
            Op::GatherCols(table, idx) => {
                acc(grads, *table, k::scatter_cols(self.v(*table).shape(), idx, &g))
            }
            Op::CausalConv(x, kern, seg) => {
                let (dx, dk) = k::causal_conv_bwd(self.v(*x), self.v(*kern), *seg, &g);
                acc(grads, *x, dx);
                acc(grads, *kern, dk);
            }
            Op::CheckpointOut(group, idx) => {
                let outputs = match &self.nodes[group.0].op {
                    Op::Checkpoint { outputs, .. } => *outputs,
                    _ => unreachable!("checkpoint output points at a checkpoint"),
                };
                let slot = pending
                    .entry(group.0)
                    .or_insert_with(|| (0..outputs).map(|_| None).collect());
                match &mut slot[*idx] {
                    Some(existing) => existing.add_assign(&g),
                    empty => *empty = Some(g),
                }
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        empty => *empty = Some(g),
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type V = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        self.v(*v)
    }

    fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = kernels::matmul(self.v(*a), self.v(*b));
        self.push(Op::MatMul(*a, *b), v)
    }

    fn matmul_tn(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = kernels::matmul_tn(self.v(*a), self.v(*b));
        self.push(Op::MatMulTN(*a, *b), v)
    }

    fn matmul_nt(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = kernels::matmul_nt(self.v(*a), self.v(*b));
        self.push(Op::MatMulNT(*a, *b), v)
    }

    fn transpose(&mut self, a: &NodeId) -> NodeId {
        let v = self.v(*a).transpose();
        self.push(Op::Transpose(*a), v)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = kernels::add(self.v(*a), self.v(*b));
        self.push(Op::Add(*a, *b), v)
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = kernels::sub(self.v(*a), self.v(*b));
        self.push(Op::Sub(*a, *b), v)
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = kernels::mul(self.v(*a), self.v(*b));
        self.push(Op::Mul(*a, *b), v)
    }

    fn scale(&mut self, a: &NodeId, s: T) -> NodeId {
        let v = self.v(*a).scale(s);
        self.push(Op::Scale(*a, s), v)
    }

    fn causal_mask(&mut self, a: &NodeId) -> NodeId {
        let v = crate::tensor::causal_mask(self.v(*a)).unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::CausalMask(*a), v)
    }

    fn slice_rows(&mut self, a: &NodeId, start: usize, len: usize) -> NodeId {
        let v = self.v(*a).slice_rows(start, len);
        self.push(Op::SliceRows(*a, start), v)
    }

    fn slice_cols(&mut self, a: &NodeId, start: usize, len: usize) -> NodeId {
        let v = self.v(*a).slice_cols(start, len);
        self.push(Op::SliceCols(*a, start), v)
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.v(*p)).collect();
        let v = Tensor::concat_rows(&refs).unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.v(*p)).collect();
        let v = Tensor::concat_cols(&refs).unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    fn row_scale(&mut self, a: &NodeId, s: &NodeId) -> NodeId {
        let v = kernels::row_scale(self.v(*a), self.v(*s));
        self.push(Op::RowScale(*a, *s), v)
    }

    fn col_scale(&mut self, a: &NodeId, s: &NodeId) -> NodeId {
        let v = kernels::col_scale(self.v(*a), self.v(*s));
        self.push(Op::ColScale(*a, *s), v)
    }

    fn add_col(&mut self, a: &NodeId, s: &NodeId) -> NodeId {
        let v = kernels::add_col(self.v(*a), self.v(*s));
        self.push(Op::AddCol(*a, *s), v)
    }

    fn bcast_rows(&mut self, s: &NodeId, m: usize) -> NodeId {
        let v = kernels::bcast_rows(self.v(*s), m);
        self.push(Op::BcastRows(*s), v)
    }

    fn mean_rows(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::mean_rows(self.v(*a));
        self.push(Op::MeanRows(*a), v)
    }

    fn sum_all(&mut self, a: &NodeId) -> NodeId {
        let v = Tensor::scalar(self.v(*a).sum());
        self.push(Op::SumAll(*a), v)
    }

    fn gelu(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::gelu_map(self.v(*a));
        self.push(Op::Gelu(*a), v)
    }

    fn gelu_prime(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::gelu_prime_map(self.v(*a));
        self.push(Op::GeluPrime(*a), v)
    }

    fn sigmoid(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::sigmoid_map(self.v(*a));
        self.push(Op::Sigmoid(*a), v)
    }

    fn rsqrt_eps(&mut self, a: &NodeId, eps: T) -> NodeId {
        let v = kernels::rsqrt_eps(self.v(*a), eps);
        self.push(Op::RsqrtEps(*a), v)
    }

    fn causal_softmax(&mut self, scores: &NodeId) -> NodeId {
        let v = kernels::causal_softmax(self.v(*scores));
        self.push(Op::CausalSoftmax(*scores), v)
    }

    fn cross_entropy(&mut self, logits: &NodeId, targets: &[Option<usize>]) -> NodeId {
        let v = Tensor::scalar(kernels::cross_entropy(self.v(*logits), targets));
        self.push(Op::CrossEntropy(*logits, targets.to_vec()), v)
    }

    fn gather_cols(&mut self, table: &NodeId, idx: &[usize]) -> NodeId {
        let v = kernels::gather_cols(self.v(*table), idx);
        self.push(Op::GatherCols(*table, idx.to_vec()), v)
    }

    fn causal_conv(&mut self, x: &NodeId, kern: &NodeId, seg_len: usize) -> NodeId {
        let v = kernels::causal_conv(self.v(*x), self.v(*kern), seg_len);
        self.push(Op::CausalConv(*x, *kern, seg_len), v)
    }

    fn checkpoint<S: Segment<T>>(&mut self, seg: S, inputs: &[NodeId]) -> Vec<NodeId> {
        let values: Vec<Tensor<T>> = inputs.iter().map(|id| self.v(*id).clone()).collect();
        let outs = seg.run(&mut super::Eager, &values);
        let n = outs.len();
        let replay: Replay<T> = Rc::new(move |tape: &mut Tape<T>, ids: &[NodeId]| seg.run(tape, ids));
        let group = self.push(
            Op::Checkpoint {
                inputs: inputs.to_vec(),
                replay,
                outputs: n,
            },
            Tensor::zeros(&[0]),
        );
        outs.into_iter()
            .enumerate()
            .map(|(idx, v)| self.push(Op::CheckpointOut(group, idx), v))
            .collect()
    }
}
