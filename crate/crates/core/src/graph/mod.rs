//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients for every
//! parameter leaf. Tapes are single-pass and confined to one thread;
//! parameters live in a shared [`ParamStore`] so fresh tapes can be built
//! per micro-batch.
//!
//! Checkpoint regions ([`Graph::checkpoint`]) evaluate a pure sub-graph,
//! keep only its inputs and outputs on the tape, and re-execute it during
//! backward. A live/peak counter over interior activation elements backs
//! the memory-behavior assertions in the test suites.

mod backward;
mod kernels;

pub use kernels::{sigmoid, softplus_val, sum_to_shape};

use std::cell::Cell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::GraphError;
use crate::params::{Gradients, ParamId, StoreHandle};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Index of a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(usize);

/// Closure evaluated inside a checkpoint region. It must be pure: given the
/// same input nodes it must rebuild the same values (the backward pass
/// audits this bit-for-bit).
pub type RegionFn<T> = Rc<dyn Fn(&mut Graph<T>, &[Tid]) -> Result<Tid, GraphError>>;

pub(crate) enum Op<T: Scalar> {
    Leaf { param: Option<ParamId>, requires_grad: bool },
    Matmul { a: Tid, b: Tid },
    Add { a: Tid, b: Tid },
    Mul { a: Tid, b: Tid },
    Scale { a: Tid, c: T },
    Exp { a: Tid },
    Log { a: Tid },
    Softplus { a: Tid },
    Silu { a: Tid },
    SoftmaxCausal { a: Tid },
    RmsNorm { a: Tid, gain: Tid, eps: T },
    Gather { table: Tid, ids: Arc<Vec<u32>> },
    Reshape { a: Tid },
    Permute { a: Tid, axes: Vec<usize> },
    Slice { a: Tid, axis: usize, start: usize },
    Concat { parts: Vec<Tid>, axis: usize },
    PadConstant { a: Tid, axis: usize, before: usize },
    LinearScan { decay: Tid, input: Tid },
    Rotary { a: Tid },
    CrossEntropy { logits: Tid, targets: Arc<Vec<u32>>, mask: Arc<Vec<bool>> },
    Sum { a: Tid },
    SumAxis { a: Tid, axis: usize },
    Dropout { a: Tid, prob: f64, stream: u64 },
    Checkpoint { inputs: Vec<Tid>, region: RegionFn<T>, dropout_base: u64 },
}

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
    pub value: Tensor<T>,
    pub requires_grad: bool,
    /// Elements this node contributes to the live-activation counter
    /// (0 for leaves and for buffer-aliasing ops).
    pub counted: usize,
}

#[derive(Clone, Copy, Default)]
struct CounterState {
    live: usize,
    peak: usize,
}

/// Shared activation counter; checkpoint sub-graphs bump their parent's.
#[derive(Clone, Default)]
pub struct ActivationCounter(Rc<Cell<CounterState>>);

impl ActivationCounter {
    fn add(&self, n: usize) {
        let mut s = self.0.get();
        s.live += n;
        s.peak = s.peak.max(s.live);
        self.0.set(s);
    }

    fn sub(&self, n: usize) {
        let mut s = self.0.get();
        s.live = s.live.saturating_sub(n);
        self.0.set(s);
    }

    /// High-water mark of live interior activation elements; monotone
    /// within a pass.
    pub fn peak(&self) -> usize {
        self.0.get().peak
    }

    pub fn live(&self) -> usize {
        self.0.get().live
    }
}

/// One forward/backward tape over a shared parameter store.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    store: StoreHandle<T>,
    /// Dropout is active only in training mode.
    train: bool,
    seed: u64,
    dropout_pos: u64,
    counter: ActivationCounter,
    /// Per-node gradients of the most recent backward pass.
    pub(crate) node_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph (dropout disabled).
    pub fn new(store: StoreHandle<T>) -> Self {
        Self::with_mode(store, false, 0)
    }

    /// `train` enables dropout; `seed` keys its masks (derive it from the
    /// run seed and step so replays are identical).
    pub fn with_mode(store: StoreHandle<T>, train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            train,
            seed,
            dropout_pos: 0,
            counter: ActivationCounter::default(),
            node_grads: Vec::new(),
        }
    }

    fn sub_graph(&self, dropout_base: u64) -> Graph<T> {
        Graph {
            nodes: Vec::new(),
            store: Rc::clone(&self.store),
            train: self.train,
            seed: self.seed,
            dropout_pos: dropout_base,
            counter: self.counter.clone(),
            node_grads: Vec::new(),
        }
    }

    pub fn store(&self) -> StoreHandle<T> {
        Rc::clone(&self.store)
    }

    pub fn counter(&self) -> &ActivationCounter {
        &self.counter
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, id: Tid) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: Tid) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Interior activation elements this graph's nodes dropped on release.
    fn counted_total(&self) -> usize {
        self.nodes.iter().map(|n| n.counted).sum()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, counted: bool) -> Tid {
        debug_assert!(
            value.all_finite(),
            "non-finite values produced by {} (shape {:?})",
            op_name(&op),
            value.shape()
        );
        let requires_grad = match &op {
            Op::Leaf { requires_grad, .. } => *requires_grad,
            other => op_inputs(other).iter().any(|t| self.nodes[t.0].requires_grad),
        };
        let counted = if counted { value.len() } else { 0 };
        self.counter.add(counted);
        self.nodes.push(Node { op, value, requires_grad, counted });
        Tid(self.nodes.len() - 1)
    }

    // ---- leaves ----------------------------------------------------------

    /// Constant leaf; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Tid {
        self.push(Op::Leaf { param: None, requires_grad: false }, value, false)
    }

    /// Non-parameter leaf that still receives a gradient (for tests and
    /// finite-difference probes).
    pub fn input(&mut self, value: Tensor<T>) -> Tid {
        self.push(Op::Leaf { param: None, requires_grad: true }, value, false)
    }

    /// Leaf bound to a stored parameter; its gradient accumulates under the
    /// parameter id.
    pub fn param(&mut self, id: ParamId) -> Tid {
        let value = self.store.borrow().value(id);
        self.push(Op::Leaf { param: Some(id), requires_grad: true }, value, false)
    }

    // ---- operator set ----------------------------------------------------

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid, GraphError> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul { a, b }, v, true))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid, GraphError> {
        let v = kernels::binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, v, true))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid, GraphError> {
        let v = kernels::binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, v, true))
    }

    pub fn scale(&mut self, a: Tid, c: T) -> Tid {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale { a, c }, v, true)
    }

    pub fn exp(&mut self, a: Tid) -> Tid {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp { a }, v, true)
    }

    pub fn log(&mut self, a: Tid) -> Tid {
        let v = self.value(a).map(|x| x.ln());
        self.push(Op::Log { a }, v, true)
    }

    pub fn softplus(&mut self, a: Tid) -> Tid {
        let v = self.value(a).map(softplus_val);
        self.push(Op::Softplus { a }, v, true)
    }

    pub fn silu(&mut self, a: Tid) -> Tid {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu { a }, v, true)
    }

    pub fn softmax_causal_masked(&mut self, a: Tid) -> Result<Tid, GraphError> {
        let v = kernels::softmax_causal(self.value(a))?;
        Ok(self.push(Op::SoftmaxCausal { a }, v, true))
    }

    pub fn rms_norm(&mut self, a: Tid, gain: Tid) -> Result<Tid, GraphError> {
        let eps = T::from_f64(1e-6);
        let v = kernels::rms_norm(self.value(a), self.value(gain), eps)?;
        Ok(self.push(Op::RmsNorm { a, gain, eps }, v, true))
    }

    pub fn embedding_gather(&mut self, table: Tid, ids: Arc<Vec<u32>>) -> Result<Tid, GraphError> {
        let v = kernels::gather(self.value(table), &ids)?;
        Ok(self.push(Op::Gather { table, ids }, v, true))
    }

    pub fn reshape(&mut self, a: Tid, shape: &[usize]) -> Result<Tid, GraphError> {
        let v = self.value(a).reshaped(shape)?;
        // Shares the input buffer; contributes nothing to the counter.
        Ok(self.push(Op::Reshape { a }, v, false))
    }

    pub fn permute(&mut self, a: Tid, axes: &[usize]) -> Result<Tid, GraphError> {
        let v = kernels::permute(self.value(a), axes)?;
        Ok(self.push(Op::Permute { a, axes: axes.to_vec() }, v, true))
    }

    pub fn slice(&mut self, a: Tid, axis: usize, start: usize, len: usize) -> Result<Tid, GraphError> {
        let v = kernels::slice(self.value(a), axis, start, len)?;
        Ok(self.push(Op::Slice { a, axis, start }, v, true))
    }

    pub fn concat(&mut self, parts: &[Tid], axis: usize) -> Result<Tid, GraphError> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|t| &self.nodes[t.0].value).collect();
        let v = kernels::concat(&tensors, axis)?;
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, v, true))
    }

    pub fn pad_constant(
        &mut self,
        a: Tid,
        axis: usize,
        before: usize,
        after: usize,
        value: T,
    ) -> Result<Tid, GraphError> {
        let v = kernels::pad_constant(self.value(a), axis, before, after, value)?;
        Ok(self.push(Op::PadConstant { a, axis, before }, v, true))
    }

    /// `h_t = decay_t * h_{t-1} + input_t` along axis 1; `associative`
    /// selects the tree-combined evaluation of the same recurrence.
    pub fn cumulative_scan(&mut self, decay: Tid, input: Tid, associative: bool) -> Result<Tid, GraphError> {
        let v = kernels::linear_scan(self.value(decay), self.value(input), associative)?;
        Ok(self.push(Op::LinearScan { decay, input }, v, true))
    }

    /// Rotary position rotation on `[K, H, P, Dh]`.
    pub fn rotary(&mut self, a: Tid) -> Result<Tid, GraphError> {
        let v = kernels::rotary(self.value(a), 1.0)?;
        Ok(self.push(Op::Rotary { a }, v, true))
    }

    /// Mean masked NLL (natural log) of `targets` under `logits [R, V]`.
    pub fn cross_entropy(
        &mut self,
        logits: Tid,
        targets: Arc<Vec<u32>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<Tid, GraphError> {
        let v = kernels::cross_entropy(self.value(logits), &targets, &mask)?;
        Ok(self.push(Op::CrossEntropy { logits, targets, mask }, v, true))
    }

    pub fn sum(&mut self, a: Tid) -> Tid {
        let v = kernels::sum_all(self.value(a));
        self.push(Op::Sum { a }, v, true)
    }

    pub fn sum_axis(&mut self, a: Tid, axis: usize) -> Result<Tid, GraphError> {
        let v = kernels::sum_axis(self.value(a), axis)?;
        Ok(self.push(Op::SumAxis { a, axis }, v, true))
    }

    /// Inverted dropout; identity in eval mode or at prob 0.
    pub fn dropout(&mut self, a: Tid, prob: f64) -> Tid {
        if !self.train || prob <= 0.0 {
            return a;
        }
        let stream = self.dropout_pos;
        self.dropout_pos += 1;
        let v = dropout_apply(self.value(a), prob, self.seed, stream);
        self.push(Op::Dropout { a, prob, stream }, v, true)
    }

    /// Evaluate `region` over `inputs` while keeping only the region's
    /// inputs and output on this tape; interiors are recomputed during
    /// backward. The region must be pure.
    pub fn checkpoint(&mut self, inputs: &[Tid], region: RegionFn<T>) -> Result<Tid, GraphError> {
        let dropout_base = self.dropout_pos;
        let mut sub = self.sub_graph(dropout_base);
        let sub_inputs: Vec<Tid> = inputs
            .iter()
            .map(|&t| {
                let value = self.nodes[t.0].value.clone();
                let requires = self.nodes[t.0].requires_grad;
                if requires {
                    sub.input(value)
                } else {
                    sub.leaf(value)
                }
            })
            .collect();
        let out = region(&mut sub, &sub_inputs)?;
        let value = sub.nodes[out.0].value.clone();
        self.dropout_pos = sub.dropout_pos;
        // The sub-tape and its interiors are dropped here.
        let released = sub.counted_total();
        drop(sub);
        self.counter.sub(released);
        // An output that aliases an input buffer stores nothing new.
        let counted = !inputs.iter().any(|&t| value.ptr_eq(self.value(t)));
        Ok(self.push(Op::Checkpoint { inputs: inputs.to_vec(), region, dropout_base }, value, counted))
    }

    /// Reverse-mode sweep from a scalar loss. Visits each node exactly once
    /// and returns gradients for every parameter leaf reachable from the
    /// loss; unused parameters read as zeros via [`Gradients::of`].
    pub fn backward(&mut self, loss: Tid) -> Result<Gradients<T>, GraphError> {
        if !self.value(loss).shape().is_empty() {
            return Err(GraphError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let l = self.value(loss).item().to_f64_();
        if !l.is_finite() {
            return Err(GraphError::NonFiniteLoss(l));
        }
        let n = self.store.borrow().len();
        let mut grads = Gradients::empty(n);
        let seed = Tensor::scalar(T::one());
        self.backward_seeded(loss, seed, &mut grads)?;
        Ok(grads)
    }

    /// Gradient of one node's value (populated by the last backward call).
    pub fn grad_of(&self, id: Tid) -> Option<&Tensor<T>> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn dropout_apply<T: Scalar>(x: &Tensor<T>, prob: f64, seed: u64, stream: u64) -> Tensor<T> {
    let mut rng = Rng::derive(seed, &format!("dropout/{stream}"));
    let keep = T::from_f64(1.0 / (1.0 - prob));
    let data = x
        .data()
        .iter()
        .map(|&v| if rng.uniform() < prob { T::zero() } else { v * keep })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub(crate) fn op_inputs<T: Scalar>(op: &Op<T>) -> Vec<Tid> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Scale { a, .. }
        | Op::Exp { a }
        | Op::Log { a }
        | Op::Softplus { a }
        | Op::Silu { a }
        | Op::SoftmaxCausal { a }
        | Op::Reshape { a }
        | Op::Permute { a, .. }
        | Op::Slice { a, .. }
        | Op::PadConstant { a, .. }
        | Op::Rotary { a }
        | Op::Sum { a }
        | Op::SumAxis { a, .. }
        | Op::Dropout { a, .. } => vec![*a],
        Op::RmsNorm { a, gain, .. } => vec![*a, *gain],
        Op::Gather { table, .. } => vec![*table],
        Op::Concat { parts, .. } => parts.clone(),
        Op::LinearScan { decay, input } => vec![*decay, *input],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Checkpoint { inputs, .. } => inputs.clone(),
    }
}

pub(crate) fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::Softplus { .. } => "softplus",
        Op::Silu { .. } => "silu",
        Op::SoftmaxCausal { .. } => "softmax_causal_masked",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Gather { .. } => "embedding_gather",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::PadConstant { .. } => "pad_constant",
        Op::LinearScan { .. } => "cumulative_scan",
        Op::Rotary { .. } => "rotary",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum { .. } => "sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::Dropout { .. } => "dropout",
        Op::Checkpoint { .. } => "checkpoint",
    }
}
