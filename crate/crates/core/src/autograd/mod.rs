//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! A [`Graph`] lives for one forward (and optionally one backward) pass. Every
//! operation returns a [`Var`] holding its value; when gradients are enabled
//! and at least one input requires a gradient, the op also appends a node with
//! a backward closure to the tape. Node ids are allocated in execution order,
//! so a reverse sweep over the tape is a valid topological order.
//!
//! Model parameters are not owned by the graph. [`Graph::param`] turns a
//! [`Param`] into a leaf and remembers the mapping, so [`Grads::param`] can
//! hand the optimizer a gradient per parameter id.

mod conv;
mod norm;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use conv::Conv2dOptions;

/// Dense f32 tensor with dynamic rank.
pub type Tensor = ArrayD<f32>;

/// Per-parent gradient; `None` where the parent does not need one.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a parameter tensor inside one process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named tensor owned by a module. Buffers (e.g. batch-norm running
/// statistics) are params with `trainable == false`.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    value: Arc<Tensor>,
    trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { id: ParamId::fresh(), value: Arc::new(value), trainable: true }
    }

    pub fn buffer(value: Tensor) -> Self {
        Self { id: ParamId::fresh(), value: Arc::new(value), trainable: false }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Mutable access; clones the storage if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        self.value = Arc::new(value);
    }
}

/// A value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_value(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Scalar value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.value.len(), 1);
        *self.value.iter().next().expect("empty tensor")
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("shape", &self.shape()).field("node", &self.node).finish()
    }
}

/// Execution tape for one pass.
pub struct Graph {
    training: bool,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor)>>,
    rng: RefCell<ChaCha8Rng>,
}

impl Graph {
    /// Training mode: dropout and batch statistics active, gradients recorded.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, true, seed)
    }

    /// Eval mode without a tape; the cheapest way to run inference.
    pub fn inference() -> Self {
        Self::with_mode(false, false, 0)
    }

    /// Eval-mode numerics with gradients recorded (input-saliency checks).
    pub fn eval_with_grad() -> Self {
        Self::with_mode(false, true, 0)
    }

    pub fn with_mode(training: bool, grad_enabled: bool, seed: u64) -> Self {
        Self {
            training,
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn tape_len(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        Var { value: Arc::new(value), node: None }
    }

    /// A leaf that receives a gradient when the graph records one.
    pub fn input(&self, value: Tensor) -> Var {
        let node = self.leaf();
        Var { value: Arc::new(value), node }
    }

    /// Bind a parameter. Trainable params become gradient leaves.
    pub fn param(&self, p: &Param) -> Var {
        if !(self.grad_enabled && p.trainable) {
            return Var { value: Arc::clone(&p.value), node: None };
        }
        let mut map = self.param_nodes.borrow_mut();
        let node = *map.entry(p.id).or_insert_with(|| self.leaf().expect("grad enabled"));
        Var { value: Arc::clone(&p.value), node: Some(node) }
    }

    fn leaf(&self) -> Option<usize> {
        if !self.grad_enabled {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None });
        Some(nodes.len() - 1)
    }

    /// Wrap `value` as the output of an op over `parents`.
    fn record<F>(&self, value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let tracked = self.grad_enabled && parents.iter().any(|p| p.node.is_some());
        if !tracked {
            return Var { value: Arc::new(value), node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.node.unwrap_or(usize::MAX)).collect();
        nodes.push(Node { parents: ids, backward: Some(Box::new(backward)) });
        Var { value: Arc::new(value), node: Some(nodes.len() - 1) }
    }

    pub(crate) fn push_buffer_update(&self, id: ParamId, value: Tensor) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by training-mode normalization.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    pub(crate) fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: &Var) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = output.node else {
            return Grads { by_node: grads, params: self.param_nodes.borrow().clone() };
        };
        grads[root] = Some(Tensor::ones(output.value.raw_dim()));
        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| p != usize::MAX).collect();
                let parent_grads = backward(&grad, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&parent, pg) in node.parents.iter().zip(parent_grads) {
                    if parent == usize::MAX {
                        continue;
                    }
                    if let Some(pg) = pg {
                        match &mut grads[parent] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            // Leaves keep their gradient for the caller.
            if node.backward.is_none() {
                grads[id] = Some(grad);
            }
        }
        Grads { by_node: grads, params: self.param_nodes.borrow().clone() }
    }
}

/// Gradients of a backward pass, addressable by [`Var`] leaf or [`ParamId`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Grads {
    pub fn of(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.by_node.get(n)).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.by_node[n].as_ref())
    }
}

/// Sum `grad` down to `shape` after broadcasting.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(ndarray::Axis(axis)).insert_axis(ndarray::Axis(axis));
        }
    }
    g.into_shape_with_order(IxDyn(shape)).expect("broadcast-compatible gradient")
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = Tensor::ones(IxDyn(&[2, 3, 4]));
        let r = sum_to_shape(&g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn param_reuse_maps_to_one_leaf() {
        let p = Param::new(array![1.0f32, 2.0].into_dyn());
        let g = Graph::training(0);
        let a = g.param(&p);
        let b = g.param(&p);
        let y = g.mul(&a, &b);
        let y = g.sum_all(&y);
        let grads = g.backward(&y);
        // d/dp sum(p*p) = 2p
        let gp = grads.param(p.id()).unwrap();
        assert_eq!(gp.as_slice().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let p = Param::new(array![1.0f32, 2.0].into_dyn());
        let g = Graph::inference();
        let a = g.param(&p);
        let y = g.relu(&a);
        assert!(!y.requires_grad());
        assert_eq!(g.tape_len(), 0);
    }

    #[test]
    fn buffers_are_not_leaves() {
        let p = Param::buffer(array![1.0f32].into_dyn());
        let g = Graph::training(0);
        assert!(!g.param(&p).requires_grad());
    }
}
