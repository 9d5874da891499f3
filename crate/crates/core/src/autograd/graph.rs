use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

thread_local! {
    static SIGN_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` with the backward pass of every op named `op` negated. Used to
/// confirm that gradient checks catch a wrong derivative.
pub fn with_sign_fault<R>(op: &'static str, f: impl FnOnce() -> R) -> R {
    let prev = SIGN_FAULT.with(|c| c.replace(Some(op)));
    let out = f();
    SIGN_FAULT.with(|c| c.set(prev));
    out
}

/// Names accepted by [`with_sign_fault`].
pub const OP_NAMES: &[&str] = &[
    "matmul", "add", "sub", "mul", "add_row", "scale", "reshape", "add_scalar", "relu", "sum", "softmax_rows", "log_softmax_rows", "layer_norm_rows", "pick",
    "hellinger_pairs", "segment_logsumexp", "lovasz_softmax", "scal_geo", "scal_sem", "gather_rows", "scatter_rows", "concat_rows", "repeat_rows",
    "sparse_combine", "neighbor_conv", "deform_sample", "segment_attention",
];

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Reverse-mode tape. Values are recorded as operations execute; `backward`
/// replays the tape in reverse.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), record: true }
    }

    /// A forward-only graph; no gradients can be taken.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, false, None)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, self.record, None)
    }

    /// The node bound to a parameter; repeated requests return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.leaf(store.get(id).clone());
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Makes later [`Graph::param`] requests for `id` return `v`.
    pub fn bind_param(&self, id: ParamId, v: Var<'_, T>) {
        assert!(std::ptr::eq(v.graph, self), "var belongs to another graph");
        self.params.borrow_mut().insert(id, v.id);
    }

    fn push_node(&self, value: Tensor<T>, requires_grad: bool, backward: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, backward });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn value_rc(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records an op result. The backward closure is kept only when recording
    /// and at least one parent needs a gradient.
    pub(crate) fn op(
        &self,
        name: &'static str,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl Fn(&Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Var<'_, T> {
        let needs = self.record && parents.iter().any(|&p| self.requires_grad(p));
        if needs {
            if SIGN_FAULT.with(|c| c.get()) == Some(name) {
                let flipped = move |g: &Tensor<T>, sink: &mut GradSink<T>| {
                    let neg = Tensor::new(g.rows, g.cols, g.data.iter().map(|&v| -v).collect());
                    backward(&neg, sink)
                };
                return self.push_node(value, true, Some(Box::new(flipped)));
            }
            self.push_node(value, true, Some(Box::new(backward)))
        } else {
            self.push_node(value, false, None)
        }
    }

    /// Gradients of a scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        self.backward_seeded(loss, Tensor::full(1, 1, T::one()))
    }

    pub fn backward_seeded(&self, out: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.id].value.shape(), seed.shape(), "seed shape mismatch");
        let mut sink = GradSink {
            grads: (0..=out.id).map(|_| None).collect(),
            shapes: nodes[..=out.id].iter().map(|n| n.value.shape()).collect(),
            wants: nodes[..=out.id].iter().map(|n| n.requires_grad).collect(),
        };
        let mut leaves = HashMap::new();
        sink.grads[out.id] = Some(seed);
        for id in (0..=out.id).rev() {
            let Some(g) = sink.grads[id].take() else { continue };
            match &nodes[id].backward {
                Some(f) => f(&g, &mut sink),
                None => {
                    if nodes[id].requires_grad {
                        leaves.insert(id, g);
                    }
                }
            }
        }
        Gradients { by_node: leaves, params: self.params.borrow().clone() }
    }
}

/// Accumulator handed to backward closures.
pub struct GradSink<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
    wants: Vec<bool>,
}

impl<T: Real> GradSink<T> {
    #[inline]
    pub fn wants(&self, id: usize) -> bool {
        self.wants[id]
    }

    /// Mutable access to the (zero-initialised) gradient buffer of `id`.
    pub fn buf(&mut self, id: usize) -> &mut Tensor<T> {
        let (r, c) = self.shapes[id];
        self.grads[id].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    pub fn add(&mut self, id: usize, g: &Tensor<T>) {
        if !self.wants[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(buf) => buf.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_owned(&mut self, id: usize, g: Tensor<T>) {
        if !self.wants[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(buf) => buf.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    by_node: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|n| self.by_node.get(n))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_rc(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}
