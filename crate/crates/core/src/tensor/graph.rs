use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use super::ops::Op;
use super::{accumulate, NodeRef, Real, Tensor, TensorInner};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

struct Node<F: Real> {
    op: Op<F>,
    inputs: Vec<Tensor<F>>,
    output: Weak<TensorInner<F>>,
}

/// Record of the operations executed in one forward pass.
///
/// Nodes are stored in creation order, which is a valid topological order;
/// [`Graph::backward`] walks them in exact reverse.
pub struct Graph<F: Real> {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A graph that never records: every output is a constant.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Wrap a freshly computed value, recording `op` when any input needs a
    /// gradient. Nodes whose inputs are all gradient-free are dropped.
    pub(super) fn record(
        &self,
        op: Op<F>,
        inputs: &[&Tensor<F>],
        shape: Vec<usize>,
        data: Vec<F>,
    ) -> Result<Tensor<F>> {
        let needs_grad = inputs.iter().any(|t| t.requires_grad());
        if !self.recording || !needs_grad {
            return Ok(Tensor::from_parts(shape, data, false, None));
        }
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        if inputs
            .iter()
            .any(|t| t.node().is_some_and(|n| n.graph != self.id))
        {
            return Err(Error::ForeignGraph);
        }
        let mut nodes = self.nodes.borrow_mut();
        let node = NodeRef {
            graph: self.id,
            index: nodes.len(),
        };
        let out = Tensor::from_parts(shape, data, true, Some(node));
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            output: Arc::downgrade(out.inner()),
        });
        Ok(out)
    }

    /// Propagate gradients from a scalar `loss` to every reachable tensor that
    /// requires one. Consumes the graph; returns the number of nodes visited.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<usize> {
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape().to_vec()));
        }
        self.consumed.set(true);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let start = match loss.node() {
            None => return Ok(0),
            Some(n) if n.graph != self.id => return Err(Error::ForeignGraph),
            Some(n) => n.index,
        };

        let mut adjoints: Vec<Option<Vec<F>>> = vec![None; start + 1];
        adjoints[start] = Some(vec![F::one()]);
        let mut visited = 0;
        for index in (0..=start).rev() {
            let Some(out_grad) = adjoints[index].take() else {
                continue;
            };
            visited += 1;
            let node = &nodes[index];
            let grads = node.op.backward(&node.inputs, &out_grad);
            debug_assert_eq!(grads.len(), node.inputs.len());
            for (input, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                match input.node() {
                    Some(n) => accumulate(&mut adjoints[n.index], grad),
                    None => input.accumulate_grad(grad),
                }
            }
            if let Some(out) = node.output.upgrade() {
                out.set_grad(out_grad);
            }
        }
        Ok(visited)
    }
}
