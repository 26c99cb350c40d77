//! Dynamically recorded reverse-mode autodiff tape.
//!
//! Every forward pass records onto a fresh [`Graph`]. Node ids are handed
//! out in creation order, which is already a topological order, so the
//! backward sweep is a single reverse scan. Backward closures are consumed
//! by the sweep; a second `backward` without [`Graph::reset`] is an error.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::array::Tensor;
use crate::error::{Error, Result};

/// Maps the gradient of a node's output to gradients of its inputs, one
/// entry per input in recording order (`None` for inputs without grad).
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    requires_grad: bool,
    is_leaf: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}<{}>{:?}", self.id, n.op, n.value.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(Node {
            op: "leaf",
            value: Rc::new(value),
            requires_grad,
            is_leaf: true,
            parents: Vec::new(),
            backward: None,
        });
        Var { graph: self, id }
    }

    /// Record the result of an operation on `inputs`.
    ///
    /// `backward` is only retained when at least one input requires a
    /// gradient. The value must be finite.
    pub fn record<'g, F>(
        &'g self,
        op: &'static str,
        inputs: &[Var<'g>],
        value: Tensor,
        backward: F,
    ) -> Result<Var<'g>>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let id = self.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            is_leaf: false,
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var { graph: self, id })
    }

    /// Run the reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Autodiff(
                "backward already ran on this graph; call reset() first".into(),
            ));
        }
        let loss_value = loss.value();
        if loss_value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(loss_value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.is_leaf {
                continue;
            }
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            let parents = node.parents.clone();
            for (pid, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[pid].value.shape(),
                    "gradient shape from op {}",
                    nodes[id].op
                );
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaf gradients are kept.
        for (id, node) in nodes.iter().enumerate() {
            if !node.is_leaf {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of a trainable leaf after `backward`. Leaves the loss did
    /// not depend on report a zero gradient.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !node.requires_grad || !node.is_leaf || !self.consumed.get() {
            return None;
        }
        let grads = self.grads.borrow();
        Some(
            grads
                .get(var.id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
        )
    }

    /// Clear gradients so the graph may be swept again. Backward closures
    /// consumed by the previous sweep are gone, so only a freshly recorded
    /// suffix of the graph can be differentiated afterwards.
    pub fn reset(&self) {
        self.grads.borrow_mut().clear();
        self.consumed.set(false);
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        let value = (*self.value()).clone();
        self.graph.constant(value)
    }
}
