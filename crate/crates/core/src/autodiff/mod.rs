//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and a backward closure.
//! `Tape::backward` walks the nodes in reverse creation order, so gradient
//! accumulation order (and therefore every floating point result) is fixed
//! by the order in which the forward pass was written.

mod kernels;
mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};

pub use kernels::{conv_out_size, ConvGeom};

/// Backward closure: given the gradient of the node's output and which
/// parents need a gradient, return one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents: Vec::new(), backward: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Record the result of an operation. The backward closure is dropped when
    /// no parent requires a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents: if requires_grad { parents.iter().map(|p| p.id).collect() } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagate from a scalar (single-element) output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.id].value;
        assert_eq!(out_val.numel(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::ones(out_val.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let flags: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &flags);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the leaves of a tape after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on non-scalar tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    /// A gradient-free copy of this value.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf(self.value(), false)
    }
}
