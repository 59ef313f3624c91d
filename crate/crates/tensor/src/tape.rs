//! Recording tape and reverse-mode gradient propagation.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::array::Array;

pub(crate) type BackwardFn = Box<dyn Fn(&Array, &mut Gradients)>;

struct Node {
    value: Rc<Array>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// An append-only record of operations.
///
/// Nodes are stored in creation order, which is also a valid topological order,
/// so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives gradients.
    pub fn var(&self, value: Array) -> Var<'_> {
        self.push(Rc::new(value), true, None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(Rc::new(value), false, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: Rc<Array>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates gradients from a scalar `loss` back to every node that
    /// requires them.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward() needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads = Gradients {
            grads: (0..nodes.len()).map(|_| None).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !nodes[loss.id].requires_grad {
            return grads;
        }
        grads.grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            // Interior gradients are released once consumed; leaves keep theirs.
            if let Some(g) = grads.grads[id].take() {
                backward(&g, &mut grads);
            }
        }
        grads
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it received any.
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, or zeros of the leaf's shape when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Array {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array::zeros(var.shape()))
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Mutable gradient buffer for node `id`, zero-initialised on first use.
    pub(crate) fn slot(&mut self, id: usize, shape: &[usize]) -> &mut [f64] {
        self.grads[id]
            .get_or_insert_with(|| Array::zeros(shape))
            .data_mut()
    }
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}
