//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. Node ids are allocated in evaluation order, so the tape is
//! topologically sorted by construction and a single reverse sweep visits
//! every node once.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &mut GradSink<'_, S>)>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<BackwardFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(Rc::new(value), false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(Rc::new(value), true)
    }

    pub(crate) fn leaf(&self, value: Rc<Tensor<S>>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            leaf: true,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an operation result. The backward rule is dropped when no
    /// input tracks gradients.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<S>,
        inputs: &[usize],
        backward: BackwardFn<S>,
    ) -> Var<'_, S> {
        debug_assert!(value.all_finite(), "{op} produced non-finite values");
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            leaf: false,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Propagates d(root)/d(node) to every gradient-tracking leaf reachable
    /// from `root`.
    pub fn backward(&self, root: Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::ForeignRoot);
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        if root_node.requires_grad {
            grads[root.id] = Some(vec![S::one()]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let mut sink = GradSink {
                    grads: &mut grads,
                    nodes: &nodes,
                };
                bw(&g, &mut sink);
            }
            if node.leaf {
                grads[id] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Accumulator handed to backward rules.
pub struct GradSink<'a, S: Scalar> {
    grads: &'a mut [Option<Vec<S>>],
    nodes: &'a [Node<S>],
}

impl<S: Scalar> GradSink<'_, S> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Zero-initialised gradient buffer of node `id`, or `None` when the node
    /// does not track gradients.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut [S]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![S::zero(); n]))
    }

    pub(crate) fn add(&mut self, id: usize, g: &[S]) {
        if let Some(slot) = self.slot(id) {
            for (s, &v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
    }
}

/// Gradients of one backward pass, indexed by leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it received none.
    pub fn get_or_zeros(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.leaf(self.value(), false)
    }

    pub fn backward(&self) -> Result<Gradients<S>> {
        self.tape.backward(*self)
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<S>,
        inputs: &[usize],
        backward: BackwardFn<S>,
    ) -> Var<'t, S> {
        self.tape.record(op, value, inputs, backward)
    }
}
