//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every differentiable operation pushes a node holding its output value, the ids of its
//! inputs and a closure computing vector-Jacobian products. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order by construction.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one node: given the gradient of the output and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    freed: Cell<bool>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("freed", &self.freed.get())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, shape={:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            freed: Cell::new(false),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates eagerly but never records backward closures.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients in [`Tape::backward`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        })
    }

    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Record the result of an operation. `backward` is only kept when some parent needs a
    /// gradient. Fails with [`Error::NonFinite`] if the value contains NaN or infinity.
    pub fn custom<'t, F>(
        &'t self,
        op: &str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: F,
    ) -> Result<Var<'t>>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        }))
    }

    /// Back-propagate from a scalar `loss`. The graph is freed afterwards; a second call on
    /// the same tape fails with [`Error::GraphFreed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.freed.get() {
            return Err(Error::GraphFreed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        self.freed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(&loss_shape, 1.0));
        for id in (0..=loss.id).rev() {
            let Some(bw) = nodes[id].backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parents = nodes[id].parents.clone();
            let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = bw(&g, &needs);
            debug_assert_eq!(pgrads.len(), parents.len());
            for ((&p, pg), need) in parents.iter().zip(pgrads).zip(needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                if !pg.is_finite() {
                    return Err(Error::NonFinite(format!("gradient flowing into node {p}")));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Intermediate nodes keep nothing; only leaves report gradients.
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.parents.is_empty() || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
