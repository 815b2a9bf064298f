//! Tape-based reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated. Values are
//! computed eagerly; [`Graph::backward`] then walks the tape in reverse and
//! accumulates gradients for every node that transitively depends on a
//! parameter leaf. Nodes that depend only on constants carry no backward
//! closure, so data preprocessing costs nothing on the return path.

mod conv;
pub use conv::BatchStats;
pub mod gradcheck;
mod ops;
mod params;

use std::cell::{Ref, RefCell};

use ndarray::{ArrayD, IxDyn};

pub use params::{Adam, AdamConfig, Binder, ParamStore, BN_EPS};

pub type Array = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule: given the output gradient, the parent values, the output
/// value and a per-parent "needs gradient" mask, return one optional
/// gradient per parent.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Array, &[&Array], &Array, &[bool]) -> Vec<Option<Array>>>;

struct Node {
    value: Array,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
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

    /// Constant leaf. Never receives a gradient.
    pub fn constant(&self, value: Array) -> Var {
        self.push_leaf(value, false)
    }

    /// Trainable leaf.
    pub fn variable(&self, value: Array) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Array, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Record an operation result. The closure is dropped when no parent
    /// requires a gradient.
    pub(crate) fn push_op(&self, value: Array, parents: &[Var], backward: BackwardFn) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let value = &nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar() on a node with {} elements", value.len());
        value.iter().next().copied().unwrap_or(0.0)
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1 for a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = {
            let nodes = self.nodes.borrow();
            Array::ones(nodes[loss.0].value.raw_dim())
        };
        self.backward_with(loss, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Array) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Array> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &parent_values, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        // Leaves have no backward closure, so their accumulated gradients are
        // still in place; interior gradients were consumed above.
        Gradients { grads }
    }
}

/// Gradients of a root with respect to graph leaves.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the given shape when the leaf was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(IxDyn(shape)))
    }
}
