use std::collections::BTreeMap;
use std::rc::Rc;

use super::Tensor;
use crate::nn::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Returns one optional gradient per parent; `needs[i]` tells whether parent `i` wants one.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run reverse-mode tape.
///
/// A graph lives for one forward (and optionally one backward) pass. With
/// tracking disabled no backward closures are retained, which is the inference
/// path.
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

impl Graph {
    pub fn new(track: bool) -> Self {
        Self { nodes: Vec::with_capacity(512), track }
    }

    pub fn inference() -> Self {
        Self::new(false)
    }

    pub fn training() -> Self {
        Self::new(true)
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf that collects a gradient (used by tests and gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        let track = self.track;
        self.push_leaf(value, track, None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let track = self.track && store.is_trainable(id);
        self.push_leaf(store.value(id).clone(), track, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op. `backward` is dropped unless some parent needs a gradient.
    pub(crate) fn push_op<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (parents, backward): (Vec<usize>, Option<BackwardFn>) = if requires_grad {
            (parents.iter().map(|p| p.0).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let root_value = self.value(root);
        assert_eq!(root_value.shape(), (1, 1), "backward() needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let mut leaf_grads: BTreeMap<usize, Tensor> = BTreeMap::new();
        if !self.nodes[root.0].requires_grad {
            return Gradients { leaf_grads, params: BTreeMap::new() };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.backward {
                Some(backward) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect();
                    let parent_grads = backward(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => {
                    if node.requires_grad {
                        leaf_grads.insert(idx, grad);
                    }
                }
            }
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (&idx, g) in &leaf_grads {
            if let Some(id) = self.nodes[idx].param {
                match params.get_mut(&id) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
        }
        Gradients { leaf_grads, params }
    }
}

/// Result of [`Graph::backward`]. Leaves that were not reached have no entry.
pub struct Gradients {
    leaf_grads: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}
