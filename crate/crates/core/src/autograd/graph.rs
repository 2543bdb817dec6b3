use std::cell::RefCell;
use std::sync::Arc;

use super::Tensor;

/// Receives the gradient of a node's output and a per-parent flag saying
/// whether that parent needs a gradient; returns one slot per parent.
pub(crate) type BackwardFn = Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// A value in a computation, optionally tracked by a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }
}

/// Reverse-mode tape. A graph built with [`Graph::inference`] records
/// nothing, so intermediate values are freed as soon as they go out of
/// scope.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
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

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            id: None,
            value: Arc::new(t),
        }
    }

    /// A trainable input whose gradient is kept by [`Graph::backward`].
    pub fn leaf(&self, t: Arc<Tensor>) -> Var {
        if !self.grad_enabled {
            return Var { id: None, value: t };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id: Some(nodes.len() - 1),
            value: t,
        }
    }

    /// Record an op output. `make_backward` is only invoked when at least
    /// one parent is tracked.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[&Var], make_backward: F) -> Var
    where
        F: FnOnce() -> BackwardFn,
    {
        let tracked = self.grad_enabled && parents.iter().any(|p| p.id.is_some());
        if !tracked {
            return Var {
                id: None,
                value: Arc::new(value),
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(make_backward()),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Arc::new(value),
        }
    }

    /// Back-propagate from a scalar output. Gradients of leaves are kept;
    /// interior gradients and saved activations are released as the sweep
    /// passes them.
    pub fn backward(&self, output: &Var) -> Gradients {
        assert_eq!(output.value.len(), 1, "backward() needs a scalar output");
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = output.id else {
            return Gradients { grads };
        };
        grads[root] = Some(Tensor::new(output.value.shape().to_vec(), vec![1.0]));
        let mut kept: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                kept[id] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else { continue };
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads: kept }
    }
}

/// Gradients of the leaves reachable from a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        v.id.and_then(|id| self.grads.get_mut(id)).and_then(Option::take)
    }
}
