//! Tape and variable handles.
//!
//! A [`Graph`] records every operation applied to its variables in creation
//! order. Because an operation can only consume variables that already
//! exist, node ids are a topological order and the reverse pass is a single
//! backwards sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Receives the output gradient and a `needs` mask (one entry per parent) and
/// returns the parent gradients. Entries for parents with `needs[i] == false`
/// may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
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

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub(crate) fn op<'g>(&'g self, value: Tensor, parents: &[Var<'g>], backward: BackwardFn) -> Var<'g> {
        let (requires_grad, parent_ids) = {
            let nodes = self.nodes.borrow();
            let ids: Vec<usize> = parents
                .iter()
                .map(|p| {
                    debug_assert!(std::ptr::eq(p.graph, self), "variable from another graph");
                    p.id
                })
                .collect();
            (ids.iter().any(|&i| nodes[i].requires_grad), ids)
        };
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: if requires_grad { parent_ids } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    pub fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass seeded with ones at `root`. Only leaf gradients are
    /// retained in the result.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Copyable handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// The single element of a scalar (or one-element) variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// A constant copy of this value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value().raw_dim()))
    }
}
