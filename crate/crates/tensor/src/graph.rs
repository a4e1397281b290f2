//! Define-by-run tape and reverse-mode differentiation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::array::Array;
use crate::params::{ParamId, ParamStore};

/// Computes parent gradients from the output gradient. The second argument flags
/// which parents require a gradient; entries for the others may be `None`.
pub type BackwardFn = Box<dyn Fn(&Array, &[bool]) -> Vec<Option<Array>>>;

struct Node {
    value: Rc<Array>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// A single forward computation. Drop it (or call [`Graph::backward`]) once done.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// An input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Array) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// Reads a parameter. Frozen parameters enter the tape as constants, so no
    /// gradient is ever formed for them.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_node(Node {
            value: store.shared(id),
            requires_grad: store.is_trainable(id),
            parents: Vec::new(),
            backward: None,
            param: Some(id),
        })
    }

    /// Records the result of an operation. `backward` is dropped when no parent
    /// requires a gradient.
    pub fn op<'g>(
        &'g self,
        parents: &[Var<'g>],
        value: Array,
        backward: impl Fn(&Array, &[bool]) -> Vec<Option<Array>> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                assert!(std::ptr::eq(p.graph, self), "variable from another graph");
                nodes[p.id].requires_grad
            })
        };
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            param: None,
        })
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let seed = {
            let nodes = self.nodes.borrow();
            let v = &nodes[output.id].value;
            assert_eq!(v.len(), 1, "backward from non-scalar of shape {:?}", v.shape());
            Array::ones(v.shape())
        };
        self.backward_with(output, seed)
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with(&self, output: Var<'_>, seed: Array) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Array>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(seed);
        let mut out = Gradients::default();
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let pg = bw(&g, &needs);
                debug_assert_eq!(pg.len(), node.parents.len());
                for ((&p, gp), need) in node.parents.iter().zip(pg).zip(&needs) {
                    let (Some(gp), true) = (gp, *need) else { continue };
                    debug_assert_eq!(gp.shape(), nodes[p].value.shape(), "gradient shape");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&gp),
                        slot @ None => *slot = Some(gp),
                    }
                }
            } else if let Some(pid) = node.param {
                out.params.insert(pid, g);
            } else {
                out.inputs.insert(id, g);
            }
        }
        out
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Array> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// Gradients produced by one reverse pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Array>,
    inputs: HashMap<usize, Array>,
}

impl Gradients {
    /// Gradient of a trainable parameter; `None` for frozen or unused parameters.
    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.get(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn take_param(&mut self, id: ParamId) -> Option<Array> {
        self.params.remove(&id)
    }

    /// Gradient of an [`Graph::input`] leaf.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Array> {
        self.inputs.get(&v.id)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids.iter().map(|id| self.params[id].sum_sq()).sum::<f64>().sqrt()
    }

    /// Rescales parameter gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.values_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}
