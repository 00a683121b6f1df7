use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use super::Tensor;
use crate::nn::{Param, ParamId};

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Records a forward computation so gradients can be pulled back through it.
///
/// Node ids are handed out in creation order, which is already a topological
/// order, so the backward sweep is a single reverse scan.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    trainable: BTreeSet<ParamId>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
    by_node: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.by_param.get(&p.id())
    }

    pub fn by_id(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Gradient with respect to a leaf created by [`Tape::input`].
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&v.id)
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Tensor::is_finite)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl Tape {
    /// A tape on which no parameter receives gradients.
    pub fn new() -> Self {
        Self::with_trainable(std::iter::empty())
    }

    /// Parameters whose ids are in `trainable` become gradient leaves; every
    /// other parameter is recorded as a constant.
    pub fn with_trainable(trainable: impl IntoIterator<Item = ParamId>) -> Self {
        Self { nodes: RefCell::new(Vec::new()), trainable: trainable.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(Rc::new(t), false, None)
    }

    /// Leaf that receives a gradient when `requires_grad` is set.
    pub fn input(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf(Rc::new(t), requires_grad, None)
    }

    pub fn param(&self, p: &Param) -> Var<'_> {
        let trainable = self.trainable.contains(&p.id());
        self.leaf(p.shared_value(), trainable, trainable.then_some(p.id()))
    }

    fn leaf(&self, value: Rc<Tensor>, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents: Vec::new(), backward: None, param });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            param: None,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.numel(), 1, "backward needs a scalar loss");
        let mut out = Gradients::default();
        if !root.requires_grad {
            return out;
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(bw) => {
                    let parent_grads = bw(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[pid].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None => {
                    if let Some(pid) = node.param {
                        out.by_param.insert(pid, g);
                    } else {
                        out.by_node.insert(id, g);
                    }
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on non-scalar");
        v.data()[0]
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value(), false, None)
    }
}
