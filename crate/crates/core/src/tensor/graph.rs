use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule of a node: receives the gradient of the node's output and
/// pushes gradients into its inputs through the [`GradSink`].
pub type Backward<F> = Box<dyn Fn(&Tensor<F>, &mut GradSink<'_, F>)>;

struct Node<F: Real> {
    value: Rc<Tensor<F>>,
    tracked: bool,
    parents: Vec<usize>,
    backward: Option<Backward<F>>,
}

/// A computation graph recorded while the forward pass runs.
///
/// Nodes are appended in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. A graph is built fresh for every
/// training step and dropped afterwards.
pub struct Graph<F: Real = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, F: Real = f32> {
    pub(crate) graph: &'g Graph<F>,
    pub(crate) id: usize,
}

impl<F: Real> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Real> Copy for Var<'_, F> {}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<'g, F: Real> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id].tracked
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var<'g, F> {
        let v = self.value();
        self.graph.push(v, false, vec![], None)
    }
}

/// Destination for gradients produced by a backward rule.
pub struct GradSink<'a, F: Real> {
    parents: &'a [usize],
    tracked: &'a [bool],
    grads: &'a mut [Option<Tensor<F>>],
    shapes: &'a [Vec<usize>],
}

impl<F: Real> GradSink<'_, F> {
    /// Whether input `slot` needs a gradient at all.
    pub fn wants(&self, slot: usize) -> bool {
        self.tracked[slot]
    }

    /// Accumulates `grad` into input `slot`.
    pub fn add(&mut self, slot: usize, grad: Tensor<F>) {
        if !self.tracked[slot] {
            return;
        }
        let id = self.parents[slot];
        debug_assert_eq!(grad.shape(), self.shapes[slot].as_slice());
        match &mut self.grads[id] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Gives mutable access to the (zero-initialised if absent) gradient
    /// buffer of input `slot`, for in-place accumulation.
    pub fn with(&mut self, slot: usize, f: impl FnOnce(&mut [F])) {
        if !self.tracked[slot] {
            return;
        }
        let id = self.parents[slot];
        let shape = &self.shapes[slot];
        let g = self.grads[id].get_or_insert_with(|| Tensor::zeros(shape));
        f(g.data_mut());
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `var`; all-zero when `var` does not influence the loss.
    pub fn wrt(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var.id)
    }

    pub fn get(&self, id: usize) -> Tensor<F> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    pub fn take(&mut self, id: usize) -> Tensor<F> {
        match self.grads[id].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    pub fn reaches(&self, var: Var<'_, F>) -> bool {
        self.grads[var.id].is_some()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Rc<Tensor<F>>,
        tracked: bool,
        parents: Vec<usize>,
        backward: Option<Backward<F>>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            tracked,
            parents,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(Rc::new(value), true, vec![], None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(Rc::new(value), false, vec![], None)
    }

    pub fn value(&self, var: Var<'_, F>) -> Rc<Tensor<F>> {
        self.nodes.borrow()[var.id].value.clone()
    }

    /// Records an operation with a hand-written backward rule.
    ///
    /// The rule is kept only if some input is tracked; otherwise the result is
    /// a constant.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g, F>],
        value: Tensor<F>,
        backward: impl Fn(&Tensor<F>, &mut GradSink<'_, F>) + 'static,
    ) -> Var<'g, F> {
        let tracked = inputs.iter().any(|v| v.is_tracked());
        if tracked {
            self.push(
                Rc::new(value),
                true,
                inputs.iter().map(|v| v.id).collect(),
                Some(Box::new(backward)),
            )
        } else {
            self.push(Rc::new(value), false, vec![], None)
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Can be called several times on the same graph with different losses.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let loss_shape = &shapes[loss.id];
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.clone()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].tracked {
            grads[loss.id] = Some(Tensor::ones(loss_shape));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let tracked: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_shapes: Vec<Vec<usize>> =
                node.parents.iter().map(|&p| shapes[p].clone()).collect();
            let mut sink = GradSink {
                parents: &node.parents,
                tracked: &tracked,
                grads: &mut grads,
                shapes: &parent_shapes,
            };
            backward(&grad, &mut sink);
        }
        Ok(Gradients { grads, shapes })
    }
}
