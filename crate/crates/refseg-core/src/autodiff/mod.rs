//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! The engine is an eager tape: every operation computes its value
//! immediately and records a backward closure. One [`Graph`] corresponds to
//! one forward pass; [`Graph::backward`] consumes the tape and returns the
//! gradients of a scalar output with respect to every node that needs them.
//!
//! Leaves created with [`Graph::input`] receive gradients; leaves created
//! with [`Graph::constant`] do not, and whole subtrees that depend only on
//! constants skip gradient work entirely. All values are `ArrayD<f64>`;
//! double precision keeps finite-difference checks meaningful.

mod conv;
mod ops;
mod resample;

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use conv::conv2d_shape;
pub use resample::resize_bilinear_2d;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn FnOnce(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Eager computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` required one and received any.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient as an owned array, zero-filled if none was accumulated.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation (frozen parameters, data).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push_leaf(value, false)
    }

    /// 0-d constant.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Re-enter a computed value as a constant (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Rc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            needs_grad: false,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 0-d (or single-element) node as a plain scalar.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        *a.iter().next().expect("empty tensor")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            needs_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Record an op node. `backward` receives the output gradient and returns
    /// one contribution per parent (`None` to skip).
    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: parents.into_iter().map(|p| p.0).collect(),
            needs_grad,
            backward: if needs_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether parent `i` of an op wants a gradient; used by ops to skip
    /// expensive contributions (e.g. weight gradients of frozen layers).
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from `output` (must be 0-d or single-element).
    ///
    /// Consumes the tape's backward closures; a graph supports one backward.
    pub fn backward(&mut self, output: Var) -> Gradients {
        assert!(!self.consumed, "Graph::backward called twice");
        self.consumed = true;
        assert_eq!(
            self.nodes[output.0].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(ArrayD::ones(self.nodes[output.0].value.raw_dim()));

        for i in (0..=output.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(backward) = self.nodes[i].backward.take() else {
                continue;
            };
            let contribs = {
                let g = grads[i].as_ref().expect("grad present");
                backward(g)
            };
            let parents = self.nodes[i].parents.clone();
            debug_assert_eq!(parents.len(), contribs.len());
            for (p, c) in parents.into_iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
