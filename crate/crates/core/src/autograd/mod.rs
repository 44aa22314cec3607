//! A small reverse-mode tape over dense `ndarray` tensors.
//!
//! Every operation records its output value, its input nodes and a closure
//! mapping the output gradient to one gradient per input. [`Graph::backward`]
//! replays the tape in reverse. Graphs are built per sample and thrown away,
//! so parameters enter as fresh leaves each time.

mod attention;
mod conv;
pub mod gradcheck;
mod ops;

pub use attention::{window_attention_forward, AttentionSpec, WindowGrid};
pub use conv::{conv2d_forward, depthwise_conv_forward};
pub use ops::{avg_pool_forward, gelu, pixel_shuffle_forward, reflect_pad_forward};

use ndarray::{ArrayD, IxDyn};

use crate::Real;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure gets to see.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a ArrayD<T>,
    pub inputs: Vec<&'a ArrayD<T>>,
    pub output: &'a ArrayD<T>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<ArrayD<T>>>;

struct Node<T> {
    value: ArrayD<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut node: Node<T>) -> Var {
        // Kernels view tensors as row-major matrices.
        standardize(&mut node.value);
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a custom operation.
    pub fn op<F>(&mut self, value: ArrayD<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<ArrayD<T>> + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar (single element) node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&i, g) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[i].value.shape(), "grad shape of node {i}");
                match &mut grads[i] {
                    Some(acc) => *acc += &g,
                    slot => {
                        let mut g = g;
                        standardize(&mut g);
                        *slot = Some(g)
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn standardize<T: Real>(a: &mut ArrayD<T>) {
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().into_owned();
    }
}

pub(crate) fn dyn_shape(shape: &[usize]) -> IxDyn {
    IxDyn(shape)
}
