//! Tape of recorded tensor operations and the reverse sweep over it.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation plus whatever the backward pass needs from the
/// forward pass.
#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Sum { x: Var, axis: usize },
    Min { x: Var, axis: usize, arg: Vec<u32> },
    Softmax { x: Var, axis: usize },
    CumsumExclusive { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    BroadcastTo(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    Bilinear { map: Var, taps: Vec<[(u32, T); 4]> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A single-use computation graph.
///
/// Ops are recorded as they are evaluated. After [`Graph::backward`] the
/// gradients of every leaf created with [`Graph::param`] are available via
/// [`Graph::grad`]. Intermediate gradients are released during the sweep.
/// A second `backward` without [`Graph::clear_grads`] is an error; double
/// backward is not supported.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    record: bool,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Graph that evaluates ops without recording backward information.
    pub fn no_grad() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let rg = self.record;
        self.push_raw(value, Op::Leaf, rg)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    /// Records `op` if any of `inputs` needs a gradient, otherwise stores
    /// the value as an inert leaf.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        self.backward_with_seeds(&[(loss, Tensor::full(shape, T::one()))])
    }

    /// Reverse sweep seeded with explicit output gradients. Used to continue
    /// backpropagation into a graph whose outputs were consumed elsewhere.
    pub fn backward_with_seeds(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(TensorError::ShapeMismatch {
                    op: "backward seed",
                    lhs: self.shape(*v).to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            accumulate(&mut self.grads[v.0], g.data());
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    /// Allows another backward pass by dropping all stored gradients.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub(crate) fn add_grad(&mut self, v: Var, g: &[T]) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut self.grads[v.0], g);
        }
    }

    /// Accumulates via a closure writing into the (zero-initialised)
    /// gradient buffer of `v`; skipped when `v` needs no gradient.
    pub(crate) fn with_grad(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot, &self.nodes);
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
