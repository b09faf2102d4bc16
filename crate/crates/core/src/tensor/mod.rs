//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! Graphs are built eagerly: every op computes its value immediately and, if
//! any input requires a gradient, records a closure that maps the output
//! gradient to input gradients. Node ids grow monotonically, so sorting the
//! reachable set by descending id is a valid reverse topological order.
//!
//! Everything here is single-threaded (`Rc`); model weights live in
//! [`crate::nn::ParamStore`], which is `Send + Sync`, and each forward pass
//! builds its own graph.

mod gemm;
pub mod ops;
mod spatial;

pub use spatial::{resize_weights_1d, ConvOpts, Interp, PlaneMap};

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Interprets the shape as NCHW.
    pub fn dims4(&self) -> [usize; 4] {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulate");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies one batch item out of an NCHW tensor.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let [n, c, h, w] = self.dims4();
        assert!(index < n);
        let len = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[index * len..(index + 1) * len].to_vec())
    }

    /// Mirrors an NCHW tensor left to right.
    pub fn flip_horizontal(&self) -> Tensor {
        let [n, c, h, w] = self.dims4();
        let mut data = self.data.clone();
        for row in data.chunks_mut(w).take(n * c * h) {
            row.reverse();
        }
        Tensor::new(self.shape.clone(), data)
    }

    /// Stacks NCHW tensors with identical C, H, W along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let [_, c, h, w] = items[0].dims4();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.dims4();
            assert_eq!((tc, th, tw), (c, h, w), "stack_batch shape mismatch");
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![n, c, h, w], data)
    }
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    id: usize,
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A node in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.0.id, self.0.value.shape)
    }
}

impl Var {
    fn make(value: Tensor, requires_grad: bool, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(value: Tensor) -> Var {
        Var::make(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is accumulated by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Var {
        Var::make(value, true, Vec::new(), None)
    }

    /// Records an op result. The backward closure receives the output
    /// gradient, the parent values and the output value, and returns one
    /// optional gradient per parent.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        if parents.iter().any(|p| p.requires_grad()) {
            Var::make(value, true, parents, Some(backward))
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// A constant copy of this node's value, cutting the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    /// Back-propagates from a scalar node with seed gradient 1.
    pub fn backward(&self) {
        assert_eq!(self.0.value.len(), 1, "backward() requires a scalar output");
        if !self.requires_grad() {
            return;
        }
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.0.id) {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.id) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        *self.0.grad.borrow_mut() = Some(Tensor::full(self.shape(), 1.0));
        for node in &order {
            let Some(backward) = node.0.backward.as_ref() else { continue };
            let Some(grad_out) = node.0.grad.borrow_mut().take() else { continue };
            let parent_values: Vec<&Tensor> = node.0.parents.iter().map(|p| p.value()).collect();
            let grads = backward(&grad_out, &parent_values, &node.0.value);
            debug_assert_eq!(grads.len(), node.0.parents.len());
            for (parent, g) in node.0.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }
}
