//! The tensor type and the reverse pass.
//!
//! Every op that has at least one input requiring a gradient records a
//! backward closure together with its parents. Node ids are drawn from a
//! monotone counter, so parents always carry smaller ids than their
//! children and sorting reachable nodes by descending id is a valid
//! reverse topological order.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::elem::Elem;
use crate::error::{shape_err, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Computes parent gradients from the output gradient. One entry per parent;
/// `None` for parents that do not require a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Elem> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// N-dimensional row-major array participating in a reverse-mode graph.
///
/// Cloning is cheap (reference counted). Data is immutable once created;
/// only the gradient buffer of a leaf is written, by [`Tensor::backward`].
pub struct Tensor<T: Elem> {
    node: Rc<Node<T>>,
}

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("dtype", &T::NAME)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Elem> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_new(shape, &data)?;
        Ok(Self::from_parts(shape.to_vec(), Rc::new(data), false, None))
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn leaf(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_new(shape, &data)?;
        Ok(Self::from_parts(shape.to_vec(), Rc::new(data), true, None))
    }

    fn check_new(shape: &[usize], data: &[T]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("new", format!("zero-sized dimension in {shape:?}"));
        }
        if numel(shape) != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            );
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), Rc::new(vec![T::zero(); numel(shape)]), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), Rc::new(vec![value; numel(shape)]), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], Rc::new(vec![value]), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Build an op output. Records a backward closure only when some parent
    /// requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: &[&Tensor<T>],
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let needs = parents.iter().any(|p| p.requires_grad());
        if needs {
            let grad_fn = GradFn {
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                backward: Box::new(backward),
            };
            Self::from_parts(shape, Rc::new(data), true, Some(grad_fn))
        } else {
            Self::from_parts(shape, Rc::new(data), false, None)
        }
    }

    /// View with a new shape sharing the same buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return shape_err(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            );
        }
        if !self.requires_grad() {
            return Ok(Self::from_parts(shape.to_vec(), self.data_rc(), false, None));
        }
        let grad_fn = GradFn {
            parents: vec![self.clone()],
            backward: Box::new(|g: &[T]| vec![Some(g.to_vec())]),
        };
        Ok(Self::from_parts(shape.to_vec(), self.data_rc(), true, Some(grad_fn)))
    }

    /// Forward identity, zero backward contribution.
    pub fn stop_gradient(&self) -> Self {
        Self::from_parts(self.shape().to_vec(), self.data_rc(), false, None)
    }

    /// Forward `value`, backward identity into `self`, i.e.
    /// `self + stop_gradient(value - self)` without the rounding of the sum.
    pub fn straight_through(&self, value: Vec<T>) -> Result<Self> {
        if value.len() != self.numel() {
            return crate::error::shape_err("straight_through", format!("{} values for {:?}", value.len(), self.shape()));
        }
        Ok(Self::from_op(self.shape().to_vec(), value, &[self], |g| vec![Some(g.to_vec())]))
    }

    /// Same values as a fresh leaf (used to cut a graph and restart tracking).
    pub fn detach_leaf(&self) -> Self {
        Self::from_parts(self.shape().to_vec(), self.data_rc(), true, None)
    }

    /// Reverse pass from a scalar loss. Populates the gradient of every leaf
    /// reachable from `self` that requires one. Intermediate gradients are
    /// dropped once propagated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let pgrads = (gf.backward)(&g);
                    debug_assert_eq!(pgrads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => add_into(acc, &pg),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn add_into<T: Elem>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
