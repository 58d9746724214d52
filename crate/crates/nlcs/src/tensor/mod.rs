//! Reverse-mode automatic differentiation over dense n-dimensional tensors.
//!
//! The graph is dynamic: every op records its parents and a backward closure
//! on the freshly created output tensor. Calling [`Tensor::backward`] on a
//! scalar walks the recorded graph in reverse topological order and
//! accumulates gradients into every reachable tensor with `requires_grad`.
//! Dropping the loss tensor frees the graph; parameters persist because the
//! caller keeps handles to them.

mod conv;
mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type of a tensor. Training runs in `f32`; the
/// finite-difference checker re-evaluates forwards in `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Element for f32 {}
impl Element for f64 {}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn<E> = Box<dyn Fn(&[E])>;

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: Cell<bool>,
    parents: RefCell<Vec<Tensor<E>>>,
    backward_fn: RefCell<Option<BackwardFn<E>>>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the storage.
pub struct Tensor<E: Element = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn from_parts(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Tensor<E> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: RefCell::new(Vec::new()),
                backward_fn: RefCell::new(None),
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![E::zero(); numel], false)
    }

    pub fn full(shape: &[usize], value: E) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: E) -> Tensor<E> {
        Tensor::from_parts(vec![1], vec![value], false)
    }

    /// Leaf tensor registered for gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    /// Output node of an op: records parents and the backward closure.
    pub(crate) fn new_node(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Tensor<E> {
        let requires = parents.iter().any(|p| p.requires_grad());
        let t = Tensor::from_parts(shape, data, requires);
        if requires {
            *t.inner.parents.borrow_mut() = parents;
            *t.inner.backward_fn.borrow_mut() = Some(backward);
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values. Used by the optimizer and checkpoint
    /// loading; must not be called while a graph referencing this tensor is
    /// mid-backward.
    pub fn set_data(&self, values: &[E]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::dim(
                "set_data",
                format!("expected {} values, got {}", self.numel(), values.len()),
            ));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulate into this tensor's gradient buffer (allocated on demand).
    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [E])) {
        if !self.requires_grad() {
            return;
        }
        let numel = self.numel();
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::zero(); numel]);
        f(buf);
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate; call
    /// [`Tensor::zero_grad`] on leaves between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        // Interior nodes start each sweep from zero; leaf grads accumulate
        // across sweeps.
        for node in &order {
            if node.inner.backward_fn.borrow().is_some() {
                node.zero_grad();
            }
        }
        self.accumulate_grad(|g| g[0] = g[0] + E::one());
        for node in order.iter().rev() {
            let grad = node.inner.grad.borrow();
            if let (Some(g), Some(back)) = (grad.as_ref(), node.inner.backward_fn.borrow().as_ref())
            {
                back(g);
            }
        }
        Ok(())
    }

    /// Iterative postorder so parents precede children in the result.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            let parents = node.inner.parents.borrow().clone();
            stack.push((node, true));
            for p in parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_parts(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Element-type conversion (used by the 64-bit gradient checker).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&v| T::from_f64_lossy(v.as_f64()))
            .collect();
        let t = Tensor::from_parts(self.inner.shape.clone(), data, false);
        t.inner.requires_grad.set(self.requires_grad());
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}
