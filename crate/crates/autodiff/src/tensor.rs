use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn with_recording<R>(on: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(on)));
    f()
}

/// Runs `f` with tape recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_recording(false, f)
}

/// Runs `f` with tape recording enabled, even inside [`no_grad`]. Custom
/// backward functions that re-derive a local graph rely on this.
pub fn enable_grad<R>(f: impl FnOnce() -> R) -> R {
    with_recording(true, f)
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Maps the gradient of an op's output to gradients of each parent, in order.
/// `None` means "no contribution".
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

pub(crate) struct Inner {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) is_leaf: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) node: RefCell<Option<Node>>,
}

/// A dense row-major array of `f64` values, optionally recorded on a tape.
///
/// Cloning is cheap (reference counted). Values never change after
/// construction; only the accumulated gradient of a leaf is mutable.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let is_leaf = node.is_none();
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            is_leaf,
            grad: RefCell::new(None),
            node: RefCell::new(node),
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// A leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Self::build(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn ones_like(&self) -> Tensor {
        Self::ones(self.shape())
    }

    pub fn zeros_like(&self) -> Tensor {
        Self::zeros(self.shape())
    }

    /// Records a custom differentiable operation.
    ///
    /// The node is only kept when recording is enabled and at least one
    /// parent requires grad; otherwise the result is a plain constant.
    pub fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            let node = Node {
                parents,
                backward: Box::new(backward),
            };
            Self::build(data, shape, true, Some(node))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.is_leaf
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalar(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    /// The accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy of the values, cut off from any tape.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// A fresh leaf with the same values that does require grad.
    pub fn detach_param(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

pub(crate) fn normalize_axis(axis: isize, ndim: usize) -> Result<usize> {
    let resolved = if axis < 0 { axis + ndim as isize } else { axis };
    if resolved < 0 || resolved as usize >= ndim {
        return Err(TensorError::InvalidAxis {
            axis: axis.unsigned_abs(),
            ndim,
        });
    }
    Ok(resolved as usize)
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
