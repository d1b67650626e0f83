//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every op that receives at least one input with `requires_grad` set records a
//! graph node holding its inputs and a backward rule. [`Tensor::backward`]
//! orders the reachable nodes topologically into a [`GradTape`] and replays it
//! in reverse, accumulating gradients into leaf tensors.
//!
//! Tensors are reference counted and immutable once built, so cloning is cheap
//! and graph-free tensors can be shared across threads.

mod gemm;
mod gradcheck;
mod ops;
mod tape;

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub use gemm::count_macs;
pub(crate) use gemm::gemm;
pub use gradcheck::{
    grad_check, grad_check_inputs, grad_check_report, grad_check_steps, relative_error, LeafCheck,
};
pub use tape::GradTape;

/// Floating point element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + 'static
{
    const NAME: &'static str;

    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping regions of the
    /// given extents, as required by `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("element converts to f64")
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule: `(grad_output, output_values, inputs) -> per-input gradients`.
///
/// A rule may return `None` for inputs that do not require a gradient.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Node<T: Element> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Element = f32>(Arc<Inner<T>>);

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            d.field("op", &node.op);
        }
        d.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel_of(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Learnable leaf tensor.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_leaf(true))
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(vec![v; numel_of(shape)], shape.to_vec(), false, None)
    }

    /// Records an op result. The node is kept only when grad mode is on and an
    /// input requires a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            inputs,
            backward,
        });
        Self::build(data, shape, requires_grad, node)
    }

    /// Copies the values into a fresh leaf with the given grad flag.
    pub fn into_leaf(self, requires_grad: bool) -> Self {
        let shape = self.0.shape.clone();
        let data = match Arc::try_unwrap(self.0) {
            Ok(inner) => inner.data,
            Err(shared) => shared.data.clone(),
        };
        Self::build(data, shape, requires_grad, None)
    }

    /// Graph-free copy of the values.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|&v| U::of(v.as_f64())).collect();
        Tensor::build(data, self.0.shape.clone(), false, None)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the producing op, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.0.node.as_ref()
    }

    /// Accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad()
            .map(|g| Tensor::build(g, self.0.shape.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn same_values(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits_eq(*b))
    }
}

/// Bitwise equality, so `NaN == NaN` and `0.0 != -0.0`.
pub(crate) trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Element> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        let (a, b) = (self.as_f64(), other.as_f64());
        a.to_bits() == b.to_bits()
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
