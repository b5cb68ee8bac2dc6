//! Dense CPU tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns a flat row-major buffer plus shape metadata. Results of
//! differentiable operations carry a node referencing their inputs; the
//! recorded nodes form the autodiff tape, which [`Tensor::backward`] walks in
//! reverse to accumulate gradients into `requires_grad` leaves.
//!
//! The element type is `f32` for training paths; gradient verification
//! instantiates the same code at `f64`.

mod autodiff;
mod golden;
mod ops;

pub use autodiff::{is_grad_enabled, no_grad, CustomGrad, Op, Tape};
pub use golden::{read_tensor, write_tensor};
pub use ops::{broadcast_shapes, BinaryKind, ReduceKind, ScalarKind, UnaryKind};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Scalar element of a tensor. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_nan(self) -> bool;
    /// `c = a @ b (+ beta * c)` for row-major rank-2 buffers.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], beta: Self);
    /// `c = alpha a @ b + beta c` with explicit row/column strides on the
    /// operands; `c` is row-major `m x n`. With `beta = 0` the output buffer
    /// is fully overwritten and never read. Used by matmul backward to avoid
    /// materializing transposes.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        beta: Self,
    );
    /// Byte encoding for the golden-file format (little-endian IEEE-754).
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn powi(self, n: i32) -> Self {
        f32::powi(self, n)
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_nan(self) -> bool {
        f32::is_nan(self)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], beta: Self) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        beta: Self,
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    const BYTE_WIDTH: usize = 4;
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_nan(self) -> bool {
        f64::is_nan(self)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], beta: Self) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        beta: Self,
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    const BYTE_WIDTH: usize = 8;
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<E>>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<E>>>,
    op: Option<Op<E>>,
}

/// Dense n-dimensional array participating in the autodiff tape.
///
/// Cloning is cheap (reference-counted); tensors are single-owner with
/// respect to threads and are not `Send`.
pub struct Tensor<E: Element = f32> {
    pub(crate) inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

/// How to populate a freshly created tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Const(f64),
    Uniform(f64, f64),
    Normal(f64, f64),
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("extent overflow for shape {shape:?}")))
}

impl<E: Element> Tensor<E> {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Rc::new(RefCell::new(data)),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor from an explicit buffer.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor::from_op(shape.to_vec(), data, None))
    }

    pub fn scalar(v: E) -> Self {
        Tensor::from_op(vec![], vec![v], None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Tensor::from_op(shape.to_vec(), vec![E::ZERO; n], None))
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Tensor::from_op(shape.to_vec(), vec![E::ONE; n], None))
    }

    /// Create a leaf tensor; random fills consume `rng` deterministically.
    pub fn create(shape: &[usize], fill: Fill, rng: &mut RngState, requires_grad: bool) -> Result<Self> {
        let n = checked_numel(shape)?;
        let data: Vec<E> = match fill {
            Fill::Const(v) => vec![E::from_f64(v); n],
            Fill::Uniform(lo, hi) => (0..n).map(|_| E::from_f64(rng.uniform(lo, hi))).collect(),
            Fill::Normal(mu, sigma) => (0..n).map(|_| E::from_f64(rng.normal(mu, sigma))).collect(),
        };
        let t = Tensor::from_op(shape.to_vec(), data, None);
        t.inner.requires_grad.set(requires_grad);
        Ok(t)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the buffer (optimizer updates). Only valid on
    /// leaves; mutating an op result invalidates nothing but is not useful.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; requires exactly one element.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Whether this tensor participates in gradient computation.
    pub fn tracks_grad(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&Op<E>> {
        self.inner.op.as_ref()
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient as a tensor of the owner's shape.
    pub fn grad_tensor(&self) -> Option<Tensor<E>> {
        self.inner
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_op(self.inner.shape.clone(), g.clone(), None))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `contribution` into the gradient slot, allocating it on first
    /// use. Public so optimizer utilities and callbacks can edit gradients.
    pub fn accumulate_grad(&self, contribution: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Move `contribution` into the gradient slot, accumulating when one
    /// already exists.
    pub fn accumulate_grad_owned(&self, contribution: Vec<E>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    /// Copy of the values detached from the tape.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_op(self.inner.shape.clone(), self.to_vec(), None)
    }

    /// Convert the element type (used by verification tooling).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.data().iter().map(|v| F::from_f64(v.to_f64())).collect();
        Tensor::from_op(self.inner.shape.clone(), data, None)
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let head: Vec<String> = data.iter().take(8).map(|v| format!("{v}")).collect();
        let ellipsis = if data.len() > 8 { ", …" } else { "" };
        write!(f, "Tensor{:?}[{}{}]", self.shape(), head.join(", "), ellipsis)
    }
}
