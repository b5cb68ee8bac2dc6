//! Forward tensor operations. Each differentiable op records a tape node on
//! its result when gradients are enabled and an input tracks gradients.

use super::autodiff::{is_grad_enabled, CustomGrad, Op};
use super::{Element, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarKind {
    Add,
    Mul,
    /// `min(x, c)`; gradient passes only where `x < c`.
    ClampMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Row-major strides, with 0 for broadcast dimensions, right-aligned into
/// `out_rank` dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn broadcast_zip<E: Element>(
    a_shape: &[usize],
    a: &[E],
    b_shape: &[usize],
    b: &[E],
    out_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if a_shape == b_shape {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
        return out;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    // Walk the output with per-axis counters; the inner (last) axis is a
    // tight loop since it dominates.
    let inner = if rank > 0 { out_shape[rank - 1] } else { 1 };
    let outer = n / inner.max(1);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (ia_last, ib_last) = if rank > 0 { (sa[rank - 1], sb[rank - 1]) } else { (0, 0) };
    for _ in 0..outer {
        let mut oa = 0usize;
        let mut ob = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            oa += i * sa[d];
            ob += i * sb[d];
        }
        for j in 0..inner {
            out.push(f(a[oa + j * ia_last], b[ob + j * ib_last]));
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by reducing the
/// broadcast axes; the gradient law for broadcast operands.
pub(crate) fn reduce_broadcast_grad<E: Element>(
    grad: &[E],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<E> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let n_target: usize = target_shape.iter().product();
    let mut out = vec![E::ZERO; n_target];
    // fast path: target is a right-aligned suffix with no interior
    // broadcasting (the bias-gradient case), a plain chunked sum
    if grad_shape.len() >= target_shape.len()
        && grad_shape[grad_shape.len() - target_shape.len()..] == *target_shape
    {
        for chunk in grad.chunks_exact(n_target.max(1)) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let strides = broadcast_strides(target_shape, grad_shape);
    let rank = grad_shape.len();
    let mut idx = vec![0usize; rank];
    for &g in grad {
        let mut off = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            off += i * strides[d];
        }
        out[off] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < grad_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn record<E: Element>(inputs: &[&Tensor<E>], op: impl FnOnce() -> Op<E>) -> Option<Op<E>> {
    if is_grad_enabled() && inputs.iter().any(|t| t.tracks_grad()) {
        Some(op())
    } else {
        None
    }
}

impl<E: Element> Tensor<E> {
    /// Rank-2 matrix product `(m,k) @ (k,n) -> (m,n)`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = vec![E::ZERO; m * n];
        E::gemm(m, k, n, &self.data(), &rhs.data(), &mut out, E::ZERO);
        let op = record(&[self, rhs], || Op::Matmul(self.clone(), rhs.clone()));
        Ok(Tensor::from_op(vec![m, n], out, op))
    }

    /// `a @ b^T` for `a: (m,k)`, `b: (n,k)`, yielding `(m,n)`. The layout of
    /// linear-layer weights is `(out, in)`, so the forward pass is this
    /// product without materializing a transpose.
    pub fn matmul_t(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul_t expects rank-2 operands, got {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (n, k2) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_t inner dimensions differ: {:?} vs {:?}^T",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = vec![E::ZERO; m * n];
        E::gemm_strided(m, k, n, &self.data(), k as isize, 1, &rhs.data(), 1, k as isize, &mut out, E::ZERO);
        let op = record(&[self, rhs], || Op::MatmulT(self.clone(), rhs.clone()));
        Ok(Tensor::from_op(vec![m, n], out, op))
    }

    fn binary(&self, rhs: &Tensor<E>, kind: BinaryKind) -> Result<Tensor<E>> {
        let out_shape = broadcast_shapes(self.shape(), rhs.shape())?;
        let f = match kind {
            BinaryKind::Add => |x: E, y: E| x + y,
            BinaryKind::Sub => |x: E, y: E| x - y,
            BinaryKind::Mul => |x: E, y: E| x * y,
            BinaryKind::Div => |x: E, y: E| x / y,
        };
        let out = broadcast_zip(self.shape(), &self.data(), rhs.shape(), &rhs.data(), &out_shape, f);
        let op = record(&[self, rhs], || Op::Binary(self.clone(), rhs.clone(), kind));
        Ok(Tensor::from_op(out_shape, out, op))
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinaryKind::Div)
    }

    fn scalar_op(&self, c: f64, kind: ScalarKind) -> Tensor<E> {
        let cv = E::from_f64(c);
        let data: Vec<E> = match kind {
            ScalarKind::Add => self.data().iter().map(|&x| x + cv).collect(),
            ScalarKind::Mul => self.data().iter().map(|&x| x * cv).collect(),
            ScalarKind::ClampMax => {
                self.data().iter().map(|&x| if x > cv { cv } else { x }).collect()
            }
        };
        let op = record(&[self], || Op::Scalar(self.clone(), c, kind));
        Tensor::from_op(self.shape().to_vec(), data, op)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        self.scalar_op(c, ScalarKind::Add)
    }

    pub fn sub_scalar(&self, c: f64) -> Tensor<E> {
        self.scalar_op(-c, ScalarKind::Add)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<E> {
        self.scalar_op(c, ScalarKind::Mul)
    }

    /// `min(x, c)` elementwise; blocks the gradient where the clamp is active.
    pub fn clamp_max(&self, c: f64) -> Tensor<E> {
        self.scalar_op(c, ScalarKind::ClampMax)
    }

    fn unary(&self, kind: UnaryKind) -> Tensor<E> {
        let data: Vec<E> = match kind {
            UnaryKind::Neg => self.data().iter().map(|&x| -x).collect(),
            UnaryKind::Relu => self.data().iter().map(|&x| if x > E::ZERO { x } else { E::ZERO }).collect(),
            UnaryKind::Sigmoid => {
                self.data().iter().map(|&x| E::ONE / (E::ONE + (-x).exp())).collect()
            }
            UnaryKind::Exp => self.data().iter().map(|&x| x.exp()).collect(),
            UnaryKind::Ln => self.data().iter().map(|&x| x.ln()).collect(),
            UnaryKind::Sqrt => self.data().iter().map(|&x| x.sqrt()).collect(),
        };
        let op = record(&[self], || Op::Unary(self.clone(), kind));
        Tensor::from_op(self.shape().to_vec(), data, op)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.unary(UnaryKind::Neg)
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(&self) -> Tensor<E> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Tensor<E> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sqrt(&self) -> Tensor<E> {
        self.unary(UnaryKind::Sqrt)
    }

    fn reduce(&self, kind: ReduceKind, axes: Option<&[usize]>) -> Result<Tensor<E>> {
        let rank = self.rank();
        let axes: Option<Vec<usize>> = match axes {
            None => None,
            Some(ax) => {
                let mut ax: Vec<usize> = ax.to_vec();
                ax.sort_unstable();
                ax.dedup();
                for &a in &ax {
                    if a >= rank {
                        return Err(Error::invalid(format!(
                            "reduce axis {a} out of range for rank {rank}"
                        )));
                    }
                }
                Some(ax)
            }
        };
        let data = self.data();
        let (out_shape, out_data, count) = match &axes {
            None => {
                let mut acc = E::ZERO;
                for &v in data.iter() {
                    acc += v;
                }
                (vec![], vec![acc], self.numel().max(1))
            }
            Some(ax) => {
                let shape = self.shape();
                let out_shape: Vec<usize> = shape
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !ax.contains(i))
                    .map(|(_, &d)| d)
                    .collect();
                let n_out: usize = out_shape.iter().product();
                let mut out = vec![E::ZERO; n_out.max(1)];
                // Map each input index to its output offset.
                let mut out_strides = vec![0usize; rank];
                let mut acc = 1usize;
                for i in (0..rank).rev() {
                    if !ax.contains(&i) {
                        out_strides[i] = acc;
                        acc *= shape[i];
                    }
                }
                let mut idx = vec![0usize; rank];
                for &v in data.iter() {
                    let mut off = 0usize;
                    for (d, &i) in idx.iter().enumerate() {
                        off += i * out_strides[d];
                    }
                    out[off] += v;
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        if idx[d] < shape[d] {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
                let count: usize = ax.iter().map(|&a| shape[a]).product();
                (out_shape, out, count.max(1))
            }
        };
        let mut out_data = out_data;
        if kind == ReduceKind::Mean {
            let inv = E::ONE / E::from_f64(count as f64);
            for v in out_data.iter_mut() {
                *v = *v * inv;
            }
        }
        let op = record(&[self], || Op::Reduce(self.clone(), kind, axes.clone(), count));
        Ok(Tensor::from_op(out_shape, out_data, op))
    }

    pub fn sum(&self, axes: Option<&[usize]>) -> Result<Tensor<E>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn mean(&self, axes: Option<&[usize]>) -> Result<Tensor<E>> {
        self.reduce(ReduceKind::Mean, axes)
    }

    /// Reinterpret the buffer under a new shape; at most one `-1` extent is
    /// inferred. The data buffer is shared with the source tensor.
    pub fn reshape(&self, shape: &[i64]) -> Result<Tensor<E>> {
        let numel = self.numel();
        let minus_ones = shape.iter().filter(|&&d| d == -1).count();
        if minus_ones > 1 {
            return Err(Error::shape("reshape allows at most one -1 extent"));
        }
        let known: usize = shape
            .iter()
            .filter(|&&d| d != -1)
            .map(|&d| {
                if d < 0 {
                    0
                } else {
                    d as usize
                }
            })
            .product();
        if shape.iter().any(|&d| d < -1) {
            return Err(Error::shape(format!("invalid reshape extent in {shape:?}")));
        }
        let resolved: Vec<usize> = if minus_ones == 1 {
            if known == 0 || numel % known != 0 {
                return Err(Error::shape(format!(
                    "cannot infer -1 in reshape of {numel} elements to {shape:?}"
                )));
            }
            shape
                .iter()
                .map(|&d| if d == -1 { numel / known } else { d as usize })
                .collect()
        } else {
            shape.iter().map(|&d| d as usize).collect()
        };
        let n: usize = resolved.iter().product();
        if n != numel {
            return Err(Error::shape(format!(
                "reshape of {numel} elements to {resolved:?} ({n} elements)"
            )));
        }
        let op = record(&[self], || Op::Reshape(self.clone()));
        Ok(Tensor {
            inner: Rc::new(super::Inner {
                id: super::NEXT_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
                shape: resolved,
                data: Rc::clone(&self.inner.data),
                requires_grad: std::cell::Cell::new(false),
                grad: std::cell::RefCell::new(None),
                op,
            }),
        })
    }

    /// Apply a custom differentiable operation.
    pub fn custom_op(
        inputs: &[&Tensor<E>],
        out_shape: Vec<usize>,
        out_data: Vec<E>,
        rule: Rc<dyn CustomGrad<E>>,
    ) -> Tensor<E> {
        let op = record(inputs, || {
            Op::Custom(inputs.iter().map(|t| (*t).clone()).collect(), rule)
        });
        Tensor::from_op(out_shape, out_data, op)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::shape(format!(
                        "concat extent mismatch off axis {axis}: {:?} vs {:?}",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let rows = p.shape()[axis];
                let data = p.data();
                let start = o * rows * inner;
                out.extend_from_slice(&data[start..start + rows * inner]);
            }
        }
        let refs: Vec<&Tensor<E>> = parts.iter().collect();
        let rule: Rc<dyn CustomGrad<E>> = Rc::new(ConcatGrad { axis });
        Ok(Tensor::custom_op(&refs, out_shape, out, rule))
    }
}

struct ConcatGrad {
    axis: usize,
}

impl<E: Element> CustomGrad<E> for ConcatGrad {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[Tensor<E>],
        output: &Tensor<E>,
        grad: &[E],
    ) -> Result<Vec<Option<Vec<E>>>> {
        let out_shape = output.shape();
        let outer: usize = out_shape[..self.axis].iter().product();
        let inner: usize = out_shape[self.axis + 1..].iter().product();
        let total_rows = out_shape[self.axis];
        let mut grads: Vec<Option<Vec<E>>> =
            inputs.iter().map(|p| Some(vec![E::ZERO; p.numel()])) .collect();
        let mut row_offset = 0usize;
        for (pi, p) in inputs.iter().enumerate() {
            let rows = p.shape()[self.axis];
            let g = grads[pi].as_mut().unwrap();
            for o in 0..outer {
                let src = (o * total_rows + row_offset) * inner;
                let dst = o * rows * inner;
                g[dst..dst + rows * inner].copy_from_slice(&grad[src..src + rows * inner]);
            }
            row_offset += rows;
        }
        Ok(grads)
    }
}
