//! Tape recording and the reverse pass.

use super::ops::{broadcast_zip, reduce_broadcast_grad, BinaryKind, ReduceKind, ScalarKind, UnaryKind};
use super::{Element, Tensor};
use crate::error::{Error, Result};
use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording tape nodes (inference / validation passes).
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

/// Backward rule for operations defined outside the core op set (convolution,
/// pooling, embedding lookups, fused losses).
pub trait CustomGrad<E: Element> {
    fn name(&self) -> &'static str;
    /// Given d(loss)/d(output), return d(loss)/d(input_i) per input; `None`
    /// marks inputs that do not need a gradient.
    fn backward(&self, inputs: &[Tensor<E>], output: &Tensor<E>, grad: &[E])
        -> Result<Vec<Option<Vec<E>>>>;
}

/// Recorded operation; holds the input tensors and whatever the backward
/// rule needs.
pub enum Op<E: Element> {
    Matmul(Tensor<E>, Tensor<E>),
    /// `a @ b^T` with `b` stored `(n, k)`.
    MatmulT(Tensor<E>, Tensor<E>),
    Binary(Tensor<E>, Tensor<E>, BinaryKind),
    Scalar(Tensor<E>, f64, ScalarKind),
    Unary(Tensor<E>, UnaryKind),
    /// Reduce with resolved axes and the number of elements folded into each
    /// output slot.
    Reduce(Tensor<E>, ReduceKind, Option<Vec<usize>>, usize),
    Reshape(Tensor<E>),
    Custom(Vec<Tensor<E>>, Rc<dyn CustomGrad<E>>),
}

impl<E: Element> Op<E> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul(..) => "matmul",
            Op::MatmulT(..) => "matmul_t",
            Op::Binary(..) => "binary",
            Op::Scalar(..) => "scalar",
            Op::Unary(..) => "unary",
            Op::Reduce(..) => "reduce",
            Op::Reshape(..) => "reshape",
            Op::Custom(_, rule) => rule.name(),
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Matmul(a, b) | Op::MatmulT(a, b) | Op::Binary(a, b, _) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scalar(a, _, _) | Op::Unary(a, _) | Op::Reduce(a, _, _, _) | Op::Reshape(a) => {
                vec![a.clone()]
            }
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }
}

/// The autodiff tape for one result: every tracked tensor reachable from it,
/// in topological order (inputs precede outputs).
pub struct Tape<E: Element> {
    nodes: Vec<Tensor<E>>,
}

impl<E: Element> Tape<E> {
    pub fn nodes(&self) -> &[Tensor<E>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf (operation) nodes.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op().is_some()).count()
    }
}

enum Visit<E: Element> {
    Enter(Tensor<E>),
    Emit(Tensor<E>),
}

impl<E: Element> Tensor<E> {
    /// Topologically ordered tape of every gradient-tracking tensor that
    /// feeds this one. Each node appears exactly once.
    pub fn tape(&self) -> Tape<E> {
        let mut nodes = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(visit) = stack.pop() {
            match visit {
                Visit::Enter(t) => {
                    if !t.tracks_grad() || seen.contains(&t.id()) {
                        continue;
                    }
                    seen.insert(t.id());
                    stack.push(Visit::Emit(t.clone()));
                    if let Some(op) = t.op() {
                        for input in op.inputs() {
                            stack.push(Visit::Enter(input));
                        }
                    }
                }
                Visit::Emit(t) => nodes.push(t),
            }
        }
        Tape { nodes }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf reachable from it; gradients accumulate across
    /// calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks_grad() {
            return Err(Error::Autodiff(
                "backward called on a tensor detached from the tape".into(),
            ));
        }
        let tape = self.tape();
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::ONE]);
        for node in tape.nodes().iter().rev() {
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            let Some(op) = node.op() else {
                if node.requires_grad() {
                    node.accumulate_grad_owned(grad);
                }
                continue;
            };
            if node.requires_grad() {
                node.accumulate_grad(&grad);
            }
            let input_grads = op_backward(op, node, &grad)?;
            for (input, ig) in op.inputs().iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if input.tracks_grad() {
                        match grads.entry(input.id()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&ig) {
                                    *a += *b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Output buffer for a `beta = 0` gemm, which overwrites every element
/// before any is read; skipping the zero-fill matters for weight-gradient
/// buffers in the training hot path.
fn gemm_output_buffer<E: Element>(len: usize) -> Vec<E> {
    let mut buf = Vec::with_capacity(len);
    // SAFETY: the caller passes this buffer to a beta = 0 gemm that writes
    // all `len` elements; E is a plain float with no drop glue.
    #[allow(clippy::uninit_vec)]
    unsafe {
        buf.set_len(len);
    }
    buf
}

fn op_backward<E: Element>(op: &Op<E>, out: &Tensor<E>, grad: &[E]) -> Result<Vec<Option<Vec<E>>>> {
    match op {
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // dA = dC @ B^T ; dB = A^T @ dC, via stride tricks on the
            // row-major buffers. Skip inputs that do not track gradients.
            let da = a.tracks_grad().then(|| {
                let mut da = gemm_output_buffer::<E>(m * k);
                E::gemm_strided(
                    m,
                    n,
                    k,
                    grad,
                    n as isize,
                    1,
                    &b.data(),
                    1,
                    n as isize,
                    &mut da,
                    E::ZERO,
                );
                da
            });
            let db = b.tracks_grad().then(|| {
                let mut db = gemm_output_buffer::<E>(k * n);
                E::gemm_strided(
                    k,
                    m,
                    n,
                    &a.data(),
                    1,
                    k as isize,
                    grad,
                    n as isize,
                    1,
                    &mut db,
                    E::ZERO,
                );
                db
            });
            Ok(vec![da, db])
        }
        Op::MatmulT(a, b) => {
            // C (m,n) = A (m,k) @ B^T with B stored (n,k):
            // dA = dC @ B ; dB = dC^T @ A.
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[0];
            let da = a.tracks_grad().then(|| {
                let mut da = gemm_output_buffer::<E>(m * k);
                E::gemm_strided(
                    m,
                    n,
                    k,
                    grad,
                    n as isize,
                    1,
                    &b.data(),
                    k as isize,
                    1,
                    &mut da,
                    E::ZERO,
                );
                da
            });
            let db = b.tracks_grad().then(|| {
                let mut db = gemm_output_buffer::<E>(n * k);
                E::gemm_strided(
                    n,
                    m,
                    k,
                    grad,
                    1,
                    n as isize,
                    &a.data(),
                    k as isize,
                    1,
                    &mut db,
                    E::ZERO,
                );
                db
            });
            Ok(vec![da, db])
        }
        Op::Binary(a, b, kind) => {
            let out_shape = out.shape();
            let (raw_a, raw_b): (Vec<E>, Vec<E>) = match kind {
                BinaryKind::Add => (grad.to_vec(), grad.to_vec()),
                BinaryKind::Sub => (grad.to_vec(), grad.iter().map(|&g| -g).collect()),
                BinaryKind::Mul => {
                    let ga = broadcast_zip(
                        out_shape,
                        grad,
                        b.shape(),
                        &b.data(),
                        out_shape,
                        |g, y| g * y,
                    );
                    let gb = broadcast_zip(
                        out_shape,
                        grad,
                        a.shape(),
                        &a.data(),
                        out_shape,
                        |g, x| g * x,
                    );
                    (ga, gb)
                }
                BinaryKind::Div => {
                    let ga = broadcast_zip(
                        out_shape,
                        grad,
                        b.shape(),
                        &b.data(),
                        out_shape,
                        |g, y| g / y,
                    );
                    // d/db (a/b) = -a / b^2; compose with the output: out = a/b,
                    // so -a/b^2 = -out/b.
                    let gb_pre = broadcast_zip(
                        out_shape,
                        grad,
                        out_shape,
                        &out.data(),
                        out_shape,
                        |g, o| g * o,
                    );
                    let gb = broadcast_zip(
                        out_shape,
                        &gb_pre,
                        b.shape(),
                        &b.data(),
                        out_shape,
                        |g, y| -(g / y),
                    );
                    (ga, gb)
                }
            };
            Ok(vec![
                Some(reduce_broadcast_grad(&raw_a, out_shape, a.shape())),
                Some(reduce_broadcast_grad(&raw_b, out_shape, b.shape())),
            ])
        }
        Op::Scalar(a, c, kind) => {
            let ga = match kind {
                ScalarKind::Add => grad.to_vec(),
                ScalarKind::Mul => grad.iter().map(|&g| g * E::from_f64(*c)).collect(),
                ScalarKind::ClampMax => {
                    let cv = E::from_f64(*c);
                    a.data()
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| if x < cv { g } else { E::ZERO })
                        .collect()
                }
            };
            Ok(vec![Some(ga)])
        }
        Op::Unary(a, kind) => {
            let ga = match kind {
                UnaryKind::Neg => grad.iter().map(|&g| -g).collect(),
                UnaryKind::Relu => a
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| if x > E::ZERO { g } else { E::ZERO })
                    .collect(),
                UnaryKind::Sigmoid => out
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g * y * (E::ONE - y))
                    .collect(),
                UnaryKind::Exp => out.data().iter().zip(grad).map(|(&y, &g)| g * y).collect(),
                UnaryKind::Ln => a.data().iter().zip(grad).map(|(&x, &g)| g / x).collect(),
                UnaryKind::Sqrt => out
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g / (E::from_f64(2.0) * y))
                    .collect(),
            };
            Ok(vec![Some(ga)])
        }
        Op::Reduce(a, kind, axes, count) => {
            let scale = match kind {
                ReduceKind::Sum => E::ONE,
                ReduceKind::Mean => E::ONE / E::from_f64(*count as f64),
            };
            let shape = a.shape();
            let rank = shape.len();
            let n = a.numel();
            let ga = match axes {
                None => vec![grad[0] * scale; n],
                Some(ax) => {
                    let mut out_strides = vec![0usize; rank];
                    let mut acc = 1usize;
                    for i in (0..rank).rev() {
                        if !ax.contains(&i) {
                            out_strides[i] = acc;
                            acc *= shape[i];
                        }
                    }
                    let mut ga = vec![E::ZERO; n];
                    let mut idx = vec![0usize; rank];
                    for slot in ga.iter_mut() {
                        let mut off = 0usize;
                        for (d, &i) in idx.iter().enumerate() {
                            off += i * out_strides[d];
                        }
                        *slot = grad[off] * scale;
                        for d in (0..rank).rev() {
                            idx[d] += 1;
                            if idx[d] < shape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                    ga
                }
            };
            Ok(vec![Some(ga)])
        }
        Op::Reshape(_) => Ok(vec![Some(grad.to_vec())]),
        Op::Custom(inputs, rule) => rule.backward(inputs, out, grad),
    }
}
