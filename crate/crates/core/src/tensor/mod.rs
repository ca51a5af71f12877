//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Values are immutable once
//! built; the only interior mutation is gradient accumulation during
//! [`Tensor::backward`]. Operations record a node (inputs plus a backward
//! closure) only when at least one input requires a gradient, so computations
//! that touch nothing but frozen parameters never build a graph.
//!
//! The element type is generic over [`Real`]. Models and training run in
//! `f32`; the finite-difference suite instantiates the same kernels at `f64`.

mod gradcheck;
mod ops;

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheck};
pub use ops::{concat, gemm};

/// Floating-point element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + MulAssign
    + 'static
{
    fn erf(self) -> Self;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, with `c` not aliasing `a` or `b`.
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
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Real")
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

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

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

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

/// Maps the output gradient to one optional gradient per input.
///
/// Arguments: the op's output values, the gradient flowing into the output,
/// and which inputs need a gradient at all.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Real> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Dense n-dimensional array with optional gradient tracking.
pub struct Tensor<T: Real = f32>(Arc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            d.field("op", &node.op);
        }
        if self.0.data.len() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_DISABLED: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording autodiff nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            GRAD_DISABLED.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(GRAD_DISABLED.with(|c| c.replace(true)));
    f()
}

fn grad_enabled() -> bool {
    !GRAD_DISABLED.with(|c| c.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant tensor (no gradient). Fails when `shape` and `data` disagree.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::new(shape, data)?.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::build(vec![n, n], data, false, None)
    }

    /// Same values as a fresh leaf with the given flag. Any graph link is dropped.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), requires_grad, None)
    }

    /// Same values as a constant leaf.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    /// Result of an operation. A node is recorded only if some input needs a
    /// gradient and recording is enabled on this thread.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            inputs,
            backward,
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the producing operation, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Identity of the underlying allocation; clones share it.
    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().expect("grad lock").is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        debug_assert!(self.0.requires_grad);
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Replaces the values of a leaf in place, keeping its gradient flag.
    ///
    /// When other handles still share the allocation a fresh leaf is created
    /// instead, so existing graphs keep seeing the old values.
    pub fn assign(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::Shape(format!(
                "assign of {} values into tensor of shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        if !self.is_leaf() {
            return Err(Error::Contract("assign on a non-leaf tensor".into()));
        }
        match Arc::get_mut(&mut self.0) {
            Some(inner) => {
                inner.data = data;
                *inner.grad.get_mut().expect("grad lock") = None;
            }
            None => {
                *self = Self::build(self.0.shape.clone(), data, self.0.requires_grad, None);
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Leaves with `requires_grad` accumulate into their gradient; interior
    /// nodes of this graph are reset first so repeated sweeps over the same
    /// graph are reproducible.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor that is not connected to any trainable input".into(),
            ));
        }
        let order = self.topo_order();
        for t in &order {
            if !t.is_leaf() {
                t.zero_grad();
            }
        }
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let Some(g) = t.grad() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
            let grads = (node.backward)(&t.0.data, &g, &needs);
            debug_assert_eq!(grads.len(), node.inputs.len());
            for ((input, gi), need) in node.inputs.iter().zip(grads).zip(needs) {
                if let (true, Some(gi)) = (need, gi) {
                    debug_assert_eq!(gi.len(), input.len(), "grad length for {:?}", node.op);
                    input.accumulate_grad(&gi);
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph rooted here.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Element-type conversion producing a constant leaf.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|x| U::of(x.to_f64().unwrap_or(f64::NAN))).collect();
        Tensor::build(self.0.shape.clone(), data, false, None)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(matches!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn power_rule() {
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn product_rule_gives_other_factor() {
        let a = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::<f64>::new(&[3], vec![4.0, 5.0, -6.0]).unwrap();
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), b.data());
        assert!(!b.has_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let a = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = a.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_inputs_record_no_graph() {
        let w = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::<f32>::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = x.matmul(&w).unwrap();
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
    }

    #[test]
    fn frozen_parameter_gets_no_gradient_array() {
        let w = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::<f64>::param(&[1, 2], vec![0.5, -1.0]).unwrap();
        x.matmul(&w).unwrap().sum().backward().unwrap();
        assert!(x.has_grad());
        assert!(!w.has_grad());
    }

    #[test]
    fn repeated_backward_after_zeroing_is_bitwise_identical() {
        let x = Tensor::<f32>::param(&[2, 3], vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.7]).unwrap();
        let w = Tensor::<f32>::param(&[3, 2], vec![0.5, -0.1, 0.2, 0.8, -0.6, 0.3]).unwrap();
        let loss = x.matmul(&w).unwrap().softmax(1).unwrap().mul(&x.matmul(&w).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        let (gx, gw) = (x.grad().unwrap(), w.grad().unwrap());
        x.zero_grad();
        w.zero_grad();
        loss.backward().unwrap();
        assert_eq!(gx, x.grad().unwrap());
        assert_eq!(gw, w.grad().unwrap());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(x.scale(3.0).requires_grad());
    }

    #[test]
    fn assign_updates_unique_leaf_in_place() {
        let mut p = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let id = p.id();
        p.assign(vec![3.0, 4.0]).unwrap();
        assert_eq!(p.id(), id);
        assert_eq!(p.data(), &[3.0, 4.0]);
        let shared = p.clone();
        p.assign(vec![5.0, 6.0]).unwrap();
        assert_eq!(shared.data(), &[3.0, 4.0]);
        assert!(p.requires_grad());
    }
}
