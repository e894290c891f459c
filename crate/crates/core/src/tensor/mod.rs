//! Dense tensors with a reverse-mode tape.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations are
//! methods on a [`Graph`], which records a node only when at least one input
//! requires a gradient. Parameters that are frozen (`requires_grad == false`)
//! therefore never appear on the tape and never accumulate gradient.
//!
//! Element type is generic over [`Real`]: `f32` for training and `f64` for
//! finite-difference verification.

mod graph;
mod kernels;
mod ops;

pub mod gradcheck;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use graph::Graph;

/// Floating point element type of a tensor.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Every strided index touched in `a`, `b` and `c` must be in bounds.
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got `{other}`"
            ))),
        }
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

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
    ) {
        matrixmultiply::sgemm(
            m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc,
        );
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

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
    ) {
        matrixmultiply::dgemm(
            m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc,
        );
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Location of the node that produced a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub graph: u64,
    pub index: usize,
}

pub(crate) struct TensorInner<F: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
    node: Option<NodeRef>,
    grad: Mutex<Option<Vec<F>>>,
}

/// Immutable dense tensor. Cloning is cheap and shares the buffer.
pub struct Tensor<F: Real>(Arc<TensorInner<F>>);

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            op: "tensor",
            reason: format!("dimensions must be positive, got {shape:?}"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidShape {
            op: "tensor",
            reason: format!("shape {shape:?} holds {numel} values but {len} were given"),
        });
    }
    Ok(())
}

impl<F: Real> Tensor<F> {
    fn build(
        shape: Vec<usize>,
        data: Arc<Vec<F>>,
        requires_grad: bool,
        node: Option<NodeRef>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(TensorInner {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
            grad: Mutex::new(None),
        }))
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<F>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![F::zero(); shape.iter().product()])
    }

    pub fn scalar(v: F) -> Self {
        Self::build(vec![1], Arc::new(vec![v]), false, None)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        node: Option<NodeRef>,
    ) -> Self {
        Self::build(shape, Arc::new(data), requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// True when both handles refer to the same underlying tensor.
    pub fn same(&self, other: &Tensor<F>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// True when the tensor was produced by a recorded graph node.
    pub fn is_recorded(&self) -> bool {
        self.0.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.0.node
    }

    pub(crate) fn inner(&self) -> &Arc<TensorInner<F>> {
        &self.0
    }

    /// A new leaf sharing this tensor's values with the given grad flag.
    pub fn detached(&self, requires_grad: bool) -> Tensor<F> {
        Self::build(
            self.0.shape.clone(),
            Arc::clone(&self.0.data),
            requires_grad,
            None,
        )
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().expect("grad lock").is_some()
    }

    pub fn take_grad(&self) -> Option<Vec<F>> {
        self.0.grad.lock().expect("grad lock").take()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: Vec<F>) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.lock().expect("grad lock");
        accumulate(&mut slot, g);
    }

    /// Bitwise equality of shape and values.
    pub fn bitwise_eq(&self, other: &Tensor<F>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Cast to another element type, keeping the grad flag but not the graph.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::<G>::build(
            self.0.shape.clone(),
            Arc::new(
                self.0
                    .data
                    .iter()
                    .map(|v| G::from_f64_lossy(v.as_f64()))
                    .collect(),
            ),
            self.0.requires_grad,
            None,
        )
    }
}

impl<F: Real> TensorInner<F> {
    pub(crate) fn set_grad(&self, g: Vec<F>) {
        *self.grad.lock().expect("grad lock") = Some(g);
    }
}

pub(crate) fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, g: Vec<F>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.len(), g.len());
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn constants_never_accumulate() {
        let t = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(vec![1.0, 1.0]);
        assert!(t.grad().is_none());
        let p = t.detached(true);
        p.accumulate_grad(vec![1.0, 1.0]);
        p.accumulate_grad(vec![0.5, 0.5]);
        assert_eq!(p.grad().unwrap(), vec![1.5, 1.5]);
    }
}
