//! Minimal dense-tensor arithmetic with reverse-mode gradient propagation.
//!
//! Tensors live as nodes on a tape ([`Graph`]); every operation computes its
//! value eagerly and records enough structure to replay the chain rule in
//! reverse. The op set is exactly what the forecaster's forward pass needs:
//! valid cross-correlation, affine maps, tanh, a temperature sigmoid, the
//! broadcasting window product, the elementwise product, and reductions.

mod adam;
mod graph;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, NodeId};

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps, NumCast};

/// Errors raised by tensor construction, ops, and the backward pass.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: size mismatch on axis {axis} ({left} vs {right})")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("conv kernel exceeds input on axis {axis} (kernel {kernel}, input {input})")]
    KernelTooLarge {
        axis: usize,
        kernel: usize,
        input: usize,
    },
    #[error("{op}: element count mismatch (expected {expected}, got {got})")]
    NumelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("sigmoid temperature must be positive, got {got}")]
    NonPositiveTemperature { got: String },
    #[error("{op}: values/shape mismatch (shape implies {expected} elements, got {got})")]
    BadConstruction {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Scalar types the engine can run on. Provides the dense matmul kernel the
/// affine layers are built from; everything else comes from [`Float`].
pub trait Scalar:
    Float + NumAssignOps + NumCast + Debug + Display + Send + Sync + 'static
{
    /// `c <- alpha * a@b + beta * c` over strided row-major buffers.
    ///
    /// # Safety
    /// Pointers must cover `m x k`, `k x n` and `m x n` elements under the
    /// given strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts into every Scalar")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
