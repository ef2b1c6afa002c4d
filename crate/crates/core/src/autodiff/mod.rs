//! Define-by-run reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations append a
//! node holding their output value plus whatever they need for the
//! backward rule; [`Tape::backward`] walks the nodes in reverse recording
//! order and accumulates gradients additively into every tracked node.
//!
//! Everything is generic over [`Real`] so the same forward code can be
//! evaluated in `f64` by finite-difference checks, while training runs in
//! `f32`.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{gelu, gelu_grad};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use num_traits::Float;

/// Floating-point element type usable on a tape.
pub trait Real: Float + Default + std::fmt::Debug + std::iter::Sum + Send + Sync + 'static {
    /// `C = alpha·A·B + beta·C` for an `m×k` by `k×n` product with
    /// arbitrary strides on A and B and a row-major C.
    ///
    /// # Safety
    /// Pointers and strides must describe valid matrices of the stated
    /// extents.
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

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;

    fn from_f32(x: f32) -> Self {
        Self::from_f64(x as f64)
    }

    fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }
}

impl Real for f32 {
    unsafe fn gemm(
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

    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm(
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

    fn from_f64(x: f64) -> f64 {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}
