//! A compact tape-based autodiff engine for dense tensors.
//!
//! Everything is generic over [`Scalar`], which is implemented for `f32` and
//! `f64`. Training runs in `f32`; gradient checks run the same code in `f64`.
//!
//! The engine is deliberately small: a [`Graph`] records operations applied to
//! [`Var`] handles, and [`Graph::backward`] walks the tape in reverse. Layers in
//! [`nn`] keep their weights in a [`ParamStore`] and bind them to a graph through
//! a [`Binder`] for each forward pass.

mod gemm;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use graph::{BackwardFn, Grads, Graph, Var};
pub use nn::{Binder, Conv3d, InitRng, Linear, Norm, NormKind, ParamId, ParamStore};
pub use optim::{AdamW, AdamWConfig, WarmupCosine};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type usable by the engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;

    /// Strided GEMM, `c = alpha * a * b + beta * c` with `a: m×k`, `b: k×n`,
    /// `c: m×n`, each described by (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: (&[Self], usize, usize),
        b: (&[Self], usize, usize),
        beta: Self,
        c: (&mut [Self], usize, usize),
    );

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major `m×k`, `k×n`, `m×n`
    /// operands; `op` transposes when the flag is set (the stored matrix is then
    /// `k×m` / `n×k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        let (rsa, csa, rsb, csb) = gemm::strides(trans_a, trans_b, m, n, k, a.len(), b.len(), c.len());
        Self::gemm_strided(m, n, k, alpha, (a, rsa, csa), (b, rsb, csb), beta, (c, n, 1));
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn gemm_strided(
        m: usize,
        n: usize,
        k: usize,
        alpha: f32,
        a: (&[f32], usize, usize),
        b: (&[f32], usize, usize),
        beta: f32,
        c: (&mut [f32], usize, usize),
    ) {
        gemm::check_extent(a.0.len(), m, k, a.1, a.2, "lhs");
        gemm::check_extent(b.0.len(), k, n, b.1, b.2, "rhs");
        gemm::check_extent(c.0.len(), m, n, c.1, c.2, "out");
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.0.as_ptr(), a.1 as isize, a.2 as isize, b.0.as_ptr(),
                b.1 as isize, b.2 as isize, beta, c.0.as_mut_ptr(), c.1 as isize, c.2 as isize,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn gemm_strided(
        m: usize,
        n: usize,
        k: usize,
        alpha: f64,
        a: (&[f64], usize, usize),
        b: (&[f64], usize, usize),
        beta: f64,
        c: (&mut [f64], usize, usize),
    ) {
        gemm::check_extent(a.0.len(), m, k, a.1, a.2, "lhs");
        gemm::check_extent(b.0.len(), k, n, b.1, b.2, "rhs");
        gemm::check_extent(c.0.len(), m, n, c.1, c.2, "out");
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.0.as_ptr(), a.1 as isize, a.2 as isize, b.0.as_ptr(),
                b.1 as isize, b.2 as isize, beta, c.0.as_mut_ptr(), c.1 as isize, c.2 as isize,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
