//! Floating-point scalar abstraction shared by the numeric modules.
//!
//! Everything numeric is generic over [`Real`] so the same code runs in
//! 32-bit (training, streaming) and 64-bit (oracles, gradient checks).

use std::fmt;
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst};
use realfft::FftNum;

pub trait Real:
    Float + FloatConst + FftNum + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// `c = alpha * a * b + beta * c` for strided matrices.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every index reachable through
    /// the given dimensions and strides must be in bounds.
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

    fn lit(v: f64) -> Self {
        Self::from(v).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
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

/// Reinterpret a complex slice as interleaved `[re, im, re, im, ...]`.
pub fn complex_as_reals<T>(v: &[Complex<T>]) -> &[T] {
    // SAFETY: `Complex<T>` is `#[repr(C)]` with exactly two `T` fields.
    unsafe { std::slice::from_raw_parts(v.as_ptr().cast::<T>(), v.len() * 2) }
}

pub fn complex_as_reals_mut<T>(v: &mut [Complex<T>]) -> &mut [T] {
    // SAFETY: see `complex_as_reals`.
    unsafe { std::slice::from_raw_parts_mut(v.as_mut_ptr().cast::<T>(), v.len() * 2) }
}

pub fn cast_slice<A: Real, B: Real>(v: &[A]) -> Vec<B> {
    v.iter().map(|x| B::from(*x).expect("finite cast")).collect()
}

pub fn cast_complex<A: Real, B: Real>(v: &[Complex<A>]) -> Vec<Complex<B>> {
    v.iter()
        .map(|z| Complex::new(B::from(z.re).unwrap(), B::from(z.im).unwrap()))
        .collect()
}
