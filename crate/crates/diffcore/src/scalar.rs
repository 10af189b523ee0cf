//! Floating-point element types supported by the tape.

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f64` (the default, used by gradient checks) and `f32`
/// (used for training runs where throughput matters).
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Elementwise `exp`, overwriting `x`.
    fn exp_in_place(x: &mut [Self]) {
        for v in x {
            *v = v.exp();
        }
    }

    /// `c = op(a) * op(b) + beta * c` for row-major operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    // Cephes-style range reduction and polynomial, written to vectorise.
    // Relative error stays within a few ulp; results below e^-87 flush to 0.
    fn exp_in_place(x: &mut [Self]) {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        const ROUND: f32 = 12_582_912.0;
        for v in x {
            let xv = *v;
            let c = xv.min(88.3).max(-87.3);
            let n = (c * LOG2E + ROUND) - ROUND;
            let r = c - n * LN2_HI - n * LN2_LO;
            let mut p = 1.987_569_2e-4f32;
            p = p * r + 1.398_199_9e-3;
            p = p * r + 8.333_452e-3;
            p = p * r + 4.166_579_6e-2;
            p = p * r + 1.666_666_5e-1;
            p = p * r + 5.000_000_1e-1;
            let y = p * r * r + r + 1.0;
            let scale = f32::from_bits((((n as i32) + 127) as u32) << 23);
            let out = y * scale;
            *v = if xv < -87.3 { 0.0 } else if xv.is_nan() { xv } else { out };
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product `c (+)= op(a) * op(b)`.
///
/// `op(a)` is `m x k`; when `a_t` is set, `a` is stored as `k x m`.
/// `op(b)` is `k x n`; when `b_t` is set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths were checked above and `c` is a distinct mutable slice.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
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

/// Strided matrix operand: data, offset of element (0, 0), row stride, column stride.
pub(crate) type View<'a, F> = (&'a [F], usize, isize, isize);

fn last_index(rows: usize, cols: usize, off: usize, rs: isize, cs: isize) -> usize {
    off + (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

/// `c = a * b + beta * c` over strided views of `m x k`, `k x n` and `m x n`
/// matrices with non-negative strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, F>,
    b: View<'_, F>,
    beta: F,
    c: (&mut [F], usize, isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(m, n, c.1, c.2, c.3) < c.0.len(), "gemm_view: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c.0[c.1 + i * c.2 as usize + j * c.3 as usize];
                *x = if beta == F::zero() { F::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!(a.2 >= 0 && a.3 >= 0 && b.2 >= 0 && b.3 >= 0 && c.2 >= 0 && c.3 >= 0);
    assert!(last_index(m, k, a.1, a.2, a.3) < a.0.len(), "gemm_view: lhs out of bounds");
    assert!(last_index(k, n, b.1, b.2, b.3) < b.0.len(), "gemm_view: rhs out of bounds");
    // SAFETY: every addressed element lies inside its slice (checked above)
    // and `c` is a unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}
