use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a [`Tensor`](super::Tensor).
///
/// Training runs in `f32`; gradient verification runs in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// Row-major `c = op(a) * op(b) + beta * c` where `op(a)` is `[m, k]`
    /// and `op(b)` is `[k, n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical [rows, cols]; stored transposed when `trans`
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn check_gemm_lengths(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert_eq!(a, m * k, "gemm: lhs length");
    assert_eq!(b, k * n, "gemm: rhs length");
    assert_eq!(c, m * n, "gemm: output length");
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        trans_a: bool,
        b: &[f32],
        trans_b: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_lengths(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, trans_a);
        let (rsb, csb) = strides(k, n, trans_b);
        // SAFETY: lengths checked above; strides describe in-bounds
        // row-major or transposed layouts of those buffers.
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
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        trans_a: bool,
        b: &[f64],
        trans_b: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_lengths(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, trans_a);
        let (rsb, csb) = strides(k, n, trans_b);
        // SAFETY: see the f32 implementation.
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
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            f64::gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(1, 2, 1, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }
}
