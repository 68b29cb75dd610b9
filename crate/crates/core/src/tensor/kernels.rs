//! Plain forward kernels shared by the autodiff graph and the
//! cached inference path, so both compute identical arithmetic.

use super::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row of `x` (`rows x cols`) and applies `gain`/`bias`.
/// Returns per-row `(mean, inverse std)`.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
) -> Vec<(T, T)> {
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let inv_cols = T::one() / T::from_usize(cols).unwrap();
    x.chunks_exact(cols)
        .zip(out.chunks_exact_mut(cols))
        .map(|(row, dst)| {
            let mean = row.iter().copied().sum::<T>() * inv_cols;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_cols;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, (o, &v)) in dst.iter_mut().zip(row).enumerate() {
                *o = (v - mean) * rstd * gain[j] + bias[j];
            }
            (mean, rstd)
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Rotation frequency of pair `pair` inside a head of width `head_dim`.
pub fn rope_frequency(pair: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-(2.0 * pair as f64) / head_dim as f64)
}

/// Rotates every adjacent pair of every head in each row by the row's
/// position. `inverse` rotates by the negated angle (the adjoint).
pub fn rope_rows<T: Scalar>(
    x: &mut [T],
    cols: usize,
    positions: &[usize],
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    debug_assert_eq!(x.len(), positions.len() * cols);
    debug_assert_eq!(head_dim % 2, 0);
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|j| rope_frequency(j, head_dim, base)).collect();
    for (row, &pos) in x.chunks_exact_mut(cols).zip(positions) {
        let trig: Vec<(T, T)> = freqs
            .iter()
            .map(|f| {
                let theta = pos as f64 * f;
                let s = if inverse { -theta.sin() } else { theta.sin() };
                (T::from_f64_lossy(theta.cos()), T::from_f64_lossy(s))
            })
            .collect();
        for head in row.chunks_exact_mut(head_dim) {
            for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&trig) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}

/// In-place numerically stable softmax over a slice.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over each row; with `causal`, row `i` only covers columns `0..=i`
/// and the rest are zero.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize, causal: bool) -> Vec<T> {
    let mut out = x.to_vec();
    for (i, row) in out.chunks_exact_mut(cols).enumerate() {
        if causal {
            let live = (i + 1).min(cols);
            softmax_in_place(&mut row[..live]);
            row[live..].iter_mut().for_each(|v| *v = T::zero());
        } else {
            softmax_in_place(row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let mut x: Vec<f64> = (0..16).map(|v| v as f64 - 7.5).collect();
        let orig = x.clone();
        rope_rows(&mut x, 8, &[3, 11], 4, 10_000.0, false);
        rope_rows(&mut x, 8, &[3, 11], 4, 10_000.0, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let p = softmax_rows(&[0.3f64, 9.0, 1.0, 2.0], 2, true);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!((p[2] + p[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 8.0];
        let mut out = [0.0; 8];
        layer_norm_rows(&x, 4, &[1.0; 4], &[0.0; 4], &mut out);
        for row in out.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
