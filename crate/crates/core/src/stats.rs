//! Weighted moments and small dense linear algebra helpers.

use crate::error::{FusionError, Result};
use crate::scalar::{lit, Scalar};
use nalgebra::{DMatrix, DVector};

/// Sequential left-to-right sum; the order is fixed so results do not depend
/// on scheduling.
pub fn sum<T: Scalar>(x: &[T]) -> T {
    let mut acc = T::zero();
    for &v in x {
        acc = acc + v;
    }
    acc
}

/// Weighted mean `Σ w x / Σ w`. With unit weights this is bit-identical to the
/// plain mean `Σ x / n`.
pub fn weighted_mean<T: Scalar>(x: &[T], w: &[T]) -> T {
    assert_eq!(x.len(), w.len());
    let mut num = T::zero();
    let mut den = T::zero();
    for (&xi, &wi) in x.iter().zip(w) {
        num = num + wi * xi;
        den = den + wi;
    }
    num / den
}

pub fn mean<T: Scalar>(x: &[T]) -> T {
    sum(x) / T::from_usize(x.len()).unwrap()
}

/// Weighted variance normalized by `Σ w` (plug-in second central moment).
pub fn weighted_var<T: Scalar>(x: &[T], w: &[T]) -> T {
    let m = weighted_mean(x, w);
    let mut num = T::zero();
    let mut den = T::zero();
    for (&xi, &wi) in x.iter().zip(w) {
        num = num + wi * (xi - m) * (xi - m);
        den = den + wi;
    }
    num / den
}

/// Sample standard deviation with the `n − 1` denominator.
pub fn sample_sd<T: Scalar>(x: &[T]) -> T {
    let n = x.len();
    if n < 2 {
        return T::zero();
    }
    let m = mean(x);
    let ss: T = x.iter().map(|&v| (v - m) * (v - m)).sum();
    (ss / T::from_usize(n - 1).unwrap()).sqrt()
}

/// Weighted standard deviation, rescaled by `n/(n−1)` so unit weights give
/// the sample standard deviation.
pub fn weighted_sd<T: Scalar>(x: &[T], w: &[T]) -> T {
    let n = x.len();
    if n < 2 {
        return T::zero();
    }
    let nf = T::from_usize(n).unwrap();
    (weighted_var(x, w) * nf / (nf - T::one())).sqrt()
}

/// Ordinary least-squares slope of `y` on `x` with intercept.
pub fn ls_slope<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        sxy = sxy + (a - mx) * (b - my);
        sxx = sxx + (a - mx) * (a - mx);
    }
    sxy / sxx
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    x.max(lo).min(hi)
}

/// Pivots of a Cholesky factor below this share of the largest count as
/// numerically singular.
const PIVOT_RATIO: f64 = 1e-12;

/// Symmetric positive semidefinite solve `A x = b`. Falls back to a ridge
/// penalty scaled by the trace when the Cholesky factorization fails or is
/// numerically singular. Returns the solution and whether the ridge was needed.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    if let Some(ch) = a.clone().cholesky() {
        let piv: Vec<f64> = ch.l_dirty().diagonal().iter().map(|v| v * v).collect();
        let top = piv.iter().cloned().fold(0.0, f64::max);
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) && piv.iter().all(|&v| v > PIVOT_RATIO * top) {
            return Ok((x, false));
        }
    }
    let p = a.nrows();
    let scale = (a.trace() / p.max(1) as f64).abs().max(1e-12);
    let mut reg = a.clone();
    for i in 0..p {
        reg[(i, i)] += 1e-8 * scale;
    }
    let ch = reg
        .cholesky()
        .ok_or_else(|| FusionError::Numerical("design matrix singular even after ridge".into()))?;
    Ok((ch.solve(b), true))
}

/// Pseudo-inverse of a symmetric PSD matrix with relative eigenvalue
/// tolerance. Uses the symmetric eigendecomposition: the general SVD can
/// return inaccurate singular values on rank-deficient Gram matrices.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let tol = top * 1e-12 * a.nrows() as f64;
    let inv = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Half-width multiplier of a two-sided interval at the given level.
pub fn z_value(level: f64) -> f64 {
    normal_quantile(0.5 + level / 2.0)
}

pub fn inv_sqrt_2pi<T: Scalar>() -> T {
    lit::<T>(0.398_942_280_401_432_7)
}
