//! Central finite differences and polynomial extrapolation to zero step.

use crate::scalar::{lit, Scalar};

/// Step `ε^{1/3}(1+|p|)` for central differences of smooth functions.
pub fn cbrt_eps_step<T: Scalar>(p: T) -> T {
    T::epsilon().cbrt() * (T::one() + p.abs())
}

/// Step `1e-5 (1+|p|)` used for Jacobians of estimating equations.
pub fn jacobian_step<T: Scalar>(p: T) -> T {
    lit::<T>(1e-5) * (T::one() + p.abs())
}

pub fn central_diff<T: Scalar, F: Fn(T) -> T>(f: F, x: T, h: T) -> T {
    (f(x + h) - f(x - h)) / (h + h)
}

/// Neville extrapolation to `h = 0` of values `y_i = D(h_i)` whose error
/// expands in even powers of `h`.
pub fn extrapolate_even<T: Scalar>(h: &[T], y: &[T]) -> T {
    let n = h.len();
    assert_eq!(n, y.len());
    let x: Vec<T> = h.iter().map(|&v| v * v).collect();
    let mut p = y.to_vec();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (x[i + m] * p[i] - x[i] * p[i + 1]) / (x[i + m] - x[i]);
        }
    }
    p[0]
}

/// Central-difference Jacobian of `f: ℝ^p → ℝ^q`, returned row-major as
/// `q` rows of length `p`.
pub fn jacobian<T: Scalar, F>(f: F, x: &[T], step: impl Fn(T) -> T) -> Vec<Vec<T>>
where
    F: Fn(&[T]) -> Vec<T>,
{
    let p = x.len();
    let mut cols: Vec<Vec<T>> = Vec::with_capacity(p);
    let mut xp = x.to_vec();
    for k in 0..p {
        let h = step(x[k]);
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        cols.push(fp.iter().zip(&fm).map(|(&a, &b)| (a - b) / (h + h)).collect());
    }
    let q = cols.first().map_or(0, |c| c.len());
    (0..q).map(|i| (0..p).map(|k| cols[k][i]).collect()).collect()
}
