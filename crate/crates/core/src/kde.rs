//! Gaussian product-kernel density estimation with normal-scale bandwidths.

use crate::scalar::{lit, Scalar};
use crate::stats::{inv_sqrt_2pi, sample_sd};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    #[default]
    NormalScale,
}

/// Univariate normal-scale bandwidth `1.06 σ̂ n^{-1/5}`.
pub fn normal_scale_1d<T: Scalar>(x: &[T]) -> T {
    let n = T::from_usize(x.len().max(1)).unwrap();
    lit::<T>(1.06) * positive_scale(x) * n.powf(lit(-0.2))
}

/// Per-dimension normal-scale bandwidths for a product kernel. One dimension
/// uses the univariate rule; otherwise `σ̂_i {4/((d+2)n)}^{1/(d+4)}`.
pub fn normal_scale_product<T: Scalar>(cols: &[Vec<T>]) -> Vec<T> {
    let d = cols.len();
    if d == 1 {
        return vec![normal_scale_1d(&cols[0])];
    }
    let n = T::from_usize(cols.first().map_or(1, |c| c.len().max(1))).unwrap();
    let df = T::from_usize(d).unwrap();
    let factor = (lit::<T>(4.0) / ((df + lit(2.0)) * n)).powf(T::one() / (df + lit(4.0)));
    cols.iter().map(|c| positive_scale(c) * factor).collect()
}

fn positive_scale<T: Scalar>(x: &[T]) -> T {
    let sd = sample_sd(x);
    if sd > T::zero() && sd.is_finite() {
        sd
    } else {
        lit(1e-3)
    }
}

/// Kernel mass beyond this many bandwidths along the first coordinate is
/// dropped (relative weight below `e^{-50}`).
const CUTOFF: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct Kde<T: Scalar> {
    d: usize,
    /// Points sorted by their first coordinate, row-major.
    pts: Vec<T>,
    w: Vec<T>,
    /// Original index of each sorted point.
    orig: Vec<usize>,
    /// Sorted position of each original point.
    rank: Vec<usize>,
    inv_h: Vec<T>,
    norm: T,
    wsum: T,
}

impl<T: Scalar> Kde<T> {
    /// `rows` holds `n` points of dimension `d`.
    pub fn new(rows: &[Vec<T>], weights: Option<&[T]>, bandwidths: Vec<T>) -> Self {
        let d = bandwidths.len();
        for r in rows {
            assert_eq!(r.len(), d, "point dimension mismatch");
        }
        let mut orig: Vec<usize> = (0..rows.len()).collect();
        if d > 0 {
            orig.sort_by(|&a, &b| rows[a][0].partial_cmp(&rows[b][0]).unwrap_or(std::cmp::Ordering::Equal));
        }
        let mut pts = Vec::with_capacity(rows.len() * d);
        for &i in &orig {
            pts.extend_from_slice(&rows[i]);
        }
        let w: Vec<T> = match weights {
            Some(w) => orig.iter().map(|&i| w[i]).collect(),
            None => vec![T::one(); rows.len()],
        };
        let wsum = w.iter().copied().sum();
        let mut norm = T::one();
        for &h in &bandwidths {
            norm = norm * inv_sqrt_2pi::<T>() / h;
        }
        let inv_h = bandwidths.iter().map(|&h| T::one() / h).collect();
        let mut rank = vec![0; orig.len()];
        for (pos, &o) in orig.iter().enumerate() {
            rank[o] = pos;
        }
        Kde { d, pts, w, orig, rank, inv_h, norm, wsum }
    }

    /// Fits with normal-scale bandwidths computed from the sample.
    pub fn fit(rows: &[Vec<T>], weights: Option<&[T]>) -> Self {
        let d = rows.first().map_or(1, |r| r.len());
        let cols: Vec<Vec<T>> = (0..d).map(|k| rows.iter().map(|r| r[k]).collect()).collect();
        let h = normal_scale_product(&cols);
        Self::new(rows, weights, h)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn bandwidths(&self) -> Vec<T> {
        self.inv_h.iter().map(|&v| T::one() / v).collect()
    }

    /// Sorted positions whose first coordinate lies within the cutoff of `x`.
    fn window(&self, x: &[T]) -> std::ops::Range<usize> {
        let n = self.w.len();
        if self.d == 0 {
            return 0..n;
        }
        let r = lit::<T>(CUTOFF) / self.inv_h[0];
        let (lo, hi) = (x[0] - r, x[0] + r);
        let key = |i: usize| self.pts[i * self.d];
        let a = partition_point(n, |i| key(i) < lo);
        let b = partition_point(n, |i| key(i) <= hi);
        a..b.max(a)
    }

    fn wsum_without(&self, skip: usize) -> T {
        match self.rank.get(skip) {
            Some(&pos) => self.wsum - self.w[pos],
            None => self.wsum,
        }
    }

    #[inline]
    fn kernel_at(&self, i: usize, x: &[T]) -> T {
        let base = i * self.d;
        let mut q = T::zero();
        for k in 0..self.d {
            let u = (x[k] - self.pts[base + k]) * self.inv_h[k];
            q = q + u * u;
        }
        (lit::<T>(-0.5) * q).exp()
    }

    /// Density at `x`.
    pub fn density(&self, x: &[T]) -> T {
        self.density_excluding(x, usize::MAX)
    }

    /// Density at `x` leaving out sample point `skip` (original index).
    pub fn density_excluding(&self, x: &[T], skip: usize) -> T {
        let mut acc = T::zero();
        let wsum = self.wsum_without(skip);
        for i in self.window(x) {
            if self.orig[i] == skip {
                continue;
            }
            acc = acc + self.w[i] * self.kernel_at(i, x);
        }
        if wsum <= T::zero() {
            return T::zero();
        }
        acc * self.norm / wsum
    }

    /// Density and its partial derivative with respect to coordinate `k`,
    /// leaving out sample point `skip` (pass `usize::MAX` to keep all).
    pub fn density_and_partial_excluding(&self, x: &[T], k: usize, skip: usize) -> (T, T) {
        let mut f = T::zero();
        let mut g = T::zero();
        let wsum = self.wsum_without(skip);
        for i in self.window(x) {
            if self.orig[i] == skip {
                continue;
            }
            let kv = self.w[i] * self.kernel_at(i, x);
            f = f + kv;
            let u = (x[k] - self.pts[i * self.d + k]) * self.inv_h[k];
            g = g - kv * u * self.inv_h[k];
        }
        if wsum <= T::zero() {
            return (T::zero(), T::zero());
        }
        (f * self.norm / wsum, g * self.norm / wsum)
    }

    /// Kernel sums `(Σ w_i K_i, Σ w_i K_i v_i)` at `x`; `vals` is indexed by
    /// original point order. Nadaraya-Watson regression divides the two.
    pub fn kernel_sums(&self, x: &[T], vals: &[T]) -> (T, T) {
        let mut a = T::zero();
        let mut b = T::zero();
        for i in self.window(x) {
            let kv = self.w[i] * self.kernel_at(i, x);
            a = a + kv;
            b = b + kv * vals[self.orig[i]];
        }
        (a, b)
    }

    /// Density and its partial derivative with respect to coordinate `k`.
    pub fn density_and_partial(&self, x: &[T], k: usize) -> (T, T) {
        self.density_and_partial_excluding(x, k, usize::MAX)
    }
}

/// First index in `0..n` where `pred` turns false (`pred` monotone).
fn partition_point(n: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Standard Gaussian kernel value.
#[inline]
pub fn gauss<T: Scalar>(u: T) -> T {
    inv_sqrt_2pi::<T>() * (lit::<T>(-0.5) * u * u).exp()
}
