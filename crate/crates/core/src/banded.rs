//! Banded matrices: symmetric band storage with Cholesky, and a general
//! band LU with partial pivoting for the indefinite Newton systems.

use crate::error::{Error, Result};

/// Symmetric matrix stored by its lower band.
///
/// Entry `(i, i - k)` for `k <= bandwidth` lives at `data[i * (bandwidth + 1) + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSym {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, 0);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        (k <= self.bandwidth).then(|| hi * (self.bandwidth + 1) + k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Sets both `(i, j)` and `(j, i)`.
    ///
    /// Panics when the entry lies outside the band.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside bandwidth {}", self.bandwidth));
        self.data[s] = value;
    }

    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside bandwidth {}", self.bandwidth));
        self.data[s] += value;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        let b = self.bandwidth;
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.data[i * (b + 1)..(i + 1) * (b + 1)];
            y[i] += row[0] * x[i];
            for k in 1..=b.min(i) {
                let a = row[k];
                y[i] += a * x[i - k];
                y[i - k] += a * x[i];
            }
        }
        y
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.matvec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// Principal submatrix on sorted `indices`. Dropping rows and columns
    /// never widens the band, so the result keeps the same bandwidth.
    pub fn principal_submatrix(&self, indices: &[usize]) -> BandedSym {
        let m = indices.len();
        let mut sub = BandedSym::zeros(m, self.bandwidth);
        for a in 0..m {
            for k in 0..=self.bandwidth.min(a) {
                sub.data[a * (self.bandwidth + 1) + k] = self.get(indices[a], indices[a - k]);
            }
        }
        sub
    }

    /// Returns `self - diag(d)` as a general band matrix.
    pub fn shifted_general(&self, diag: &[f64]) -> BandedGeneral {
        debug_assert_eq!(diag.len(), self.n);
        let b = self.bandwidth;
        let mut g = BandedGeneral::zeros(self.n, b, b);
        for i in 0..self.n {
            let lo = i.saturating_sub(b);
            let hi = (i + b).min(self.n.saturating_sub(1));
            for j in lo..=hi {
                g.set(i, j, self.get(i, j));
            }
            g.set(i, i, self.get(i, i) - diag[i]);
        }
        g
    }

    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let n = self.n;
        let b = self.bandwidth;
        let w = b + 1;
        // l[i * w + k] = L(i, i - k)
        let mut l = self.data.clone();
        for i in 0..n {
            for k in (1..=b.min(i)).rev() {
                let j = i - k;
                let mut s = l[i * w + k];
                // sum over m < j, both rows in band
                for m in 1..=b.min(j) {
                    let col = j - m;
                    if i - col > b {
                        continue;
                    }
                    s -= l[i * w + (i - col)] * l[j * w + m];
                }
                l[i * w + k] = s / l[j * w];
            }
            let mut d = l[i * w];
            for k in 1..=b.min(i) {
                d -= l[i * w + k] * l[i * w + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: i, pivot: d });
            }
            l[i * w] = d.sqrt();
        }
        Ok(BandedCholesky {
            n,
            bandwidth: b,
            l,
        })
    }
}

/// Lower band factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let b = self.bandwidth;
        let w = b + 1;
        for i in 0..self.n {
            let mut s = x[i];
            for k in 1..=b.min(i) {
                s -= self.l[i * w + k] * x[i - k];
            }
            x[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for k in 1..=b.min(self.n - 1 - i) {
                s -= self.l[(i + k) * w + k] * x[i + k];
            }
            x[i] = s / self.l[i * w];
        }
    }
}

/// General band matrix with `lower` sub- and `upper` super-diagonals.
/// Rows reserve `lower` extra super-diagonals for pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandedGeneral {
    n: usize,
    lower: usize,
    upper: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandedGeneral {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        let width = 2 * lower + upper + 1;
        Self {
            n,
            lower,
            upper,
            width,
            data: vec![0.0; n * width],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.lower >= i && j <= i + self.lower + self.upper);
        i * self.width + (j + self.lower - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.lower < i || j > i + self.lower + self.upper {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    /// LU with partial pivoting, consumed in place.
    pub fn factor(mut self) -> Result<BandedLu> {
        let n = self.n;
        let kl = self.lower;
        let reach = self.lower + self.upper;
        let mut pivots = vec![0usize; n];
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            pivots[k] = p;
            if best <= f64::EPSILON * scale * 1e-4 {
                return Err(Error::Singular { index: k });
            }
            let last_col = (k + reach).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.get(k, j);
                    let b = self.get(p, j);
                    self.set(k, j, b);
                    self.set(p, j, a);
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let m = self.get(i, k) / pivot;
                self.set(i, k, m);
                if m != 0.0 {
                    for j in k + 1..=last_col {
                        let v = self.get(i, j) - m * self.get(k, j);
                        self.set(i, j, v);
                    }
                }
            }
        }
        Ok(BandedLu { a: self, pivots })
    }
}

#[derive(Debug, Clone)]
pub struct BandedLu {
    a: BandedGeneral,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.a.n;
        assert_eq!(rhs.len(), n);
        let kl = self.a.lower;
        let reach = self.a.lower + self.a.upper;
        let mut x = rhs.to_vec();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                x[i] -= self.a.get(i, k) * xk;
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + reach).min(n - 1) {
                s -= self.a.get(i, j) * x[j];
            }
            x[i] = s / self.a.get(i, i);
        }
        x
    }
}
