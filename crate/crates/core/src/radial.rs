//! Radial discretization of `H²_rad(ℝᴺ)` on a truncated interval `(0, r_max)`.
//!
//! Nodes sit at `r_i = i·h`, `i = 1..=n`, with `h = r_max / (n + 1)`. The
//! clamped end `u(r_max) = 0` is the missing node `n + 1`; the even
//! extension through the origin enters the first row via the quadratic
//! extrapolation `u(0) = (4 u₁ - u₂) / 3`, which is exact on `{1, r²}`.
//!
//! The bilaplacian is never stenciled directly. The inner product
//! `⟨u, v⟩ = ∫ Δu Δv + V u v` is assembled weakly as `Lᵀ W L + W V`, where
//! `L` is the tridiagonal radial Laplacian and `W` the diagonal quadrature.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::banded::{BandedCholesky, BandedSym};
use crate::error::{Error, Result};

/// Smallest admissible number of interior nodes.
pub const MIN_NODES: usize = 4;

/// Default relative threshold separating round-off from a sign violation.
pub const DEFAULT_TOL_POS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    dim_n: usize,
    r_max: f64,
    n_nodes: usize,
    spacing: f64,
    radii: Vec<f64>,
    sphere_area: f64,
}

/// Γ(k/2) for positive integer `k`.
fn gamma_half(k: usize) -> f64 {
    let (mut x, mut g) = if k.is_multiple_of(2) {
        (1.0, 1.0)
    } else {
        (0.5, std::f64::consts::PI.sqrt())
    };
    while x < k as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Surface measure of the unit sphere in ℝᴺ, `2 π^{N/2} / Γ(N/2)`.
pub fn unit_sphere_area(dim_n: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(dim_n as f64 / 2.0) / gamma_half(dim_n)
}

/// Critical Sobolev exponent `2_* = 2N / (N - 4)`; `None` when `N <= 4`.
pub fn critical_exponent(dim_n: usize) -> Option<f64> {
    (dim_n >= 5).then(|| 2.0 * dim_n as f64 / (dim_n as f64 - 4.0))
}

pub fn build_grid(dim_n: usize, r_max: f64, n_nodes: usize) -> Result<RadialGrid> {
    if dim_n < 5 {
        return Err(Error::InvalidGrid(format!(
            "dimension {dim_n} < 5 leaves the critical exponent 2N/(N-4) undefined"
        )));
    }
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(Error::InvalidGrid(format!("r_max must be positive, got {r_max}")));
    }
    if n_nodes < MIN_NODES {
        return Err(Error::InvalidGrid(format!(
            "need at least {MIN_NODES} interior nodes, got {n_nodes}"
        )));
    }
    let spacing = r_max / (n_nodes + 1) as f64;
    let radii = (1..=n_nodes).map(|i| i as f64 * spacing).collect();
    Ok(RadialGrid {
        dim_n,
        r_max,
        n_nodes,
        spacing,
        radii,
        sphere_area: unit_sphere_area(dim_n),
    })
}

impl RadialGrid {
    pub fn dim_n(&self) -> usize {
        self.dim_n
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
    pub fn sphere_area(&self) -> f64 {
        self.sphere_area
    }
    pub fn critical_exponent(&self) -> f64 {
        critical_exponent(self.dim_n).expect("grid dimension is at least 5")
    }

    /// Samples `g(r)` at the nodes.
    pub fn sample(&self, g: impl Fn(f64) -> f64) -> Field {
        Field(self.radii.iter().map(|&r| g(r)).collect())
    }

    pub fn zeros(&self) -> Field {
        Field(vec![0.0; self.n_nodes])
    }
}

/// Nodal values of a radial function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Field(pub Vec<f64>);

impl Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Field {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Field {
    fn from(v: Vec<f64>) -> Self {
        Field(v)
    }
}

impl Field {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field(self.0.iter().map(|v| c * v).collect())
    }

    /// `self + c · other`.
    pub fn plus_scaled(&self, c: f64, other: &[f64]) -> Field {
        debug_assert_eq!(self.len(), other.len());
        Field(self.0.iter().zip(other).map(|(a, b)| a + c * b).collect())
    }

    pub fn minus(&self, other: &[f64]) -> Field {
        self.plus_scaled(-1.0, other)
    }

    pub fn neg(&self) -> Field {
        self.scaled(-1.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.len() == n {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: n,
                found: self.len(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights(Vec<f64>);

impl Deref for QuadratureWeights {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl QuadratureWeights {
    /// `Σ w_i g_i`.
    pub fn integrate(&self, g: &[f64]) -> f64 {
        self.0.iter().zip(g).map(|(w, v)| w * v).sum()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Trapezoid rule for `∫_{B_{r_max}} g = |S^{N-1}| ∫₀^{r_max} g(r) r^{N-1} dr`.
///
/// The origin carries zero weight. The half-cell at `r_max` is lumped onto
/// the last node; fields vanish there to first order, so integrals of fields
/// stay second order while `Σ w_i` is the trapezoid volume of the ball.
pub fn assemble_quadrature(grid: &RadialGrid) -> QuadratureWeights {
    let h = grid.spacing;
    let pw = (grid.dim_n - 1) as i32;
    let mut w: Vec<f64> = grid
        .radii
        .iter()
        .map(|r| grid.sphere_area * r.powi(pw) * h)
        .collect();
    if let Some(last) = w.last_mut() {
        *last += 0.5 * grid.sphere_area * grid.r_max.powi(pw) * h;
    }
    QuadratureWeights(w)
}

/// Tridiagonal radial Laplacian `u'' + (N-1) u' / r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Laplacian {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        debug_assert_eq!(u.len(), n);
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * u[i];
                if i > 0 {
                    s += self.sub[i] * u[i - 1];
                }
                if i + 1 < n {
                    s += self.sup[i] * u[i + 1];
                }
                s
            })
            .collect()
    }
}

pub fn assemble_laplacian(grid: &RadialGrid) -> Laplacian {
    let n = grid.n_nodes;
    let h = grid.spacing;
    let h2 = h * h;
    let drift = (grid.dim_n - 1) as f64;
    let mut sub = vec![0.0; n];
    let mut diag = vec![-2.0 / h2; n];
    let mut sup = vec![0.0; n];
    for (i, &r) in grid.radii.iter().enumerate() {
        let left = 1.0 / h2 - drift / (2.0 * r * h);
        let right = 1.0 / h2 + drift / (2.0 * r * h);
        if i == 0 {
            // u(0) = (4 u₁ - u₂) / 3
            diag[0] += 4.0 * left / 3.0;
            sup[0] -= left / 3.0;
        } else {
            sub[i] = left;
        }
        if i + 1 < n {
            sup[i] += right;
        }
        // the right neighbour of the last node is the clamped end u(r_max) = 0
    }
    Laplacian { sub, diag, sup }
}

/// Gram matrix of the `H²_rad` inner product and its factorization.
#[derive(Debug, Clone)]
pub struct SobolevStructure {
    laplacian: Laplacian,
    potential: Vec<f64>,
    weights: Vec<f64>,
    gram: BandedSym,
    factorization: BandedCholesky,
}

pub fn assemble_gram(
    grid: &RadialGrid,
    laplacian: Laplacian,
    weights: &QuadratureWeights,
    potential: Vec<f64>,
) -> Result<SobolevStructure> {
    let n = grid.n_nodes;
    if potential.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: potential.len(),
        });
    }
    if let Some((i, v)) = potential
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(Error::InvalidPotential(format!(
            "V must be positive; V(r_{}) = {v}",
            i + 1
        )));
    }
    let mut gram = BandedSym::zeros(n, 2);
    for i in 0..n {
        // row i of L touches columns i-1, i, i+1
        let mut cols: [(usize, f64); 3] = [(usize::MAX, 0.0); 3];
        let mut m = 0;
        if i > 0 {
            cols[m] = (i - 1, laplacian.sub[i]);
            m += 1;
        }
        cols[m] = (i, laplacian.diag[i]);
        m += 1;
        if i + 1 < n {
            cols[m] = (i + 1, laplacian.sup[i]);
            m += 1;
        }
        let w = weights[i];
        for a in 0..m {
            for b in 0..=a {
                let (ca, va) = cols[a];
                let (cb, vb) = cols[b];
                gram.add(ca, cb, w * va * vb);
            }
        }
        gram.add(i, i, w * potential[i]);
    }
    let factorization = gram.cholesky()?;
    Ok(SobolevStructure {
        laplacian,
        potential,
        weights: weights.to_vec(),
        gram,
        factorization,
    })
}

impl SobolevStructure {
    pub fn dim(&self) -> usize {
        self.potential.len()
    }
    pub fn laplacian(&self) -> &Laplacian {
        &self.laplacian
    }
    pub fn potential(&self) -> &[f64] {
        &self.potential
    }
    pub fn gram(&self) -> &BandedSym {
        &self.gram
    }
    pub fn factorization(&self) -> &BandedCholesky {
        &self.factorization
    }

    /// Evaluated as `Σ w (Lu)(Lv) + Σ w V u v` rather than `uᵀ G v`: the
    /// entries of `G` scale like `h⁻⁴` and cancel, which would bury small
    /// energy differences under rounding error on fine grids.
    pub(crate) fn inner_unchecked(&self, u: &[f64], v: &[f64]) -> f64 {
        let lu = self.laplacian.apply(u);
        let lv = self.laplacian.apply(v);
        let mut bi = 0.0;
        let mut pot = 0.0;
        for i in 0..u.len() {
            let w = self.weights[i];
            bi += w * lu[i] * lv[i];
            pot += w * self.potential[i] * u[i] * v[i];
        }
        bi + pot
    }

    pub(crate) fn norm_unchecked(&self, u: &[f64]) -> f64 {
        self.inner_unchecked(u, u).max(0.0).sqrt()
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check(u)?;
        self.check(v)?;
        Ok(self.inner_unchecked(u, v))
    }

    pub fn norm(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        Ok(self.norm_unchecked(u))
    }

    /// Riesz representative: solves `gram · x = rhs`.
    pub fn solve_gram(&self, rhs: &[f64]) -> Result<Field> {
        self.check(rhs)?;
        Ok(Field(self.factorization.solve(rhs)))
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: u.len(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub min: f64,
    pub max: f64,
    pub positive: bool,
}

impl PositivityReport {
    pub fn of(v: &[f64], tol_pos: f64) -> Self {
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            min,
            max,
            positive: max > 0.0 && min >= -tol_pos * max,
        }
    }

    /// `-min / max`, the size of the worst sign violation relative to the peak.
    pub fn relative_violation(&self) -> f64 {
        (-self.min / self.max).max(0.0)
    }
}

/// Discrete weak form of `Δ²v + V v = h`: solves `gram · v = W h` and reports
/// whether the solution is nonnegative up to `tol_pos · max v`.
pub fn solve_linear_positivity(
    structure: &SobolevStructure,
    weights: &QuadratureWeights,
    load: &[f64],
    tol_pos: f64,
) -> Result<(Field, PositivityReport)> {
    structure.check(load)?;
    if load.iter().any(|&h| !(h >= 0.0)) || load.iter().all(|&h| h == 0.0) {
        return Err(Error::ZeroLoad);
    }
    let rhs: Vec<f64> = load.iter().zip(weights.iter()).map(|(h, w)| h * w).collect();
    let v = structure.solve_gram(&rhs)?;
    let report = PositivityReport::of(&v, tol_pos);
    Ok((v, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(n: usize) -> (RadialGrid, QuadratureWeights, SobolevStructure) {
        let grid = build_grid(5, 20.0, n).unwrap();
        let w = assemble_quadrature(&grid);
        let lap = assemble_laplacian(&grid);
        let s = assemble_gram(&grid, lap, &w, vec![1.0; n]).unwrap();
        (grid, w, s)
    }

    #[test]
    fn grid_examples() {
        let g = build_grid(5, 20.0, 400).unwrap();
        assert_eq!(g.spacing(), 20.0 / 401.0);
        assert_eq!(g.critical_exponent(), 10.0);
        assert!((g.spacing() * 401.0 - 20.0).abs() < 1e-12);

        let g = build_grid(5, 1.0, 8).unwrap();
        for (i, r) in g.radii().iter().enumerate() {
            assert!((r - (i + 1) as f64 / 9.0).abs() < 1e-15);
        }
        assert!(g.radii().windows(2).all(|p| p[0] < p[1]));

        assert!(matches!(build_grid(4, 20.0, 400), Err(Error::InvalidGrid(_))));
        assert!(build_grid(5, 0.0, 400).is_err());
        assert!(build_grid(5, -1.0, 400).is_err());
        assert!(build_grid(5, 1.0, 2).is_err());
    }

    #[test]
    fn sphere_areas() {
        use std::f64::consts::PI;
        assert!((unit_sphere_area(2) - 2.0 * PI).abs() < 1e-12);
        assert!((unit_sphere_area(3) - 4.0 * PI).abs() < 1e-12);
        assert!((unit_sphere_area(5) - 8.0 * PI * PI / 3.0).abs() < 1e-12);
        assert!((unit_sphere_area(6) - PI.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn quadrature_volume() {
        let g = build_grid(5, 1.0, 200).unwrap();
        let w = assemble_quadrature(&g);
        let exact = g.sphere_area() / 5.0;
        assert!(((w.total() - exact) / exact).abs() < 1e-3);
        assert!(w.iter().all(|&x| x > 0.0));
        assert_eq!(w.integrate(&g.zeros()), 0.0);
    }

    #[test]
    fn laplacian_on_polynomials() {
        let g = build_grid(5, 2.0, 40).unwrap();
        let l = assemble_laplacian(&g);
        let quad = l.apply(&g.sample(|r| r * r));
        // r² is even, so the extrapolated first row is exact as well
        for v in &quad[..g.n_nodes() - 1] {
            assert!((v - 10.0).abs() < 1e-9, "{v}");
        }
        let ones = l.apply(&g.sample(|_| 1.0));
        for v in &ones[..g.n_nodes() - 1] {
            assert!(v.abs() < 1e-9);
        }
        let lin = l.apply(&g.sample(|r| r));
        for (i, v) in lin.iter().enumerate().take(g.n_nodes() - 1).skip(1) {
            // Δ r = (N-1)/r
            assert!((v - 4.0 / g.radii()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn gram_is_spd_and_symmetric() {
        let (grid, _, s) = reference(60);
        let u = grid.sample(|r| (r * 0.7).sin() * (-r / 5.0).exp());
        let v = grid.sample(|r| (1.0 + r).recip());
        assert!(s.inner(&u, &u).unwrap() > 0.0);
        let a = s.inner(&u, &v).unwrap();
        let b = s.inner(&v, &u).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        assert_eq!(s.inner(&grid.zeros(), &v).unwrap(), 0.0);
    }

    #[test]
    fn gram_rejects_bad_potential() {
        let grid = build_grid(5, 10.0, 20).unwrap();
        let w = assemble_quadrature(&grid);
        let mut v = vec![1.0; 20];
        v[3] = 0.0;
        assert!(matches!(
            assemble_gram(&grid, assemble_laplacian(&grid), &w, v),
            Err(Error::InvalidPotential(_))
        ));
        assert!(matches!(
            assemble_gram(&grid, assemble_laplacian(&grid), &w, vec![1.0; 19]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn norm_matches_quadrature_definition() {
        let (grid, w, s) = reference(80);
        let u = grid.sample(|r| (-r * r / 8.0).exp());
        let lu = s.laplacian().apply(&u);
        let direct: f64 = (0..grid.n_nodes())
            .map(|i| w[i] * (lu[i] * lu[i] + s.potential()[i] * u[i] * u[i]))
            .sum();
        let n2 = s.norm(&u).unwrap().powi(2);
        assert!((direct - n2).abs() <= 1e-11 * direct);
    }

    #[test]
    fn solve_gram_round_trip_and_zero() {
        let (grid, _, s) = reference(100);
        let y = grid.sample(|r| r.cos() * (-r / 3.0).exp());
        let x = s.solve_gram(&s.gram().matvec(&y)).unwrap();
        let d = x.minus(&y);
        assert!(s.norm(&d).unwrap() <= 1e-9 * s.norm(&y).unwrap());
        assert!(s.solve_gram(&grid.zeros()).unwrap().is_zero());
        assert!(matches!(
            s.solve_gram(&[1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_positivity_preconditions() {
        let (grid, w, s) = reference(50);
        assert!(matches!(
            solve_linear_positivity(&s, &w, &grid.zeros(), DEFAULT_TOL_POS),
            Err(Error::ZeroLoad)
        ));
        let mut neg = grid.sample(|_| 1.0);
        neg[4] = -1.0;
        assert!(solve_linear_positivity(&s, &w, &neg, DEFAULT_TOL_POS).is_err());
    }
}
