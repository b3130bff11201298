//! Nonlinearity `f(r, s) = Σ a_i(r) |s|^{p_i} s`, its primitive `F`, the energy
//! `I(u) = ½‖u‖² - ∫F(r, u)` and the operator `A` with `⟨A(u), v⟩ = ∫ f(r, u) v`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radial::{
    assemble_gram, assemble_laplacian, assemble_quadrature, build_grid, Field, QuadratureWeights,
    RadialGrid, SobolevStructure,
};
use crate::sampling;

/// Radial profile given as a constant or as piecewise-linear knots `(r, value)`
/// held constant outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RadialProfile {
    Constant(f64),
    Knots(Vec<(f64, f64)>),
}

impl RadialProfile {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            RadialProfile::Constant(c) => *c,
            RadialProfile::Knots(k) => {
                let first = k[0];
                let last = k[k.len() - 1];
                if r <= first.0 {
                    return first.1;
                }
                if r >= last.0 {
                    return last.1;
                }
                let j = k.partition_point(|(x, _)| *x <= r);
                let (x0, y0) = k[j - 1];
                let (x1, y1) = k[j];
                y0 + (y1 - y0) * (r - x0) / (x1 - x0)
            }
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            RadialProfile::Constant(c) if c.is_finite() => Ok(()),
            RadialProfile::Constant(c) => Err(format!("non-finite constant {c}")),
            RadialProfile::Knots(k) if k.is_empty() => Err("empty knot list".into()),
            RadialProfile::Knots(k) => {
                if k.iter().any(|(r, v)| !r.is_finite() || !v.is_finite() || *r < 0.0) {
                    return Err("knots must be finite with r >= 0".into());
                }
                if k.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err("knot radii must be strictly increasing".into());
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub profile: RadialProfile,
    /// `V₀ = inf V > 0`.
    pub floor: f64,
}

impl PotentialSpec {
    pub fn constant(v0: f64) -> Self {
        Self {
            profile: RadialProfile::Constant(v0),
            floor: v0,
        }
    }

    pub fn tabulate(&self, grid: &RadialGrid) -> Result<Vec<f64>> {
        self.profile.validate().map_err(Error::InvalidPotential)?;
        if !(self.floor > 0.0) {
            return Err(Error::InvalidPotential(format!(
                "floor V0 must be positive, got {}",
                self.floor
            )));
        }
        let v: Vec<f64> = grid.radii().iter().map(|&r| self.profile.eval(r)).collect();
        if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| **x < self.floor) {
            return Err(Error::InvalidPotential(format!(
                "V(r_{}) = {x} below floor {}",
                i + 1,
                self.floor
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub coef: RadialProfile,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTerm {
    pub coef: Field,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearityModel {
    terms: Vec<PowerTerm>,
}

impl NonlinearityModel {
    /// Tabulates the coefficient profiles and checks `0 < p < 2_* - 2` and `a ≥ 0, a ≢ 0`.
    pub fn new(grid: &RadialGrid, specs: &[TermSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidModel("at least one term is required".into()));
        }
        let bound = grid.critical_exponent() - 2.0;
        let mut terms = Vec::with_capacity(specs.len());
        for (k, spec) in specs.iter().enumerate() {
            let p = spec.exponent;
            if !(p > 0.0 && p < bound) {
                return Err(Error::InvalidModel(format!(
                    "term {}: exponent {p} outside (0, 2_* - 2) = (0, {bound})",
                    k + 1
                )));
            }
            spec.coef
                .validate()
                .map_err(|e| Error::InvalidModel(format!("term {}: {e}", k + 1)))?;
            let coef = grid.sample(|r| spec.coef.eval(r));
            if coef.iter().any(|&a| a < 0.0) {
                return Err(Error::InvalidModel(format!(
                    "term {}: coefficient must be nonnegative",
                    k + 1
                )));
            }
            if coef.iter().all(|&a| a == 0.0) {
                return Err(Error::InvalidModel(format!(
                    "term {}: coefficient vanishes on the grid",
                    k + 1
                )));
            }
            terms.push(PowerTerm { coef, exponent: p });
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[PowerTerm] {
        &self.terms
    }

    pub fn max_exponent(&self) -> f64 {
        self.terms.iter().map(|t| t.exponent).fold(0.0, f64::max)
    }

    #[inline]
    pub fn f_eval(&self, s: f64, node: usize) -> f64 {
        let a = s.abs();
        self.terms
            .iter()
            .map(|t| t.coef[node] * a.powf(t.exponent) * s)
            .sum()
    }

    #[inline]
    pub fn big_f_eval(&self, s: f64, node: usize) -> f64 {
        let a = s.abs();
        self.terms
            .iter()
            .map(|t| t.coef[node] * a.powf(t.exponent + 2.0) / (t.exponent + 2.0))
            .sum()
    }

    /// `∂f/∂s = Σ a_i (p_i + 1) |s|^{p_i}`.
    #[inline]
    pub fn f_prime(&self, s: f64, node: usize) -> f64 {
        let a = s.abs();
        self.terms
            .iter()
            .map(|t| t.coef[node] * (t.exponent + 1.0) * a.powf(t.exponent))
            .sum()
    }
}

/// Everything needed to evaluate the energy and its gradient on one grid.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: RadialGrid,
    pub weights: QuadratureWeights,
    pub structure: SobolevStructure,
    pub model: NonlinearityModel,
}

impl Problem {
    pub fn new(
        dim_n: usize,
        r_max: f64,
        n_nodes: usize,
        potential: &PotentialSpec,
        terms: &[TermSpec],
    ) -> Result<Self> {
        let grid = build_grid(dim_n, r_max, n_nodes)?;
        let weights = assemble_quadrature(&grid);
        let laplacian = assemble_laplacian(&grid);
        let v = potential.tabulate(&grid)?;
        let structure = assemble_gram(&grid, laplacian, &weights, v)?;
        let model = NonlinearityModel::new(&grid, terms)?;
        Ok(Self {
            grid,
            weights,
            structure,
            model,
        })
    }

    pub fn n(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.structure.norm_unchecked(u)
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.structure.inner_unchecked(u, v)
    }

    /// Nodal values `f(r_j, u_j)`.
    pub fn f_field(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &s)| self.model.f_eval(s, j))
            .collect()
    }

    /// Weak load `W f(u)`.
    pub fn weak_load(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.weights.iter())
            .enumerate()
            .map(|(j, (&s, w))| w * self.model.f_eval(s, j))
            .collect()
    }

    pub(crate) fn energy_value(&self, u: &[f64]) -> f64 {
        let quad = 0.5 * self.structure.inner_unchecked(u, u);
        let pot: f64 = u
            .iter()
            .zip(self.weights.iter())
            .enumerate()
            .map(|(j, (&s, w))| w * self.model.big_f_eval(s, j))
            .sum();
        quad - pot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub quadratic: f64,
    pub potential_term: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub fn energy(problem: &Problem, u: &[f64]) -> Result<EnergyReport> {
    problem.structure.norm(u)?;
    let quadratic = 0.5 * problem.inner(u, u);
    let potential_term: f64 = u
        .iter()
        .zip(problem.weights.iter())
        .enumerate()
        .map(|(j, (&s, w))| w * problem.model.big_f_eval(s, j))
        .sum();
    let grad = gradient(problem, u)?;
    let report = EnergyReport {
        quadratic,
        potential_term,
        total: quadratic - potential_term,
        grad_norm: problem.norm(&grad),
    };
    if report.total.is_finite() && report.grad_norm.is_finite() {
        Ok(report)
    } else {
        Err(Error::NonFinite("energy"))
    }
}

/// `A(u) = gram⁻¹ W f(u)`.
pub fn apply_a(problem: &Problem, u: &[f64]) -> Result<Field> {
    problem.structure.solve_gram(&problem.weak_load(u))
}

/// `∇I(u) = u - A(u)`; the descent flow moves along its negative.
pub fn gradient(problem: &Problem, u: &[f64]) -> Result<Field> {
    let a = apply_a(problem, u)?;
    Ok(Field(u.iter().zip(a.iter()).map(|(x, y)| x - y).collect()))
}

/// Empirical constants for `|⟨A(u), v⟩| ≤ (ε‖u‖ + C‖u‖^{p+1}) ‖v‖`, with `p`
/// the largest exponent of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthBound {
    pub epsilon: f64,
    pub constant: f64,
    pub exponent: f64,
    pub samples: usize,
}

impl GrowthBound {
    pub fn rhs(&self, u_norm: f64, v_norm: f64) -> f64 {
        (self.epsilon * u_norm + self.constant * u_norm.powf(self.exponent + 1.0)) * v_norm
    }

    pub fn holds(&self, problem: &Problem, u: &[f64], v: &[f64]) -> bool {
        let lhs = problem.weights.integrate(
            &problem
                .f_field(u)
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .collect::<Vec<_>>(),
        );
        lhs.abs() <= self.rhs(problem.norm(u), problem.norm(v))
    }
}

const GROWTH_EPSILON: f64 = 0.5;
const GROWTH_MARGIN: f64 = 2.0;

/// Random pair `(u, v)` with `u` scaled over several decades.
pub fn growth_sample<R: Rng>(problem: &Problem, rng: &mut R) -> (Field, Field) {
    let mut u = sampling::smooth_field(&problem.grid, rng);
    let scale = 10f64.powf(rng.gen_range(-2.0..2.0)) / problem.norm(&u).max(f64::MIN_POSITIVE);
    for x in u.iter_mut() {
        *x *= scale;
    }
    let v = sampling::smooth_field(&problem.grid, rng);
    (u, v)
}

/// Fits `C` (at fixed `ε = 0.5`) so that the growth bound holds on `samples`
/// random pairs, then inflates it by a safety margin of 2.
pub fn growth_bound_check<R: Rng>(problem: &Problem, samples: usize, rng: &mut R) -> GrowthBound {
    let p = problem.model.max_exponent();
    let mut worst: f64 = 0.0;
    for _ in 0..samples.max(1) {
        let (u, v) = growth_sample(problem, rng);
        let un = problem.norm(&u);
        let vn = problem.norm(&v);
        if un == 0.0 || vn == 0.0 {
            continue;
        }
        let lhs: f64 = problem
            .f_field(&u)
            .iter()
            .zip(v.iter())
            .zip(problem.weights.iter())
            .map(|((a, b), w)| w * a * b)
            .sum();
        let excess = (lhs.abs() / vn - GROWTH_EPSILON * un).max(0.0);
        worst = worst.max(excess / un.powf(p + 1.0));
    }
    GrowthBound {
        epsilon: GROWTH_EPSILON,
        constant: GROWTH_MARGIN * worst,
        exponent: p,
        samples,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn cubic(n: usize) -> Problem {
        Problem::new(
            5,
            20.0,
            n,
            &PotentialSpec::constant(1.0),
            &[TermSpec {
                coef: RadialProfile::Constant(1.0),
                exponent: 2.0,
            }],
        )
        .unwrap()
    }

    #[test]
    fn f_examples() {
        let p = cubic(20);
        assert_eq!(p.model.f_eval(0.0, 3), 0.0);
        assert_eq!(p.model.big_f_eval(0.0, 3), 0.0);
        assert_eq!(p.model.f_eval(2.0, 3), 8.0);
        assert_eq!(p.model.big_f_eval(2.0, 3), 4.0);
        assert_eq!(p.model.f_eval(-2.0, 3), -8.0);
        assert_eq!(p.model.big_f_eval(-2.0, 3), 4.0);
    }

    #[test]
    fn primitive_matches_quadrature() {
        let grid = build_grid(5, 4.0, 10).unwrap();
        let m = NonlinearityModel::new(
            &grid,
            &[
                TermSpec {
                    coef: RadialProfile::Constant(0.7),
                    exponent: 0.5,
                },
                TermSpec {
                    coef: RadialProfile::Knots(vec![(0.0, 2.0), (4.0, 0.5)]),
                    exponent: 3.0,
                },
            ],
        )
        .unwrap();
        // composite Simpson on 2000 panels
        for node in [0, 4, 9] {
            for s in [-2.5, -0.3, 0.8, 3.0] {
                let k = 2000;
                let h = s / k as f64;
                let mut acc = m.f_eval(0.0, node) + m.f_eval(s, node);
                for i in 1..k {
                    let c = if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += c * m.f_eval(i as f64 * h, node);
                }
                let quad = acc * h / 3.0;
                let exact = m.big_f_eval(s, node);
                assert!((quad - exact).abs() < 1e-8 * exact.max(1.0), "{quad} vs {exact}");
            }
        }
    }

    #[test]
    fn model_validation() {
        let grid = build_grid(5, 20.0, 40).unwrap();
        let bad = |p: f64| {
            NonlinearityModel::new(
                &grid,
                &[TermSpec {
                    coef: RadialProfile::Constant(1.0),
                    exponent: p,
                }],
            )
        };
        assert!(bad(8.0).is_err());
        assert!(bad(9.0).is_err());
        assert!(bad(0.0).is_err());
        assert!(bad(7.9).is_ok());
        assert!(NonlinearityModel::new(
            &grid,
            &[TermSpec {
                coef: RadialProfile::Constant(0.0),
                exponent: 2.0
            }]
        )
        .is_err());
        assert!(NonlinearityModel::new(&grid, &[]).is_err());
    }

    #[test]
    fn profile_interpolation() {
        let p = RadialProfile::Knots(vec![(1.0, 2.0), (3.0, 4.0)]);
        assert_eq!(p.eval(0.0), 2.0);
        assert_eq!(p.eval(2.0), 3.0);
        assert_eq!(p.eval(10.0), 4.0);
        assert!(RadialProfile::Knots(vec![(1.0, 2.0), (1.0, 3.0)]).validate().is_err());
    }

    #[test]
    fn zero_is_fixed() {
        let p = cubic(50);
        let z = p.grid.zeros();
        assert!(apply_a(&p, &z).unwrap().is_zero());
        assert!(gradient(&p, &z).unwrap().is_zero());
        let e = energy(&p, &z).unwrap();
        assert_eq!(e.total, 0.0);
        assert_eq!(e.grad_norm, 0.0);
    }

    #[test]
    fn energy_report_is_consistent() {
        let p = cubic(60);
        let u = p.grid.sample(|r| 2.0 * (-r * r / 10.0).exp());
        let e = energy(&p, &u).unwrap();
        assert_eq!(e.total, e.quadratic - e.potential_term);
        assert_eq!(e.total, p.energy_value(&u));
    }

    #[test]
    fn energy_goes_to_minus_infinity_along_a_ray() {
        let p = cubic(100);
        let u0 = p.grid.sample(|r| (1.0 - (r / 5.0).powi(2)).max(0.0).powi(4));
        let mut prev = f64::INFINITY;
        let mut went_negative = false;
        let mut t = 1.0;
        for _ in 0..30 {
            let e = p.energy_value(&u0.scaled(t));
            if went_negative {
                assert!(e < prev);
            }
            went_negative |= e < 0.0;
            prev = e;
            t *= 1.5;
        }
        assert!(went_negative && prev < -1e6);
    }

    #[test]
    fn energy_positive_on_small_ball() {
        let p = cubic(80);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let u = sampling::smooth_field(&p.grid, &mut rng);
            let u = u.scaled(1e-2 / p.norm(&u));
            let e = p.energy_value(&u);
            assert!(e > 0.24 * p.norm(&u).powi(2), "{e}");
        }
    }

    #[test]
    fn growth_bound_bilinear_in_v() {
        let p = cubic(100);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bound = growth_bound_check(&p, 50, &mut rng);
        let (u, v) = growth_sample(&p, &mut rng);
        let lhs = |v: &[f64]| -> f64 {
            let f = p.f_field(&u);
            p.weights
                .integrate(&f.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>())
        };
        let v2 = v.scaled(2.0);
        assert!((lhs(&v2) - 2.0 * lhs(&v)).abs() <= 1e-12 * lhs(&v).abs().max(1e-300));
        let r1 = bound.rhs(p.norm(&u), p.norm(&v));
        let r2 = bound.rhs(p.norm(&u), p.norm(&v2));
        assert!((r2 - 2.0 * r1).abs() <= 1e-12 * r1);
        assert_eq!(lhs(&p.grid.zeros()), 0.0);
        assert_eq!(bound.rhs(1.0, 0.0), 0.0);
    }
}
