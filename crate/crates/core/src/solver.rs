//! Construction of the three critical points: a positive and a negative
//! one by bisecting rays to the boundary of the basin of 0, and a
//! sign-changing one by a second bisection across a path joining the two
//! cones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    absorption_label, classify, fixed_point_residual, integrate, polish_critical, AbsorptionLabel,
    FlowConfig, OutcomeTag, TrajectoryRecord,
};
use crate::model::{energy, Problem};
use crate::radial::{Field, RadialGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Width of the final scale bracket on a ray, relative to `s_high`.
    pub tol_s: f64,
    /// Same for the scale brackets of the nodal search; the near-threshold
    /// trajectory must shadow a saddle of higher index, which needs a
    /// bracket near machine precision.
    pub tol_s_nodal: f64,
    /// Width at which the bisection over the path parameter gives up.
    pub tol_t: f64,
    /// Required `‖u - A(u)‖ / ‖u‖` of delivered solutions.
    pub tol_residual: f64,
    /// Target of the Newton refinement.
    pub tol_newton: f64,
    pub newton_max_iter: usize,
    /// Sign threshold for the nodal census, relative to `‖u‖_∞`.
    pub delta_sign: f64,
    /// Allowed wrong-sign excursion of signed solutions, relative to `‖u‖_∞`.
    pub tol_sign: f64,
    /// Positivity tolerance of linear solves in the monitors.
    pub tol_pos: f64,
    /// Number of equispaced probes of the path parameter, endpoints included.
    pub probes: usize,
    /// Path samples used to certify negative energy on the far edge.
    pub path_samples: usize,
    /// Near-threshold states tried as Newton seeds per probe.
    pub candidates: usize,
    /// Doublings allowed while searching for negative energy on a ray.
    pub max_doublings: usize,
    /// Sampling stride of monitored near-threshold trajectories.
    pub monitor_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_s: 1e-10,
            tol_s_nodal: 1e-15,
            tol_t: 1e-14,
            tol_residual: 1e-6,
            tol_newton: 1e-11,
            newton_max_iter: 50,
            delta_sign: 1e-3,
            tol_sign: 1e-8,
            tol_pos: 1e-8,
            probes: 9,
            path_samples: 201,
            candidates: 4,
            max_doublings: 60,
            monitor_stride: 1,
        }
    }
}

impl SolverConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("tol_s", self.tol_s),
            ("tol_s_nodal", self.tol_s_nodal),
            ("tol_t", self.tol_t),
            ("tol_residual", self.tol_residual),
            ("tol_newton", self.tol_newton),
            ("delta_sign", self.delta_sign),
            ("tol_sign", self.tol_sign),
            ("tol_pos", self.tol_pos),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value < 1.0) {
                v.push(format!("solver: {name} must lie in (0, 1), got {value}"));
            }
        }
        if self.probes < 2 {
            v.push(format!("solver: probes must be at least 2, got {}", self.probes));
        }
        if self.path_samples < 2 {
            v.push(format!(
                "solver: path_samples must be at least 2, got {}",
                self.path_samples
            ));
        }
        for (name, value) in [
            ("newton_max_iter", self.newton_max_iter),
            ("candidates", self.candidates),
            ("max_doublings", self.max_doublings),
            ("monitor_stride", self.monitor_stride),
        ] {
            if value == 0 {
                v.push(format!("solver: {name} must be at least 1"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Default element of `K`: `(1 - (r/R₀)²)₊⁴` with `R₀ = r_max / 4`.
pub fn positive_bump(grid: &RadialGrid) -> Field {
    let r0 = grid.r_max() / 4.0;
    grid.sample(|r| (1.0 - (r / r0).powi(2)).max(0.0).powi(4))
}

/// Default element of `-K`, centred away from the origin so that it is
/// linearly independent of [`positive_bump`].
pub fn negative_bump(grid: &RadialGrid) -> Field {
    let centre = 0.3 * grid.r_max();
    let width = 0.15 * grid.r_max();
    grid.sample(|r| -(1.0 - ((r - centre) / width).powi(2)).max(0.0).powi(4))
}

/// Side of a threshold reported by a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Low,
    High,
    /// The probe landed on the threshold itself.
    Hit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub low: f64,
    pub high: f64,
    pub iterations: usize,
    /// Set when the classifier reported [`Side::Hit`] at this scale.
    pub hit: Option<f64>,
}

/// Bisects `[low, high]` (classified `Low` and `High` respectively) until
/// the width is at most `tol` or the midpoint is no longer representable.
pub fn bisect_threshold<F>(low: f64, high: f64, tol: f64, mut classify: F) -> Result<Bracket>
where
    F: FnMut(f64) -> Result<Side>,
{
    let mut bracket = Bracket {
        low,
        high,
        iterations: 0,
        hit: None,
    };
    while bracket.high - bracket.low > tol {
        let mid = 0.5 * (bracket.low + bracket.high);
        if mid <= bracket.low || mid >= bracket.high {
            break;
        }
        bracket.iterations += 1;
        match classify(mid)? {
            Side::Low => bracket.low = mid,
            Side::High => bracket.high = mid,
            Side::Hit => {
                bracket.hit = Some(mid);
                break;
            }
        }
    }
    Ok(bracket)
}

/// A ray `s ↦ s·direction` with a certified bracket of the basin boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySpec {
    pub direction: Field,
    pub s_low: f64,
    pub s_high: f64,
    pub tol_s: f64,
}

fn side_of(problem: &Problem, u: &[f64], flow: &FlowConfig, scale: f64) -> Result<Side> {
    match classify(problem, u, flow)?.tag {
        OutcomeTag::ConvergedZero => Ok(Side::Low),
        OutcomeTag::EscapedNegativeEnergy => Ok(Side::High),
        OutcomeTag::ConvergedCritical => Ok(Side::Hit),
        OutcomeTag::Undetermined => Err(Error::Undetermined {
            low: scale,
            high: scale,
        }),
    }
}

/// Finds `s_high` by doubling until the energy is below `escape_energy`
/// and `s_low` by halving until the flow decays to zero.
pub fn bracket_ray(
    problem: &Problem,
    direction: &[f64],
    solver: &SolverConfig,
    flow: &FlowConfig,
) -> Result<RaySpec> {
    problem.structure.norm(direction)?;
    if problem.norm(direction) == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let d = Field(direction.to_vec());
    let mut energies = Vec::new();
    let mut s_high = 1.0;
    loop {
        let e = problem.energy_value(&d.scaled(s_high));
        energies.push((s_high, e));
        if e < flow.escape_energy {
            break;
        }
        if energies.len() > solver.max_doublings {
            return Err(Error::BracketFailure { energies });
        }
        s_high *= 2.0;
    }
    if side_of(problem, &d.scaled(s_high), flow, s_high)? != Side::High {
        return Err(Error::BracketBroken {
            scale: s_high,
            detail: "negative energy did not classify as escaped".into(),
        });
    }
    let mut s_low = 0.5 * s_high;
    let mut halvings = 0;
    loop {
        match side_of(problem, &d.scaled(s_low), flow, s_low) {
            Ok(Side::Low) => break,
            Ok(Side::High) => s_high = s_low,
            Ok(Side::Hit) | Err(Error::Undetermined { .. }) => {}
            Err(e) => return Err(e),
        }
        halvings += 1;
        if halvings > solver.max_doublings {
            return Err(Error::BracketBroken {
                scale: s_low,
                detail: "no scale on the ray decays to zero".into(),
            });
        }
        s_low *= 0.5;
    }
    Ok(RaySpec {
        direction: d,
        s_low,
        s_high,
        tol_s: solver.tol_s,
    })
}

/// How a delivered solution was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub s_low: f64,
    pub s_high: f64,
    pub scale_iterations: usize,
    /// Path parameter of the nodal construction.
    pub t: Option<f64>,
    pub t_iterations: usize,
    pub label: Option<AbsorptionLabel>,
    /// Step index of the trajectory state used as Newton seed.
    pub seed_step: usize,
    /// `‖u - A(u)‖ / ‖u‖` at the seed.
    pub seed_residual: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCensus {
    pub min: f64,
    pub max: f64,
    pub max_abs: f64,
    /// Nodes above `threshold·‖u‖_∞`.
    pub positive_nodes: usize,
    /// Nodes below `-threshold·‖u‖_∞`.
    pub negative_nodes: usize,
    /// Sign alternations among nodes beyond the threshold, in node order.
    pub sign_changes: usize,
    pub threshold: f64,
}

impl SignCensus {
    pub fn of(u: &[f64], threshold: f64) -> Self {
        let max_abs = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let cut = threshold * max_abs;
        let mut positive_nodes = 0;
        let mut negative_nodes = 0;
        let mut sign_changes = 0;
        let mut last = 0i8;
        for &x in u {
            let s = if x > cut {
                positive_nodes += 1;
                1
            } else if x < -cut {
                negative_nodes += 1;
                -1
            } else {
                continue;
            };
            if last != 0 && s != last {
                sign_changes += 1;
            }
            last = s;
        }
        Self {
            min: u.iter().copied().fold(f64::INFINITY, f64::min),
            max: u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            max_abs,
            positive_nodes,
            negative_nodes,
            sign_changes,
            threshold,
        }
    }

    pub fn is_nodal(&self) -> bool {
        self.positive_nodes > 0 && self.negative_nodes > 0
    }

    /// `min ≥ -tol·‖u‖_∞`.
    pub fn nonnegative(&self, tol: f64) -> bool {
        self.min >= -tol * self.max_abs
    }

    /// `max ≤ tol·‖u‖_∞`.
    pub fn nonpositive(&self, tol: f64) -> bool {
        self.max <= tol * self.max_abs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub norm: f64,
    pub energy: f64,
    /// `‖u - A(u)‖ / ‖u‖`.
    pub fixed_point_residual: f64,
    /// Dual norm of `G u - W f(u)`, relative to `‖u‖`.
    pub weak_residual: f64,
    /// Max-norm of the nodal strong residual `L(Lu) + Vu - f(u)` on nodes
    /// with `r ≥ r_max / 10` short of the last two, relative to the
    /// max-norm of `f(u)`. Applying the ghost closure twice is inconsistent
    /// near the origin, so this is a diagnostic only.
    pub strong_residual: f64,
    /// Census at `delta_sign`.
    pub census: SignCensus,
    /// Relative energy change against a solution on a finer grid.
    pub refinement_delta: Option<f64>,
}

/// Independent residual, energy and sign checks of a candidate solution.
pub fn verify_solution(
    problem: &Problem,
    u: &[f64],
    delta_sign: f64,
    finer: Option<(&Problem, &[f64])>,
) -> Result<VerificationReport> {
    let norm = problem.structure.norm(u)?;
    if norm == 0.0 {
        return Err(Error::Certification("the zero field is not a solution".into()));
    }
    let e = energy(problem, u)?;
    let gram = problem.structure.gram();
    let r: Vec<f64> = gram
        .matvec(u)
        .iter()
        .zip(problem.weak_load(u))
        .map(|(a, b)| a - b)
        .collect();
    let riesz = problem.structure.factorization().solve(&r);
    let weak = r.iter().zip(&riesz).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt();

    let lap = problem.structure.laplacian();
    let bilap = lap.apply(&lap.apply(u));
    let f = problem.f_field(u);
    let v = problem.structure.potential();
    let n = u.len();
    let f_scale = f.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let first = problem
        .grid
        .radii()
        .iter()
        .position(|&r| r >= 0.1 * problem.grid.r_max())
        .unwrap_or(n);
    let strong = (first..n.saturating_sub(2))
        .map(|i| (bilap[i] + v[i] * u[i] - f[i]).abs())
        .fold(0.0f64, f64::max)
        / f_scale;

    let refinement_delta = match finer {
        Some((fine, uf)) => {
            let ef = energy(fine, uf)?.total;
            Some((ef - e.total).abs() / e.total.abs().max(ef.abs()))
        }
        None => None,
    };
    Ok(VerificationReport {
        norm,
        energy: e.total,
        fixed_point_residual: fixed_point_residual(problem, u)?,
        weak_residual: weak / norm,
        strong_residual: strong,
        census: SignCensus::of(u, delta_sign),
        refinement_delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub field: Field,
    pub report: VerificationReport,
    pub provenance: Provenance,
    /// Monitored near-threshold trajectory that seeded the refinement.
    pub trajectory: TrajectoryRecord,
}

fn polish_seed(
    problem: &Problem,
    record: &TrajectoryRecord,
    index: usize,
    solver: &SolverConfig,
) -> Result<Option<(Field, Provenance)>> {
    let polished = polish_critical(
        problem,
        &record.states[index],
        solver.tol_newton,
        solver.newton_max_iter,
    )?;
    if polished.residual > solver.tol_residual || problem.norm(&polished.field) == 0.0 {
        return Ok(None);
    }
    Ok(Some((
        polished.field,
        Provenance {
            s_low: 0.0,
            s_high: 0.0,
            scale_iterations: 0,
            t: None,
            t_iterations: 0,
            label: None,
            seed_step: record.steps[index],
            seed_residual: record.relative_grad(index),
            newton_iterations: polished.iterations,
        },
    )))
}

/// Bisects the ray to the basin boundary, flows from the last decaying
/// scale and refines its most stationary state with Newton.
pub fn bisect_boundary(
    problem: &Problem,
    ray: &RaySpec,
    solver: &SolverConfig,
    flow: &FlowConfig,
) -> Result<(f64, Solution)> {
    let bracket = bisect_threshold(ray.s_low, ray.s_high, ray.tol_s * ray.s_high, |s| {
        side_of(problem, &ray.direction.scaled(s), flow, s).map_err(|e| match e {
            Error::Undetermined { .. } => Error::Undetermined {
                low: ray.s_low,
                high: ray.s_high,
            },
            e => e,
        })
    })?;
    let s_star = bracket.hit.unwrap_or(bracket.low);
    let monitored = FlowConfig {
        monitor_cones: true,
        sample_stride: solver.monitor_stride,
        ..flow.clone()
    };
    let (_, record) = integrate(problem, &ray.direction.scaled(s_star), &monitored)?;
    let index = record
        .most_stationary(flow.tol_zero, |_| true)
        .ok_or_else(|| Error::Certification("near-threshold trajectory never left 0".into()))?;
    let (field, mut provenance) = polish_seed(problem, &record, index, solver)?.ok_or_else(|| {
        Error::Certification(format!(
            "Newton refinement from the near-threshold state (relative gradient {:e}) \
             did not reach residual {:e}",
            record.relative_grad(index),
            solver.tol_residual
        ))
    })?;
    provenance.s_low = bracket.low;
    provenance.s_high = bracket.high;
    provenance.scale_iterations = bracket.iterations;
    let report = verify_solution(problem, &field, solver.delta_sign, None)?;
    Ok((
        s_star,
        Solution {
            field,
            report,
            provenance,
            trajectory: record,
        },
    ))
}

/// Critical point reached through the ray spanned by `direction`.
pub fn solve_on_ray(
    problem: &Problem,
    direction: &[f64],
    solver: &SolverConfig,
    flow: &FlowConfig,
) -> Result<Solution> {
    let ray = bracket_ray(problem, direction, solver, flow)?;
    bisect_boundary(problem, &ray, solver, flow).map(|(_, s)| s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignedSolutions {
    pub positive: Solution,
    pub negative: Solution,
}

/// Solutions on the rays through `bump` and `-bump`.
pub fn find_signed_solutions(
    problem: &Problem,
    bump: &[f64],
    solver: &SolverConfig,
    flow: &FlowConfig,
) -> Result<SignedSolutions> {
    solver.validate()?;
    let mirrored = Field(bump.to_vec()).neg();
    let (positive, negative) = rayon::join(
        || solve_on_ray(problem, bump, solver, flow),
        || solve_on_ray(problem, &mirrored, solver, flow),
    );
    Ok(SignedSolutions {
        positive: positive?,
        negative: negative?,
    })
}

/// Result of one probe of a parameter bisection.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchProbe<T> {
    pub label: AbsorptionLabel,
    pub accepted: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Switch<T> {
    pub low: f64,
    pub high: f64,
    pub iterations: usize,
    pub found: Option<(f64, T)>,
    /// Every probed parameter with its label, in probe order.
    pub labels: Vec<(f64, AbsorptionLabel)>,
}

/// Bisects between a `Minus`-labelled `low` and a `Plus`-labelled `high`
/// until a probe is accepted, a probe labels `Neither`, or the width
/// drops to `tol`.
pub fn bisect_switch<T, F>(low: f64, high: f64, tol: f64, mut probe: F) -> Result<Switch<T>>
where
    F: FnMut(f64) -> Result<SwitchProbe<T>>,
{
    let mut sw = Switch {
        low,
        high,
        iterations: 0,
        found: None,
        labels: Vec::new(),
    };
    while sw.high - sw.low > tol {
        let mid = 0.5 * (sw.low + sw.high);
        if mid <= sw.low || mid >= sw.high {
            break;
        }
        sw.iterations += 1;
        let p = probe(mid)?;
        sw.labels.push((mid, p.label));
        if let Some(found) = p.accepted {
            sw.found = Some((mid, found));
            break;
        }
        match p.label {
            AbsorptionLabel::Minus => sw.low = mid,
            AbsorptionLabel::Plus => sw.high = mid,
            AbsorptionLabel::Neither => break,
        }
    }
    Ok(sw)
}

/// Outcome of probing one point `t` of the path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProbe {
    pub t: f64,
    pub bracket: Bracket,
    pub label: AbsorptionLabel,
    pub record: TrajectoryRecord,
    pub nodal: Option<(Field, Provenance)>,
}

struct NodalPath<'a> {
    problem: &'a Problem,
    u_plus: &'a Field,
    v_minus: &'a Field,
    known: &'a [&'a Field],
    s_square: f64,
    solver: &'a SolverConfig,
    flow: &'a FlowConfig,
}

impl NodalPath<'_> {
    fn point(&self, t: f64) -> Field {
        Field(
            self.u_plus
                .iter()
                .zip(self.v_minus.iter())
                .map(|(u, v)| t * u + (1.0 - t) * v)
                .collect(),
        )
    }

    fn distinct(&self, u: &[f64]) -> bool {
        self.known.iter().all(|k| {
            let d = problem_distance(self.problem, u, k);
            let scale = self.problem.norm(u).max(self.problem.norm(k));
            d > 10.0 * self.solver.tol_residual * scale
        })
    }

    fn probe(&self, t: f64) -> Result<PathProbe> {
        let h = self.point(t);
        let bracket = bisect_threshold(0.0, self.s_square, self.solver.tol_s_nodal * self.s_square, |s| {
            side_of(self.problem, &h.scaled(s), self.flow, s).map_err(|e| match e {
                Error::Undetermined { .. } => Error::Undetermined {
                    low: 0.0,
                    high: self.s_square,
                },
                e => e,
            })
        })?;
        let s = bracket.hit.unwrap_or(bracket.low);
        let cfg = FlowConfig {
            monitor_cones: true,
            sample_stride: self.solver.monitor_stride,
            ..self.flow.clone()
        };
        let (_, record) = integrate(self.problem, &h.scaled(s), &cfg)?;
        let label = absorption_label(&record, record.alpha);

        let mut seeds: Vec<usize> = (0..record.len())
            .filter(|&i| {
                record.norms[i] > self.flow.tol_zero
                    && SignCensus::of(&record.states[i], self.solver.delta_sign).is_nodal()
            })
            .collect();
        seeds.sort_by(|&a, &b| record.relative_grad(a).total_cmp(&record.relative_grad(b)));
        let mut nodal = None;
        for &i in seeds.iter().take(self.solver.candidates) {
            if let Some((field, mut prov)) = polish_seed(self.problem, &record, i, self.solver)? {
                let census = SignCensus::of(&field, self.solver.delta_sign);
                if census.is_nodal()
                    && self.problem.energy_value(&field) > 0.0
                    && self.distinct(&field)
                {
                    prov.s_low = bracket.low;
                    prov.s_high = bracket.high;
                    prov.scale_iterations = bracket.iterations;
                    prov.t = Some(t);
                    prov.label = Some(label);
                    nodal = Some((field, prov));
                    break;
                }
            }
        }
        Ok(PathProbe {
            t,
            bracket,
            label,
            record,
            nodal,
        })
    }
}

fn problem_distance(problem: &Problem, u: &[f64], v: &[f64]) -> f64 {
    let d: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    problem.norm(&d)
}

/// Sign-changing critical point on the square spanned by `u_plus ∈ K` and
/// `v_minus ∈ -K`, distinct from every field in `known`.
pub fn find_nodal(
    problem: &Problem,
    u_plus: &[f64],
    v_minus: &[f64],
    known: &[&Field],
    solver: &SolverConfig,
    flow: &FlowConfig,
) -> Result<Solution> {
    solver.validate()?;
    flow.validate()?;
    let nu = problem.structure.norm(u_plus)?;
    let nv = problem.structure.norm(v_minus)?;
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let cos = problem.inner(u_plus, v_minus) / (nu * nv);
    if cos.abs() > 1.0 - 1e-8 {
        return Err(Error::NodalSearch(format!(
            "path endpoints are linearly dependent (cosine {cos})"
        )));
    }
    let u_plus = Field(u_plus.to_vec());
    let v_minus = Field(v_minus.to_vec());
    let mut path = NodalPath {
        problem,
        u_plus: &u_plus,
        v_minus: &v_minus,
        known,
        s_square: 1.0,
        solver,
        flow,
    };

    let ts: Vec<f64> = (0..solver.path_samples)
        .map(|k| k as f64 / (solver.path_samples - 1) as f64)
        .collect();
    let mut doublings = 0;
    loop {
        let worst = ts
            .iter()
            .map(|&t| problem.energy_value(&path.point(t).scaled(path.s_square)))
            .fold(f64::NEG_INFINITY, f64::max);
        if worst < flow.escape_energy {
            break;
        }
        doublings += 1;
        if doublings > solver.max_doublings {
            return Err(Error::NodalSearch(format!(
                "energy stays at or above {worst:e} somewhere on the far edge of the square"
            )));
        }
        path.s_square *= 2.0;
    }

    let grid: Vec<f64> = (0..solver.probes)
        .map(|k| k as f64 / (solver.probes - 1) as f64)
        .collect();
    let path_ref = &path;
    let probes: Vec<PathProbe> = grid
        .par_iter()
        .map(|&t| path_ref.probe(t))
        .collect::<Result<_>>()?;

    let labels: Vec<(f64, AbsorptionLabel)> = probes.iter().map(|p| (p.t, p.label)).collect();
    let switch = probes
        .windows(2)
        .position(|w| w[0].label == AbsorptionLabel::Minus && w[1].label == AbsorptionLabel::Plus);
    let neither = probes.iter().position(|p| p.label == AbsorptionLabel::Neither);
    let finish = |field: Field, provenance: Provenance, trajectory: TrajectoryRecord| -> Result<Solution> {
        let report = verify_solution(problem, &field, solver.delta_sign, None)?;
        Ok(Solution {
            field,
            report,
            provenance,
            trajectory,
        })
    };

    let Some(k) = switch else {
        if let Some(p) = probes.iter().find(|p| p.nodal.is_some()) {
            let (field, prov) = p.nodal.clone().expect("checked");
            return finish(field, prov, p.record.clone());
        }
        let detail = match neither {
            Some(_) => "trajectories labelled Neither polished to no sign-changing critical point",
            None => "no adjacent Minus/Plus pair among the probes (alpha may be too large)",
        };
        return Err(Error::NodalSearch(format!("{detail}; labels {labels:?}")));
    };
    for p in [&probes[k], &probes[k + 1]] {
        if let Some((field, prov)) = p.nodal.clone() {
            return finish(field, prov, p.record.clone());
        }
    }

    let sw = bisect_switch(probes[k].t, probes[k + 1].t, solver.tol_t, |t| {
        let p = path.probe(t)?;
        Ok(SwitchProbe {
            label: p.label,
            accepted: p.nodal.map(|n| (n, p.record)),
        })
    })?;
    match sw.found {
        Some((_, ((field, mut prov), record))) => {
            prov.t_iterations = sw.iterations;
            finish(field, prov, record)
        }
        None => Err(Error::NodalSearch(format!(
            "bisection over the path stopped in [{}, {}] after {} probes without a \
             sign-changing critical point; labels {:?}",
            sw.low, sw.high, sw.iterations, sw.labels
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_bisection_finds_synthetic_boundary() {
        let b = bisect_threshold(0.0, 1.0, 1e-10, |s| {
            Ok(if s < 0.37 { Side::Low } else { Side::High })
        })
        .unwrap();
        assert!(b.low < 0.37 && b.high >= 0.37);
        assert!(b.high - b.low <= 1e-10);
        assert!((0.5 * (b.low + b.high) - 0.37).abs() <= 1e-10);
    }

    #[test]
    fn threshold_bisection_reaches_machine_precision() {
        let b = bisect_threshold(0.0, 1.0, 0.0, |s| {
            Ok(if s < 0.37 { Side::Low } else { Side::High })
        })
        .unwrap();
        assert!(b.high - b.low <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn threshold_bisection_stops_on_hit() {
        let b = bisect_threshold(0.0, 1.0, 1e-12, |s| {
            Ok(if s == 0.5 { Side::Hit } else { Side::Low })
        })
        .unwrap();
        assert_eq!(b.hit, Some(0.5));
    }

    #[test]
    fn switch_bisection_isolates_synthetic_boundary() {
        let sw = bisect_switch::<(), _>(0.0, 1.0, 1e-12, |t| {
            Ok(SwitchProbe {
                label: if t > 0.6 {
                    AbsorptionLabel::Plus
                } else {
                    AbsorptionLabel::Minus
                },
                accepted: None,
            })
        })
        .unwrap();
        assert!(sw.found.is_none());
        assert!(sw.low <= 0.6 && sw.high > 0.6 && sw.high - sw.low <= 1e-12);
        let hit = bisect_switch(0.0, 1.0, 1e-12, |t| {
            Ok(SwitchProbe {
                label: AbsorptionLabel::Plus,
                accepted: (t < 0.3).then_some(t),
            })
        })
        .unwrap();
        assert_eq!(hit.found.map(|f| f.0), Some(0.25));
    }

    #[test]
    fn census_counts_signs() {
        let c = SignCensus::of(&[1.0, 0.5, -1e-6, -0.2, 0.0, 0.3], 1e-3);
        assert_eq!(c.positive_nodes, 3);
        assert_eq!(c.negative_nodes, 1);
        assert_eq!(c.sign_changes, 2);
        assert!(c.is_nodal());
        assert!(!c.nonnegative(1e-8));
        let pos = SignCensus::of(&[1.0, 0.0, 2.0], 1e-3);
        assert!(pos.nonnegative(1e-8) && !pos.is_nodal());
    }

    #[test]
    fn bumps_lie_in_opposite_cones() {
        let grid = crate::radial::build_grid(5, 20.0, 100).unwrap();
        let u = positive_bump(&grid);
        let v = negative_bump(&grid);
        assert!(u.min_value() >= 0.0 && u.max_value() > 0.0);
        assert!(v.max_value() <= 0.0 && v.min_value() < 0.0);
    }

    #[test]
    fn zero_direction_rejected() {
        let p = crate::model::tests::cubic(40);
        let z = p.grid.zeros();
        let e = bracket_ray(&p, &z, &SolverConfig::default(), &FlowConfig::default());
        assert!(matches!(e, Err(Error::ZeroDirection)));
        assert!(verify_solution(&p, &z, 1e-3, None).is_err());
    }

    #[test]
    fn ray_bracket_is_certified() {
        let p = crate::model::tests::cubic(100);
        let d = positive_bump(&p.grid);
        let flow = FlowConfig::default();
        let ray = bracket_ray(&p, &d, &SolverConfig::default(), &flow).unwrap();
        assert!(ray.s_low < ray.s_high);
        let o = classify(&p, &d.scaled(ray.s_high), &flow).unwrap();
        assert_eq!(o.tag, OutcomeTag::EscapedNegativeEnergy);
        let o = classify(&p, &d.scaled(ray.s_low), &flow).unwrap();
        assert_eq!(o.tag, OutcomeTag::ConvergedZero);
    }
}
