//! End-to-end orchestration: empirical monitors, the three solutions,
//! verification, export and exit status.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::export;
use crate::flow::{integrate, FlowConfig, TrajectoryRecord};
use crate::model::Problem;
use crate::moreau::{check_dual_sign, project_onto_cone, project_onto_negative_cone};
use crate::radial::{solve_linear_positivity, Field};
use crate::sampling;
use crate::solver::{
    find_nodal, find_signed_solutions, negative_bump, positive_bump, Provenance, SignCensus,
    Solution,
};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const BRACKETING: i32 = 3;
    pub const NODAL_SEARCH: i32 = 4;
    pub const BUDGET: i32 = 5;
    /// Solutions were produced but at least one certificate failed.
    pub const VERIFICATION: i32 = 6;
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_)
        | Error::InvalidGrid(_)
        | Error::InvalidPotential(_)
        | Error::InvalidModel(_)
        | Error::InvalidFlowConfig(_)
        | Error::Parse { .. } => exit::CONFIG,
        Error::BracketFailure { .. } | Error::BracketBroken { .. } | Error::ZeroDirection => {
            exit::BRACKETING
        }
        Error::NodalSearch(_) => exit::NODAL_SEARCH,
        Error::Undetermined { .. } | Error::QpBudgetExhausted { .. } => exit::BUDGET,
        Error::Certification(_) => exit::VERIFICATION,
        _ => exit::OTHER,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Setup,
    Monitors,
    Signed,
    Nodal,
    Export,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Setup => "setup",
            Phase::Monitors => "monitors",
            Phase::Signed => "signed",
            Phase::Nodal => "nodal",
            Phase::Export => "export",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionKind {
    Positive,
    Negative,
    Nodal,
}

impl SolutionKind {
    pub fn name(self) -> &'static str {
        match self {
            SolutionKind::Positive => "positive",
            SolutionKind::Negative => "negative",
            SolutionKind::Nodal => "nodal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub kind: SolutionKind,
    pub energy: f64,
    pub norm: f64,
    pub fixed_point_residual: f64,
    pub weak_residual: f64,
    pub strong_residual: f64,
    pub census: SignCensus,
    pub sign_ok: bool,
    pub residual_ok: bool,
    pub energy_ok: bool,
    pub provenance: Provenance,
    pub solution_file: String,
    pub trajectory_file: String,
}

impl SolutionRecord {
    pub fn certified(&self) -> bool {
        self.sign_ok && self.residual_ok && self.energy_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distinctness {
    pub positive_negative: f64,
    pub positive_nodal: f64,
    pub negative_nodal: f64,
    /// `10·tol_residual·max‖u_i‖`.
    pub threshold: f64,
    pub distinct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityStats {
    pub loads: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// Largest `-min v / max v` over the sweep.
    pub worst_relative_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSignStats {
    pub samples: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub worst_relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceStats {
    pub trajectories: usize,
    /// Trajectories with `dist_plus(k) > dist_plus(0) + tol_pos·‖u₀‖` at some sample.
    pub violations: usize,
    /// Largest excess `dist_plus(k) - dist_plus(0)`, relative to `‖u₀‖`.
    pub worst_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub positivity: PositivityStats,
    pub dual_sign: DualSignStats,
    pub invariance: InvarianceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseFailure {
    pub phase: Phase,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub monitors: Option<MonitorReport>,
    pub solutions: Vec<SolutionRecord>,
    pub distinctness: Option<Distinctness>,
    /// `‖u₁ + u₂‖ / ‖u₁‖`.
    pub odd_symmetry: Option<f64>,
    pub failure: Option<PhaseFailure>,
    pub exit_code: i32,
}

/// Wall-clock seconds per phase; kept out of the summary so that summaries
/// of identical runs are byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub timings: Timings,
    pub solutions: Vec<(SolutionKind, Solution)>,
}

pub fn build_problem(config: &RunConfig) -> Result<Problem> {
    Problem::new(
        config.grid.dim_n,
        config.grid.r_max,
        config.grid.n_nodes,
        &config.potential,
        &config.terms,
    )
}

/// Linear positivity sweep over seeded random nonnegative loads.
pub fn positivity_sweep(problem: &Problem, loads: usize, seed: u64, tol_pos: f64) -> Result<PositivityStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..loads {
        let h = sampling::nonnegative_load(&problem.grid, &mut rng);
        let (_, report) = solve_linear_positivity(&problem.structure, &problem.weights, &h, tol_pos)?;
        if !report.positive {
            failures += 1;
        }
        worst = worst.max(report.relative_violation());
    }
    Ok(PositivityStats {
        loads,
        failures,
        failure_rate: failures as f64 / loads.max(1) as f64,
        worst_relative_violation: worst,
    })
}

/// Sign of the dual parts of both cone splits of seeded random fields.
pub fn dual_sign_monitor(
    problem: &Problem,
    samples: usize,
    seed: u64,
    tol_qp: f64,
    tol_pos: f64,
) -> Result<DualSignStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0a1);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for k in 0..samples {
        let u = if k % 2 == 0 {
            sampling::smooth_field(&problem.grid, &mut rng)
        } else {
            sampling::rough_field(problem.n(), &mut rng)
        };
        for split in [
            project_onto_cone(&problem.structure, &u, tol_qp)?,
            project_onto_negative_cone(&problem.structure, &u, tol_qp)?,
        ] {
            let r = check_dual_sign(&split, tol_pos);
            if !r.sign_ok {
                violations += 1;
            }
            worst = worst.max(r.relative);
        }
    }
    let total = 2 * samples;
    Ok(DualSignStats {
        samples: total,
        violations,
        violation_rate: violations as f64 / total.max(1) as f64,
        worst_relative: worst,
    })
}

/// Flows started in `K` and the growth of their distance to `K`.
pub fn invariance_probe(
    problem: &Problem,
    probes: usize,
    seed: u64,
    flow: &FlowConfig,
    tol_pos: f64,
) -> Result<(InvarianceStats, Vec<TrajectoryRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7a_11a7);
    let cfg = FlowConfig {
        monitor_cones: true,
        ..flow.clone()
    };
    let bump = positive_bump(&problem.grid);
    let mut records = Vec::new();
    let mut violations = 0;
    let mut worst = 0.0f64;
    for k in 0..probes {
        let shape = if k == 0 {
            bump.clone()
        } else {
            let mut f = sampling::smooth_field(&problem.grid, &mut rng);
            f.iter_mut().for_each(|x| *x = x.abs());
            f
        };
        // fractions of the first doubling scale with negative energy, so
        // that starts fall on both sides of the basin boundary
        let mut s_neg = 1.0 / problem.norm(&shape).max(f64::MIN_POSITIVE);
        let mut doublings = 0;
        while problem.energy_value(&shape.scaled(s_neg)) >= 0.0 && doublings < 200 {
            s_neg *= 2.0;
            doublings += 1;
        }
        let u0 = shape.scaled([0.25, 0.5, 0.75][k % 3] * s_neg);
        let (_, record) = integrate(problem, &u0, &cfg)?;
        let n0 = problem.norm(&u0);
        let d0 = record.cone_dist_plus[0];
        let excess = record
            .cone_dist_plus
            .iter()
            .map(|d| d - d0)
            .fold(0.0f64, f64::max)
            / n0;
        if excess > tol_pos {
            violations += 1;
        }
        worst = worst.max(excess);
        records.push(record);
    }
    Ok((
        InvarianceStats {
            trajectories: probes,
            violations,
            worst_excess: worst,
        },
        records,
    ))
}

pub fn monitors(problem: &Problem, config: &RunConfig) -> Result<(MonitorReport, Vec<TrajectoryRecord>)> {
    let m = &config.monitors;
    let tol_pos = config.solver.tol_pos;
    let positivity = positivity_sweep(problem, m.positivity_loads, m.seed, tol_pos)?;
    let dual_sign = dual_sign_monitor(problem, m.dual_sign_samples, m.seed, config.flow.tol_qp, tol_pos)?;
    let (invariance, records) = invariance_probe(problem, m.invariance_probes, m.seed, &config.flow, tol_pos)?;
    Ok((
        MonitorReport {
            positivity,
            dual_sign,
            invariance,
        },
        records,
    ))
}

fn record_of(kind: SolutionKind, sol: &Solution, config: &RunConfig) -> SolutionRecord {
    let s = &config.solver;
    let r = &sol.report;
    let sign_ok = match kind {
        SolutionKind::Positive => r.census.nonnegative(s.tol_sign),
        SolutionKind::Negative => r.census.nonpositive(s.tol_sign),
        SolutionKind::Nodal => {
            r.census.min < -s.delta_sign * r.census.max_abs
                && r.census.max > s.delta_sign * r.census.max_abs
        }
    };
    SolutionRecord {
        kind,
        energy: r.energy,
        norm: r.norm,
        fixed_point_residual: r.fixed_point_residual,
        weak_residual: r.weak_residual,
        strong_residual: r.strong_residual,
        census: r.census.clone(),
        sign_ok,
        residual_ok: r.fixed_point_residual <= s.tol_residual && r.norm > config.flow.tol_zero,
        energy_ok: r.energy > 0.0,
        provenance: sol.provenance.clone(),
        solution_file: format!("solution_{}.csv", kind.name()),
        trajectory_file: format!("trajectory_{}.csv", kind.name()),
    }
}

fn distance(problem: &Problem, a: &[f64], b: &[f64]) -> f64 {
    problem.norm(&Field(a.to_vec()).minus(b))
}

/// Runs the full pipeline and writes every output into the configured
/// directory. Errors after setup are reported in the summary, which is
/// still written together with whatever was computed before.
pub fn run(config: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    config.validate()?;
    let dir = config.output.directory.clone();
    let mut timings = Timings::default();
    let mut clock = Instant::now();
    let mut lap = |timings: &mut Timings, phase: Phase| {
        timings
            .phases
            .push((phase.name().to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let mut summary = RunSummary {
        config: config.clone(),
        monitors: None,
        solutions: Vec::new(),
        distinctness: None,
        odd_symmetry: None,
        failure: None,
        exit_code: exit::SUCCESS,
    };
    let mut solutions: Vec<(SolutionKind, Solution)> = Vec::new();

    let problem = build_problem(config)?;
    lap(&mut timings, Phase::Setup);

    let result = (|| -> std::result::Result<(), (Phase, Error)> {
        log("monitors: positivity sweep, dual sign, invariance probe");
        let (report, records) = monitors(&problem, config).map_err(|e| (Phase::Monitors, e))?;
        for (k, rec) in records.iter().enumerate() {
            export::write_trajectory_csv(
                &dir.join(format!("trajectory_invariance_{k}.csv")),
                rec,
                config.output.trajectory_stride,
            )
            .map_err(|e| (Phase::Export, e))?;
        }
        summary.monitors = Some(report);
        lap(&mut timings, Phase::Monitors);

        log("signed solutions: bisecting the rays through ±bump");
        let bump = positive_bump(&problem.grid);
        let signed = find_signed_solutions(&problem, &bump, &config.solver, &config.flow)
            .map_err(|e| (Phase::Signed, e))?;
        summary.odd_symmetry = Some(
            problem.norm(&signed.positive.field.plus_scaled(1.0, &signed.negative.field))
                / problem.norm(&signed.positive.field),
        );
        solutions.push((SolutionKind::Positive, signed.positive));
        solutions.push((SolutionKind::Negative, signed.negative));
        lap(&mut timings, Phase::Signed);

        log("nodal solution: bisecting the path between the cones");
        let known = [&solutions[0].1.field, &solutions[1].1.field];
        let nodal = find_nodal(
            &problem,
            &bump,
            &negative_bump(&problem.grid),
            &known,
            &config.solver,
            &config.flow,
        )
        .map_err(|e| (Phase::Nodal, e))?;
        solutions.push((SolutionKind::Nodal, nodal));
        lap(&mut timings, Phase::Nodal);
        Ok(())
    })();

    for (kind, sol) in &solutions {
        let rec = record_of(*kind, sol, config);
        export::write_solution_csv(
            &dir.join(&rec.solution_file),
            &problem.grid,
            &problem.structure,
            &sol.field,
        )?;
        export::write_plot_data(
            &dir.join(format!("plot_{}.dat", kind.name())),
            &problem.grid,
            &problem.structure,
            &sol.field,
        )?;
        export::write_trajectory_csv(
            &dir.join(&rec.trajectory_file),
            &sol.trajectory,
            config.output.trajectory_stride,
        )?;
        summary.solutions.push(rec);
    }

    if solutions.len() == 3 {
        let f = |k: usize| &solutions[k].1.field;
        let max_norm = (0..3).map(|k| problem.norm(f(k))).fold(0.0f64, f64::max);
        let threshold = 10.0 * config.solver.tol_residual * max_norm;
        let d = [
            distance(&problem, f(0), f(1)),
            distance(&problem, f(0), f(2)),
            distance(&problem, f(1), f(2)),
        ];
        summary.distinctness = Some(Distinctness {
            positive_negative: d[0],
            positive_nodal: d[1],
            negative_nodal: d[2],
            threshold,
            distinct: d.iter().all(|&x| x > threshold),
        });
    }

    summary.exit_code = match &result {
        Err((phase, e)) => {
            let code = exit_code(e);
            summary.failure = Some(PhaseFailure {
                phase: *phase,
                exit_code: code,
                message: e.to_string(),
            });
            code
        }
        Ok(()) => {
            let all = summary.solutions.iter().all(SolutionRecord::certified)
                && summary.distinctness.as_ref().is_some_and(|d| d.distinct);
            if all {
                exit::SUCCESS
            } else {
                exit::VERIFICATION
            }
        }
    };
    export::write_json(&dir.join("summary.json"), &summary)?;
    lap(&mut timings, Phase::Export);
    export::write_json(&dir.join("timings.json"), &timings)?;
    Ok(RunOutcome {
        summary,
        timings,
        solutions,
    })
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = export::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
