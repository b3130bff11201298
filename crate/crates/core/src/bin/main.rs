use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use biharm_nodal::config::{parse_config, RunConfig};
use biharm_nodal::error::{Error, Result};
use biharm_nodal::export;
use biharm_nodal::flow::{integrate, OutcomeTag};
use biharm_nodal::moreau::{check_dual_sign, exhaustive_projection, project_onto_cone, DualSignReport};
use biharm_nodal::run::{self, exit};
use biharm_nodal::sampling;

#[derive(Parser)]
#[command(version, about = "Positive, negative and nodal radial solutions of Δ²u + V(r)u = f(r,u)")]
struct Cli {
    /// Configuration file; the built-in reference problem when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized test vectors, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and certify the positive, negative and nodal solutions.
    Solve,
    /// Integrate the descent flow from a field file.
    Flow {
        /// CSV with header starting `r,u` on the configured grid.
        #[arg(long)]
        input: PathBuf,
    },
    /// Moreau split of a field file with respect to the nonnegative cone.
    Project {
        #[arg(long)]
        input: PathBuf,
    },
    /// Sign of linear solves with random nonnegative loads.
    LinearCheck {
        /// Number of loads; the configured count when omitted.
        #[arg(long)]
        loads: Option<usize>,
    },
    /// Compare the active-set projection with exhaustive enumeration.
    Oracle {
        /// Grid size (at most 20).
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Print the effective configuration.
    PrintConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = export::read_text(path)?;
            parse_config(&text)?
        }
        None => RunConfig::reference(),
    };
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.monitors.seed = seed;
    }
    Ok(cfg)
}

fn report<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    export::write_json(&dir.join(name), value)?;
    println!(
        "{}",
        serde_json::to_string_pretty(value).unwrap_or_else(|e| format!("<unprintable: {e}>"))
    );
    Ok(())
}

fn solve(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let verbose = cli.verbose;
    let mut log = |msg: &str| {
        if verbose {
            eprintln!("[solve] {msg}");
        }
    };
    let outcome = run::run(&cfg, &mut log)?;
    let s = &outcome.summary;
    for rec in &s.solutions {
        println!(
            "{:<8} energy {:.10e}  residual {:.3e}  min {:.6e}  max {:.6e}  sign changes {}  {}",
            rec.kind.name(),
            rec.energy,
            rec.fixed_point_residual,
            rec.census.min,
            rec.census.max,
            rec.census.sign_changes,
            if rec.certified() { "certified" } else { "NOT certified" }
        );
    }
    if let Some(d) = &s.distinctness {
        println!("distinct {}", d.distinct);
    }
    if let Some(f) = &s.failure {
        eprintln!("error in phase {:?}: {}", f.phase, f.message);
    }
    if verbose {
        for (phase, secs) in &outcome.timings.phases {
            eprintln!("[solve] {phase}: {secs:.2} s");
        }
    }
    println!("outputs in {}", cfg.output.directory.display());
    Ok(s.exit_code)
}

#[derive(Serialize)]
struct FlowReport {
    tag: OutcomeTag,
    steps: usize,
    terminal_energy: f64,
    terminal_grad_norm: f64,
    terminal_norm: f64,
    first_absorbed: Option<(String, usize)>,
}

fn flow(cli: &Cli, input: &Path) -> Result<i32> {
    let cfg = load_config(cli)?;
    let problem = run::build_problem(&cfg)?;
    let u0 = export::read_field_csv(input)?.on_grid(&problem.grid, input)?;
    let mut fc = cfg.flow.clone();
    fc.monitor_cones = true;
    let (outcome, record) = integrate(&problem, &u0, &fc)?;
    let dir = &cfg.output.directory;
    export::write_trajectory_csv(&dir.join("trajectory.csv"), &record, cfg.output.trajectory_stride)?;
    export::write_solution_csv(&dir.join("terminal.csv"), &problem.grid, &problem.structure, &outcome.terminal)?;
    let rep = FlowReport {
        tag: outcome.tag,
        steps: record.steps_taken,
        terminal_energy: outcome.terminal_energy,
        terminal_grad_norm: outcome.terminal_grad_norm,
        terminal_norm: outcome.terminal_norm,
        first_absorbed: record.first_absorbed.map(|(c, k)| (format!("{c:?}"), k)),
    };
    report(dir, "flow.json", &rep)?;
    Ok(if outcome.tag == OutcomeTag::Undetermined {
        exit::BUDGET
    } else {
        exit::SUCCESS
    })
}

#[derive(Serialize)]
struct ProjectReport {
    certified: bool,
    iterations: usize,
    orth_residual: f64,
    kkt_violation: f64,
    compl_violation: f64,
    multiplier_scale: f64,
    dual_sign: DualSignReport,
}

fn project(cli: &Cli, input: &Path) -> Result<i32> {
    let cfg = load_config(cli)?;
    let problem = run::build_problem(&cfg)?;
    let u = export::read_field_csv(input)?.on_grid(&problem.grid, input)?;
    let split = project_onto_cone(&problem.structure, &u, cfg.flow.tol_qp)?;
    let dir = &cfg.output.directory;
    let mut csv = String::from("r,u,positive_part,dual_part,multiplier\n");
    for i in 0..u.len() {
        csv.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            problem.grid.radii()[i],
            u[i],
            split.projection[i],
            split.dual[i],
            split.multipliers[i]
        ));
    }
    export::write_text(&dir.join("split.csv"), &csv)?;
    let certified = split.certified(cfg.flow.tol_qp);
    let rep = ProjectReport {
        certified,
        iterations: split.iterations,
        orth_residual: split.orth_residual,
        kkt_violation: split.kkt_violation,
        compl_violation: split.compl_violation,
        multiplier_scale: split.multiplier_scale,
        dual_sign: check_dual_sign(&split, cfg.solver.tol_pos),
    };
    report(dir, "split.json", &rep)?;
    Ok(if certified { exit::SUCCESS } else { exit::VERIFICATION })
}

fn linear_check(cli: &Cli, loads: Option<usize>) -> Result<i32> {
    let cfg = load_config(cli)?;
    let problem = run::build_problem(&cfg)?;
    let loads = loads.unwrap_or(cfg.monitors.positivity_loads);
    let stats = run::positivity_sweep(&problem, loads, cfg.monitors.seed, cfg.solver.tol_pos)?;
    report(&cfg.output.directory, "linear_check.json", &stats)?;
    Ok(if stats.failures == 0 {
        exit::SUCCESS
    } else {
        exit::VERIFICATION
    })
}

#[derive(Serialize)]
struct OracleReport {
    n: usize,
    samples: usize,
    max_gram_distance: f64,
    mismatches: usize,
    uncertified: usize,
}

fn oracle(cli: &Cli, n: usize, samples: usize) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    cfg.grid.n_nodes = n;
    let problem = run::build_problem(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.monitors.seed);
    let mut rep = OracleReport {
        n,
        samples,
        max_gram_distance: 0.0,
        mismatches: 0,
        uncertified: 0,
    };
    for _ in 0..samples {
        let u = sampling::rough_field(n, &mut rng);
        let split = project_onto_cone(&problem.structure, &u, cfg.flow.tol_qp)?;
        if !split.certified(cfg.flow.tol_qp) {
            rep.uncertified += 1;
        }
        let brute = exhaustive_projection(problem.structure.gram(), &u)?;
        let d = problem.norm(&split.projection.minus(&brute));
        if d > 1e-8 {
            rep.mismatches += 1;
        }
        rep.max_gram_distance = rep.max_gram_distance.max(d);
    }
    report(&cfg.output.directory, "oracle.json", &rep)?;
    Ok(if rep.mismatches == 0 && rep.uncertified == 0 {
        exit::SUCCESS
    } else {
        exit::VERIFICATION
    })
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Solve => solve(cli),
        Command::Flow { input } => flow(cli, input),
        Command::Project { input } => project(cli, input),
        Command::LinearCheck { loads } => linear_check(cli, *loads),
        Command::Oracle { n, samples } => oracle(cli, *n, *samples),
        Command::PrintConfig => {
            print!("{}", load_config(cli)?.to_text());
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(_) = e {
                eprintln!("(see the configuration section of the README)");
            }
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
