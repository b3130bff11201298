//! Run configuration: a sectioned `key = value` text format.
//!
//! ```text
//! [grid]
//! dim_n = 5
//! r_max = 20
//! n_nodes = 400
//!
//! [potential]
//! profile = constant 1
//! floor = 1
//!
//! [nonlinearity]
//! term = 2 constant 1          # exponent, then the coefficient profile
//! ```
//!
//! Profiles are `constant <value>` or `knots <r>:<value> <r>:<value> ...`.
//! `#` starts a comment. The `flow`, `solver`, `output` and `run` sections
//! are optional; omitted keys keep their defaults. Every syntax and range
//! problem is collected before the parse fails.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::model::{NonlinearityModel, PotentialSpec, RadialProfile, TermSpec};
use crate::radial::build_grid;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dim_n: usize,
    pub r_max: f64,
    pub n_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Every k-th trajectory sample is written to the trajectory logs.
    pub trajectory_stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            trajectory_stride: 1,
        }
    }
}

/// Seed and sample counts of the empirical monitors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub seed: u64,
    /// Random nonnegative loads of the linear positivity sweep.
    pub positivity_loads: usize,
    /// Random fields whose Moreau dual parts are checked for sign.
    pub dual_sign_samples: usize,
    /// Trajectories started in `K` for the invariance probe.
    pub invariance_probes: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            positivity_loads: 100,
            dual_sign_samples: 50,
            invariance_probes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub potential: PotentialSpec,
    pub terms: Vec<TermSpec>,
    pub flow: FlowConfig,
    pub solver: SolverConfig,
    pub output: OutputConfig,
    pub monitors: MonitorConfig,
}

impl RunConfig {
    /// The reference problem: `N = 5`, `V ≡ 1`, `f(s) = |s|² s`, `r_max = 20`,
    /// 400 nodes.
    pub fn reference() -> Self {
        Self {
            grid: GridConfig {
                dim_n: 5,
                r_max: 20.0,
                n_nodes: 400,
            },
            potential: PotentialSpec::constant(1.0),
            terms: vec![TermSpec {
                coef: RadialProfile::Constant(1.0),
                exponent: 2.0,
            }],
            flow: FlowConfig::default(),
            solver: SolverConfig::default(),
            output: OutputConfig::default(),
            monitors: MonitorConfig::default(),
        }
    }

    /// Range checks against the preconditions of every module.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let grid = match build_grid(self.grid.dim_n, self.grid.r_max, self.grid.n_nodes) {
            Ok(g) => Some(g),
            Err(e) => {
                v.push(format!("grid: {e}"));
                None
            }
        };
        if let Some(grid) = &grid {
            if let Err(e) = self.potential.tabulate(grid) {
                v.push(format!("potential: {e}"));
            }
            for (k, term) in self.terms.iter().enumerate() {
                if let Err(e) = NonlinearityModel::new(grid, std::slice::from_ref(term)) {
                    v.push(format!("nonlinearity: {}", e.to_string().replace("term 1", &format!("term {}", k + 1))));
                }
            }
        }
        if self.terms.is_empty() {
            v.push("nonlinearity: at least one term is required".into());
        }
        v.extend(self.flow.violations());
        v.extend(self.solver.violations());
        if self.output.trajectory_stride == 0 {
            v.push("output: trajectory_stride must be at least 1".into());
        }
        if self.monitors.positivity_loads == 0 {
            v.push("run: positivity_loads must be at least 1".into());
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

    /// Text form accepted by [`parse_config`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = &self.flow;
        let sv = &self.solver;
        let _ = writeln!(s, "[grid]");
        let _ = writeln!(s, "dim_n = {}", self.grid.dim_n);
        let _ = writeln!(s, "r_max = {}", num(self.grid.r_max));
        let _ = writeln!(s, "n_nodes = {}", self.grid.n_nodes);
        let _ = writeln!(s, "\n[potential]");
        let _ = writeln!(s, "profile = {}", profile_text(&self.potential.profile));
        let _ = writeln!(s, "floor = {}", num(self.potential.floor));
        let _ = writeln!(s, "\n[nonlinearity]");
        for t in &self.terms {
            let _ = writeln!(s, "term = {} {}", num(t.exponent), profile_text(&t.coef));
        }
        let _ = writeln!(s, "\n[flow]");
        for (k, x) in [
            ("step_init", f.step_init),
            ("step_min", f.step_min),
            ("shrink", f.shrink),
            ("tol_crit", f.tol_crit),
            ("tol_zero", f.tol_zero),
            ("escape_energy", f.escape_energy),
            ("alpha", f.alpha),
            ("tol_qp", f.tol_qp),
        ] {
            let _ = writeln!(s, "{k} = {}", num(x));
        }
        let _ = writeln!(s, "max_steps = {}", f.max_steps);
        let _ = writeln!(s, "sample_stride = {}", f.sample_stride);
        let _ = writeln!(s, "monitor_cones = {}", f.monitor_cones);
        let _ = writeln!(s, "\n[solver]");
        for (k, x) in [
            ("tol_s", sv.tol_s),
            ("tol_s_nodal", sv.tol_s_nodal),
            ("tol_t", sv.tol_t),
            ("tol_residual", sv.tol_residual),
            ("tol_newton", sv.tol_newton),
            ("delta_sign", sv.delta_sign),
            ("tol_sign", sv.tol_sign),
            ("tol_pos", sv.tol_pos),
        ] {
            let _ = writeln!(s, "{k} = {}", num(x));
        }
        for (k, x) in [
            ("newton_max_iter", sv.newton_max_iter),
            ("probes", sv.probes),
            ("path_samples", sv.path_samples),
            ("candidates", sv.candidates),
            ("max_doublings", sv.max_doublings),
            ("monitor_stride", sv.monitor_stride),
        ] {
            let _ = writeln!(s, "{k} = {x}");
        }
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "directory = {}", self.output.directory.display());
        let _ = writeln!(s, "trajectory_stride = {}", self.output.trajectory_stride);
        let m = &self.monitors;
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "positivity_loads = {}", m.positivity_loads);
        let _ = writeln!(s, "dual_sign_samples = {}", m.dual_sign_samples);
        let _ = writeln!(s, "invariance_probes = {}", m.invariance_probes);
        s
    }
}

/// Shortest round-tripping decimal form.
fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e6).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn profile_text(p: &RadialProfile) -> String {
    match p {
        RadialProfile::Constant(c) => format!("constant {}", num(*c)),
        RadialProfile::Knots(k) => {
            let knots: Vec<String> = k
                .iter()
                .map(|(r, v)| format!("{}:{}", num(*r), num(*v)))
                .collect();
            format!("knots {}", knots.join(" "))
        }
    }
}

fn parse_profile(text: &str) -> std::result::Result<RadialProfile, String> {
    let mut words = text.split_whitespace();
    match words.next() {
        Some("constant") => {
            let value = words.next().ok_or("constant profile needs a value")?;
            if let Some(extra) = words.next() {
                return Err(format!("unexpected '{extra}' after constant value"));
            }
            parse_f64(value).map(RadialProfile::Constant)
        }
        Some("knots") => {
            let knots = words
                .map(|w| {
                    let (r, v) = w
                        .split_once(':')
                        .ok_or_else(|| format!("knot '{w}' is not of the form r:value"))?;
                    Ok((parse_f64(r)?, parse_f64(v)?))
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            Ok(RadialProfile::Knots(knots))
        }
        Some(other) => Err(format!("unknown profile kind '{other}' (expected constant or knots)")),
        None => Err("empty profile".into()),
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>()
        .map_err(|_| format!("'{s}' is not a number"))
}

fn parse_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse::<usize>()
        .map_err(|_| format!("'{s}' is not a nonnegative integer"))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("'{s}' is not true or false")),
    }
}

const SECTIONS: [&str; 7] = [
    "grid",
    "potential",
    "nonlinearity",
    "flow",
    "solver",
    "output",
    "run",
];

/// Parses and validates a configuration, reporting every violation.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::reference();
    cfg.terms.clear();
    let mut errors = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut section: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(name) if SECTIONS.contains(&name.trim()) => {
                    section = Some(name.trim().to_string());
                }
                Some(name) => {
                    errors.push(format!("line {line_no}: unknown section [{name}]"));
                    section = None;
                }
                None => errors.push(format!("line {line_no}: unterminated section header")),
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {line_no}: expected 'key = value'"));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = section.clone() else {
            errors.push(format!("line {line_no}: '{key}' appears outside any section"));
            continue;
        };
        if key != "term" && !seen.insert((sec.clone(), key.to_string())) {
            errors.push(format!("line {line_no}: duplicate key '{key}' in [{sec}]"));
            continue;
        }
        if let Err(e) = assign(&mut cfg, &sec, key, value) {
            errors.push(format!("line {line_no}: [{sec}] {e}"));
        }
    }

    for key in ["dim_n", "r_max", "n_nodes"] {
        if !seen.contains(&("grid".to_string(), key.to_string())) {
            errors.push(format!("missing required key '{key}' in [grid]"));
        }
    }
    if !seen.contains(&("potential".to_string(), "profile".to_string())) {
        errors.push("missing required key 'profile' in [potential]".into());
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn assign(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
    let f = &mut cfg.flow;
    let s = &mut cfg.solver;
    match (section, key) {
        ("grid", "dim_n") => cfg.grid.dim_n = parse_usize(value)?,
        ("grid", "r_max") => cfg.grid.r_max = parse_f64(value)?,
        ("grid", "n_nodes") => cfg.grid.n_nodes = parse_usize(value)?,
        ("potential", "profile") => cfg.potential.profile = parse_profile(value)?,
        ("potential", "floor") => cfg.potential.floor = parse_f64(value)?,
        ("nonlinearity", "term") => {
            let (exp, profile) = value
                .split_once(char::is_whitespace)
                .ok_or("term needs an exponent followed by a coefficient profile")?;
            cfg.terms.push(TermSpec {
                exponent: parse_f64(exp)?,
                coef: parse_profile(profile)?,
            });
        }
        ("flow", "step_init") => f.step_init = parse_f64(value)?,
        ("flow", "step_min") => f.step_min = parse_f64(value)?,
        ("flow", "shrink") => f.shrink = parse_f64(value)?,
        ("flow", "tol_crit") => f.tol_crit = parse_f64(value)?,
        ("flow", "tol_zero") => f.tol_zero = parse_f64(value)?,
        ("flow", "escape_energy") => f.escape_energy = parse_f64(value)?,
        ("flow", "alpha") => f.alpha = parse_f64(value)?,
        ("flow", "tol_qp") => f.tol_qp = parse_f64(value)?,
        ("flow", "max_steps") => f.max_steps = parse_usize(value)?,
        ("flow", "sample_stride") => f.sample_stride = parse_usize(value)?,
        ("flow", "monitor_cones") => f.monitor_cones = parse_bool(value)?,
        ("solver", "tol_s") => s.tol_s = parse_f64(value)?,
        ("solver", "tol_s_nodal") => s.tol_s_nodal = parse_f64(value)?,
        ("solver", "tol_t") => s.tol_t = parse_f64(value)?,
        ("solver", "tol_residual") => s.tol_residual = parse_f64(value)?,
        ("solver", "tol_newton") => s.tol_newton = parse_f64(value)?,
        ("solver", "delta_sign") => s.delta_sign = parse_f64(value)?,
        ("solver", "tol_sign") => s.tol_sign = parse_f64(value)?,
        ("solver", "tol_pos") => s.tol_pos = parse_f64(value)?,
        ("solver", "newton_max_iter") => s.newton_max_iter = parse_usize(value)?,
        ("solver", "probes") => s.probes = parse_usize(value)?,
        ("solver", "path_samples") => s.path_samples = parse_usize(value)?,
        ("solver", "candidates") => s.candidates = parse_usize(value)?,
        ("solver", "max_doublings") => s.max_doublings = parse_usize(value)?,
        ("solver", "monitor_stride") => s.monitor_stride = parse_usize(value)?,
        ("output", "directory") => {
            if value.is_empty() {
                return Err("directory must not be empty".into());
            }
            cfg.output.directory = PathBuf::from(value);
        }
        ("output", "trajectory_stride") => cfg.output.trajectory_stride = parse_usize(value)?,
        ("run", "seed") => {
            cfg.monitors.seed = value
                .parse()
                .map_err(|_| format!("'{value}' is not a 64-bit unsigned seed"))?
        }
        ("run", "positivity_loads") => cfg.monitors.positivity_loads = parse_usize(value)?,
        ("run", "dual_sign_samples") => cfg.monitors.dual_sign_samples = parse_usize(value)?,
        ("run", "invariance_probes") => cfg.monitors.invariance_probes = parse_usize(value)?,
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[grid]\ndim_n = 5\nr_max = 20\nn_nodes = 400\n\n\
                           [potential]\nprofile = constant 1\n\n\
                           [nonlinearity]\nterm = 2 constant 1\n";

    fn messages(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Config(v)) => v,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file_is_the_reference_problem() {
        assert_eq!(parse_config(MINIMAL).unwrap(), RunConfig::reference());
    }

    #[test]
    fn print_parse_round_trip() {
        let mut c = RunConfig::reference();
        c.potential = PotentialSpec {
            profile: RadialProfile::Knots(vec![(0.0, 2.5), (3.25, 1.0 / 3.0)]),
            floor: 0.1,
        };
        c.terms.push(TermSpec {
            coef: RadialProfile::Knots(vec![(0.0, 0.0), (5.0, 1e-7)]),
            exponent: 0.7,
        });
        c.flow.step_min = 1.234e-9;
        c.flow.monitor_cones = true;
        c.solver.tol_s = std::f64::consts::PI * 1e-11;
        c.output.directory = PathBuf::from("runs/a b");
        c.monitors.seed = u64::MAX;
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
        let r = RunConfig::reference();
        assert_eq!(parse_config(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn supercritical_exponent_cites_bound() {
        let m = messages(&MINIMAL.replace("term = 2", "term = 9"));
        assert_eq!(m.len(), 1);
        assert!(m[0].contains("2_* - 2") && m[0].contains("8"), "{m:?}");
    }

    #[test]
    fn low_dimension_rejected() {
        let m = messages(&MINIMAL.replace("dim_n = 5", "dim_n = 4"));
        assert!(m.iter().any(|e| e.contains("grid")), "{m:?}");
    }

    #[test]
    fn all_violations_reported() {
        let text = format!(
            "{MINIMAL}\n[flow]\nshrink = 2\nbogus = 1\nalpha = x\n[solver]\nprobes = 1\n"
        );
        let m = messages(&text);
        assert_eq!(m.len(), 2, "{m:?}");
        assert!(m[0].contains("line 14") && m[0].contains("bogus"));
        assert!(m[1].contains("line 15") && m[1].contains("'x'"));
        let text = format!("{MINIMAL}\n[flow]\nshrink = 2\n[solver]\nprobes = 1\n");
        let m = messages(&text);
        assert_eq!(m.len(), 2, "{m:?}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let m = messages("[grid]\ndim_n 5\n[nowhere]\nr_max = 1\nr_max = 2\n");
        assert!(m.iter().any(|e| e.starts_with("line 2:")));
        assert!(m.iter().any(|e| e.starts_with("line 3:") && e.contains("nowhere")));
        assert!(m.iter().any(|e| e.contains("missing required key 'n_nodes'")));
        let m = messages(&format!("{MINIMAL}[grid]\nr_max = 3\n"));
        assert!(m.iter().any(|e| e.contains("duplicate")), "{m:?}");
    }
}
