//! Discrete descent flow `u ← u + τ (A(u) - u)` with energy backtracking,
//! trajectory classification and cone-neighbourhood monitoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_a, Problem};
use crate::moreau::{project_in_metric_onto, Cone};
use crate::radial::Field;

/// Energy increase tolerated on an accepted step, relative to `|I|`. Near
/// a critical point the true decrease `τ‖∇I‖²` drops below the rounding
/// error of `I` itself.
pub const ROUNDOFF_SLACK: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step_init: f64,
    pub step_min: f64,
    pub shrink: f64,
    /// Absolute threshold on `‖u - A(u)‖` for `ConvergedCritical`.
    pub tol_crit: f64,
    /// Absolute threshold on `‖u‖` for `ConvergedZero`.
    pub tol_zero: f64,
    /// Energies below this (negative) value certify escape from the basin of 0.
    pub escape_energy: f64,
    /// Cone-neighbourhood radius relative to `‖u₀‖`.
    pub alpha: f64,
    pub max_steps: usize,
    /// Record every k-th state.
    pub sample_stride: usize,
    /// Evaluate cone distances at recorded states.
    pub monitor_cones: bool,
    pub tol_qp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step_init: 0.5,
            step_min: 1e-8,
            shrink: 0.5,
            tol_crit: 1e-8,
            tol_zero: 1e-3,
            escape_energy: -1e-6,
            alpha: 0.1,
            max_steps: 20_000,
            sample_stride: 1,
            monitor_cones: false,
            tol_qp: crate::moreau::DEFAULT_TOL_QP,
        }
    }
}

impl FlowConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.step_min > 0.0 && self.step_min <= self.step_init) {
            v.push(format!(
                "flow: need 0 < step_min <= step_init (got {} and {})",
                self.step_min, self.step_init
            ));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            v.push(format!("flow: shrink must lie in (0, 1), got {}", self.shrink));
        }
        if !(self.tol_crit > 0.0) {
            v.push(format!("flow: tol_crit must be positive, got {}", self.tol_crit));
        }
        if !(self.tol_zero > 0.0) {
            v.push(format!("flow: tol_zero must be positive, got {}", self.tol_zero));
        }
        if !(self.escape_energy < 0.0) {
            v.push(format!(
                "flow: escape_energy must be negative, got {}",
                self.escape_energy
            ));
        }
        if !(self.alpha > 0.0) {
            v.push(format!("flow: alpha must be positive, got {}", self.alpha));
        }
        if self.max_steps == 0 {
            v.push("flow: max_steps must be at least 1".into());
        }
        if self.sample_stride == 0 {
            v.push("flow: sample_stride must be at least 1".into());
        }
        if !(self.tol_qp > 0.0) {
            v.push(format!("flow: tol_qp must be positive, got {}", self.tol_qp));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidFlowConfig(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeTag {
    ConvergedZero,
    ConvergedCritical,
    EscapedNegativeEnergy,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub tag: OutcomeTag,
    pub terminal: Field,
    pub terminal_energy: f64,
    pub terminal_grad_norm: f64,
    pub terminal_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbsorptionLabel {
    Plus,
    Minus,
    Neither,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    /// Step index of each sample.
    pub steps: Vec<usize>,
    pub states: Vec<Field>,
    pub energies: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub norms: Vec<f64>,
    /// `NaN` when cones are not monitored.
    pub cone_dist_plus: Vec<f64>,
    pub cone_dist_minus: Vec<f64>,
    pub first_absorbed: Option<(Cone, usize)>,
    pub steps_taken: usize,
    /// Absolute cone-neighbourhood radius used for `first_absorbed`.
    pub alpha: f64,
    /// Accepted steps whose energy rose within [`ROUNDOFF_SLACK`].
    pub slack_steps: usize,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Index of the recorded state with the smallest `‖∇I‖ / ‖u‖` among
    /// states with `‖u‖ > min_norm` satisfying `keep`.
    pub fn most_stationary(&self, min_norm: f64, keep: impl Fn(&Field) -> bool) -> Option<usize> {
        (0..self.len())
            .filter(|&i| self.norms[i] > min_norm && keep(&self.states[i]))
            .min_by(|&a, &b| {
                let ra = self.grad_norms[a] / self.norms[a];
                let rb = self.grad_norms[b] / self.norms[b];
                ra.total_cmp(&rb)
            })
    }

    pub fn relative_grad(&self, i: usize) -> f64 {
        self.grad_norms[i] / self.norms[i]
    }
}

pub fn absorption_label(record: &TrajectoryRecord, alpha: f64) -> AbsorptionLabel {
    for (dp, dm) in record.cone_dist_plus.iter().zip(&record.cone_dist_minus) {
        let plus = *dp < alpha;
        let minus = *dm < alpha;
        match (plus, minus) {
            (true, true) => {
                return if dp <= dm {
                    AbsorptionLabel::Plus
                } else {
                    AbsorptionLabel::Minus
                }
            }
            (true, false) => return AbsorptionLabel::Plus,
            (false, true) => return AbsorptionLabel::Minus,
            _ => {}
        }
    }
    AbsorptionLabel::Neither
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub next: Field,
    pub accepted: bool,
    pub tau_used: f64,
    pub energy: f64,
}

/// Explicit Euler step along `A(u) - u`, shrinking `τ` until the energy
/// does not increase beyond [`ROUNDOFF_SLACK`]. A rejected step returns `u` unchanged.
pub fn flow_step(problem: &Problem, u: &[f64], tau: f64, cfg: &FlowConfig) -> Result<FlowStep> {
    problem.structure.norm(u)?;
    let a = apply_a(problem, u)?;
    let energy = problem.energy_value(u);
    let grad: Vec<f64> = u.iter().zip(a.iter()).map(|(x, y)| x - y).collect();
    Ok(backtrack(problem, u, energy, &grad, tau, cfg))
}

fn backtrack(
    problem: &Problem,
    u: &[f64],
    energy: f64,
    grad: &[f64],
    tau: f64,
    cfg: &FlowConfig,
) -> FlowStep {
    let mut tau = tau;
    while tau >= cfg.step_min {
        let next: Vec<f64> = u.iter().zip(grad).map(|(x, g)| x - tau * g).collect();
        let e = problem.energy_value(&next);
        if e.is_finite() && e <= energy + ROUNDOFF_SLACK * energy.abs() {
            return FlowStep {
                next: Field(next),
                accepted: true,
                tau_used: tau,
                energy: e,
            };
        }
        tau *= cfg.shrink;
    }
    FlowStep {
        next: Field(u.to_vec()),
        accepted: false,
        tau_used: tau,
        energy,
    }
}

fn cone_distances(problem: &Problem, u: &[f64], tol_qp: f64) -> Result<(f64, f64)> {
    let gram = problem.structure.gram();
    let p = project_in_metric_onto(gram, u, Cone::Positive, tol_qp)?;
    let q = project_in_metric_onto(gram, u, Cone::Negative, tol_qp)?;
    Ok((problem.norm(&p.dual), problem.norm(&q.dual)))
}

/// Runs the flow from `u0` until it is classified or the budget runs out.
///
/// Precedence at each step: zero, then escape, then criticality.
pub fn integrate(problem: &Problem, u0: &[f64], cfg: &FlowConfig) -> Result<(Outcome, TrajectoryRecord)> {
    run(problem, u0, cfg, true)
}

/// Classifies `u0` without recording states or cone distances.
pub fn classify(problem: &Problem, u0: &[f64], cfg: &FlowConfig) -> Result<Outcome> {
    let cfg = FlowConfig {
        monitor_cones: false,
        ..cfg.clone()
    };
    run(problem, u0, &cfg, false).map(|(o, _)| o)
}

fn run(
    problem: &Problem,
    u0: &[f64],
    cfg: &FlowConfig,
    keep_states: bool,
) -> Result<(Outcome, TrajectoryRecord)> {
    cfg.validate()?;
    problem.structure.norm(u0)?;
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial field"));
    }
    let mut record = TrajectoryRecord {
        alpha: cfg.alpha * problem.norm(u0),
        ..Default::default()
    };
    let mut u = Field(u0.to_vec());
    let mut energy = problem.energy_value(&u);
    let mut tau = cfg.step_init;
    let mut k = 0usize;
    loop {
        let a = apply_a(problem, &u)?;
        let grad: Vec<f64> = u.iter().zip(a.iter()).map(|(x, y)| x - y).collect();
        let grad_norm = problem.norm(&grad);
        let norm = problem.norm(&u);

        let tag = if norm <= cfg.tol_zero {
            Some(OutcomeTag::ConvergedZero)
        } else if energy < cfg.escape_energy {
            Some(OutcomeTag::EscapedNegativeEnergy)
        } else if grad_norm <= cfg.tol_crit {
            Some(OutcomeTag::ConvergedCritical)
        } else if k >= cfg.max_steps {
            Some(OutcomeTag::Undetermined)
        } else {
            None
        };

        if keep_states && (tag.is_some() || k.is_multiple_of(cfg.sample_stride)) {
            let (dp, dm) = if cfg.monitor_cones {
                cone_distances(problem, &u, cfg.tol_qp)?
            } else {
                (f64::NAN, f64::NAN)
            };
            if cfg.monitor_cones && record.first_absorbed.is_none() {
                let alpha = record.alpha;
                if dp < alpha || dm < alpha {
                    let cone = if dp <= dm { Cone::Positive } else { Cone::Negative };
                    record.first_absorbed = Some((cone, k));
                }
            }
            record.steps.push(k);
            record.states.push(u.clone());
            record.energies.push(energy);
            record.grad_norms.push(grad_norm);
            record.norms.push(norm);
            record.cone_dist_plus.push(dp);
            record.cone_dist_minus.push(dm);
        }

        if let Some(tag) = tag {
            record.steps_taken = k;
            let outcome = Outcome {
                tag,
                terminal: u,
                terminal_energy: energy,
                terminal_grad_norm: grad_norm,
                terminal_norm: norm,
            };
            return Ok((outcome, record));
        }

        let step = backtrack(problem, &u, energy, &grad, tau, cfg);
        if !step.accepted {
            // no decrease even at the smallest step: numerically stationary
            record.steps_taken = k;
            let outcome = Outcome {
                tag: OutcomeTag::Undetermined,
                terminal: u,
                terminal_energy: energy,
                terminal_grad_norm: grad_norm,
                terminal_norm: norm,
            };
            return Ok((outcome, record));
        }
        if step.energy > energy {
            record.slack_steps += 1;
        }
        u = step.next;
        energy = step.energy;
        tau = (step.tau_used / cfg.shrink).min(cfg.step_init);
        k += 1;
    }
}

/// Outcome of a Newton refinement of an approximate critical point.
#[derive(Debug, Clone, PartialEq)]
pub struct Polished {
    pub field: Field,
    /// `‖u - A(u)‖ / ‖u‖` of `field`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `‖u - A(u)‖ / ‖u‖`, or 0 for `u = 0`.
pub fn fixed_point_residual(problem: &Problem, u: &[f64]) -> Result<f64> {
    let norm = problem.norm(u);
    if norm == 0.0 {
        return Ok(0.0);
    }
    let a = apply_a(problem, u)?;
    let d: Vec<f64> = u.iter().zip(a.iter()).map(|(x, y)| x - y).collect();
    Ok(problem.norm(&d) / norm)
}

/// Damped Newton on `G u - W f(u) = 0` with the exact banded Jacobian
/// `G - W diag(f'(u))`, stopping at `‖u - A(u)‖ ≤ tol ‖u‖`.
///
/// Returns the best iterate; `converged` is false when the iteration
/// stalled or collapsed to zero.
pub fn polish_critical(problem: &Problem, u: &[f64], tol: f64, max_iter: usize) -> Result<Polished> {
    problem.structure.norm(u)?;
    let mut best = Field(u.to_vec());
    let mut best_res = fixed_point_residual(problem, u)?;
    if problem.norm(u) == 0.0 || best_res <= tol {
        return Ok(Polished {
            field: best,
            residual: best_res,
            iterations: 0,
            converged: true,
        });
    }
    let gram = problem.structure.gram();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let shift: Vec<f64> = best
            .iter()
            .zip(problem.weights.iter())
            .enumerate()
            .map(|(j, (&s, w))| w * problem.model.f_prime(s, j))
            .collect();
        let jac = match gram.shifted_general(&shift).factor() {
            Ok(lu) => lu,
            Err(_) => break,
        };
        let gu = gram.matvec(&best);
        let rhs: Vec<f64> = gu
            .iter()
            .zip(problem.weak_load(&best))
            .map(|(a, b)| a - b)
            .collect();
        let delta = jac.solve(&rhs);
        let mut lambda = 1.0;
        let mut improved = false;
        while lambda >= 1.0 / 1024.0 {
            let cand = best.plus_scaled(-lambda, &delta);
            if cand.is_finite() && problem.norm(&cand) > 0.0 {
                let r = fixed_point_residual(problem, &cand)?;
                if r < best_res {
                    best = cand;
                    best_res = r;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved || best_res <= tol {
            break;
        }
    }
    let initial_norm = problem.norm(u);
    let converged = best_res <= tol && problem.norm(&best) > 1e-6 * initial_norm;
    Ok(Polished {
        field: best,
        residual: best_res,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gradient, PotentialSpec, RadialProfile, TermSpec};

    fn cubic(n: usize) -> Problem {
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

    fn bump(p: &Problem, s: f64) -> Field {
        p.grid.sample(|r| s * (1.0 - (r / 5.0).powi(2)).max(0.0).powi(4))
    }

    #[test]
    fn zero_is_stationary() {
        let p = cubic(60);
        let z = p.grid.zeros();
        let step = flow_step(&p, &z, 0.5, &FlowConfig::default()).unwrap();
        assert!(step.next.is_zero());
        let (o, rec) = integrate(&p, &z, &FlowConfig::default()).unwrap();
        assert_eq!(o.tag, OutcomeTag::ConvergedZero);
        assert_eq!(rec.steps_taken, 0);
    }

    #[test]
    fn small_data_decays() {
        let p = cubic(100);
        let (o, rec) = integrate(&p, &bump(&p, 0.5), &FlowConfig::default()).unwrap();
        assert_eq!(o.tag, OutcomeTag::ConvergedZero);
        assert!(o.terminal_norm <= 1e-3);
        assert!(rec.energies.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn negative_energy_escapes_immediately() {
        let p = cubic(100);
        let mut s = 1.0;
        while p.energy_value(&bump(&p, s)) >= 0.0 {
            s *= 2.0;
        }
        let (o, rec) = integrate(&p, &bump(&p, s), &FlowConfig::default()).unwrap();
        assert_eq!(o.tag, OutcomeTag::EscapedNegativeEnergy);
        assert_eq!(rec.steps_taken, 0);
    }

    #[test]
    fn first_order_decrease() {
        let p = cubic(100);
        let u = bump(&p, 2.0);
        let g = gradient(&p, &u).unwrap();
        let gn2 = p.norm(&g).powi(2);
        let tau = 1e-4;
        let step = flow_step(&p, &u, tau, &FlowConfig::default()).unwrap();
        assert!(step.accepted);
        let drop = p.energy_value(&u) - step.energy;
        let predicted = tau * gn2;
        assert!((drop - predicted).abs() <= 0.2 * predicted, "{drop} vs {predicted}");
    }

    #[test]
    fn budget_exhaustion_is_undetermined() {
        let p = cubic(60);
        let cfg = FlowConfig {
            max_steps: 1,
            ..Default::default()
        };
        let (o, _) = integrate(&p, &bump(&p, 2.0), &cfg).unwrap();
        assert_eq!(o.tag, OutcomeTag::Undetermined);
    }

    #[test]
    fn config_validation() {
        let bad = FlowConfig {
            shrink: 1.0,
            escape_energy: 0.0,
            ..Default::default()
        };
        assert_eq!(bad.violations().len(), 2);
        assert!(FlowConfig::default().validate().is_ok());
    }

    #[test]
    fn labels_follow_precedence() {
        let rec = TrajectoryRecord {
            cone_dist_plus: vec![1.0, 0.5, 0.05, 0.0],
            cone_dist_minus: vec![1.0, 0.09, 0.5, 0.0],
            ..Default::default()
        };
        assert_eq!(absorption_label(&rec, 0.1), AbsorptionLabel::Minus);
        assert_eq!(absorption_label(&rec, 0.01), AbsorptionLabel::Plus);
        assert_eq!(absorption_label(&rec, 1e-3), AbsorptionLabel::Plus);
        let none = TrajectoryRecord {
            cone_dist_plus: vec![1.0],
            cone_dist_minus: vec![1.0],
            ..Default::default()
        };
        assert_eq!(absorption_label(&none, 0.1), AbsorptionLabel::Neither);
    }

    #[test]
    fn polish_zero_and_converged_inputs() {
        let p = cubic(60);
        let z = p.grid.zeros();
        let r = polish_critical(&p, &z, 1e-10, 10).unwrap();
        assert!(r.field.is_zero() && r.iterations == 0);
        let u = bump(&p, 1.0);
        let r = polish_critical(&p, &u, 10.0, 10).unwrap();
        assert_eq!(r.field, u);
    }
}
