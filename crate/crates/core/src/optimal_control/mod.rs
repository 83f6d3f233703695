//! Centralized optimal control by control parametrization.
//!
//! Controls are piecewise constant on a partition of `[0, T]`. Cost and
//! constraint losses are evaluated on the discrete RK4 trajectory and their
//! gradients come from the discrete adjoint, so they are exact for the
//! functionals the solver actually sees. The nonlinear program is solved by
//! the augmented-Lagrangian method in [`nlp`], with every constraint
//! normalized as `sqrt(C_eta / eps_eta) - (1 - margin) <= 0`.

mod adjoint;
pub mod nlp;
mod schedule;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adjoint::{hamiltonian, hamiltonian_gradient, CostateTrajectory, Functional};
pub use nlp::{NlpStatus as OcpStatus, SolverSettings};
pub use schedule::{equidistant, ControlSchedule};

use crate::error::{Error, Result};
use crate::grid_model::{DisturbanceProfile, GridState, NetworkParameters};
use crate::metrics::{constraint_losses, control_cost, ConstraintSpec, Trajectory};
use crate::simulate::{integrate_open_loop_recorded, schedule_map, IntegrationConfig, StepRecord};

/// Everything that defines one optimal-control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem {
    pub params: NetworkParameters,
    pub initial: GridState,
    pub disturbance: DisturbanceProfile,
    pub constraints: ConstraintSpec,
    pub integration: IntegrationConfig,
}

impl OcpProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.params.n();
        self.params.validate()?;
        self.initial.validate(n)?;
        self.disturbance.validate(n)?;
        self.constraints.validate(n)?;
        self.integration.validate()?;
        if (self.constraints.horizon - self.integration.horizon).abs() > 1e-12 * self.integration.horizon {
            return Err(Error::validation(
                "constraints.horizon",
                format!(
                    "{} differs from integration.horizon {}",
                    self.constraints.horizon, self.integration.horizon
                ),
            ));
        }
        Ok(())
    }

    fn n(&self) -> usize {
        self.params.n()
    }
}

/// Forward evaluation of a schedule.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    /// `C_1 .. C_{N+2}`.
    pub losses: Vec<f64>,
    pub trajectory: Trajectory,
    record: Option<StepRecord>,
}

fn evaluate_inner(schedule: &ControlSchedule, problem: &OcpProblem, record: bool) -> Result<Evaluation> {
    let (trajectory, record) = integrate_open_loop_recorded(
        &problem.params,
        &problem.initial,
        &problem.disturbance,
        schedule,
        &problem.integration,
        record,
    )?;
    Ok(Evaluation {
        cost: control_cost(&trajectory),
        losses: constraint_losses(&trajectory, &problem.constraints)?,
        trajectory,
        record,
    })
}

/// `J`, every `C_eta` and the trajectory of `schedule`.
pub fn evaluate(schedule: &ControlSchedule, problem: &OcpProblem) -> Result<Evaluation> {
    evaluate_inner(schedule, problem, true)
}

/// Costate of `functional` on the RK step grid of `evaluation`.
pub fn integrate_costate_backward(
    functional: Functional,
    evaluation: &Evaluation,
    problem: &OcpProblem,
) -> Result<CostateTrajectory> {
    let record = evaluation
        .record
        .as_ref()
        .ok_or_else(|| Error::validation("evaluation", "forward run was not recorded"))?;
    let out = adjoint::adjoint_sweep(
        &problem.params,
        &problem.constraints,
        &evaluation.trajectory.times,
        &evaluation.trajectory.controls,
        record,
        &[functional],
        true,
    )?;
    Ok(out.costates.expect("costates requested").remove(0))
}

/// Gradients (`n_p x N`) of several functionals at `schedule`.
pub fn gradients(
    functionals: &[Functional],
    schedule: &ControlSchedule,
    problem: &OcpProblem,
) -> Result<(Evaluation, Vec<Vec<Vec<f64>>>)> {
    let ratio = schedule_map(schedule, &problem.integration)?;
    let evaluation = evaluate(schedule, problem)?;
    let out = adjoint::adjoint_sweep(
        &problem.params,
        &problem.constraints,
        &evaluation.trajectory.times,
        &evaluation.trajectory.controls,
        evaluation.record.as_ref().expect("recorded"),
        functionals,
        false,
    )?;
    let n = problem.n();
    let grads = out
        .macro_gradients
        .into_iter()
        .map(|g| {
            let mut coarse = vec![vec![0.0; n]; schedule.n_intervals()];
            for (m, row) in g.iter().enumerate() {
                for (acc, v) in coarse[m / ratio].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            coarse
        })
        .collect();
    Ok((evaluation, grads))
}

/// Gradient (`n_p x N`) of one functional with respect to the schedule values.
pub fn gradient(functional: Functional, schedule: &ControlSchedule, problem: &OcpProblem) -> Result<Vec<Vec<f64>>> {
    Ok(gradients(&[functional], schedule, problem)?.1.remove(0))
}

/// Schedule resolution plus solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpSettings {
    /// Number of schedule intervals `n_p`; `None` uses one per macro step.
    pub intervals: Option<usize>,
    pub solver: SolverSettings,
}

impl Default for OcpSettings {
    fn default() -> Self {
        Self {
            intervals: None,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub schedule: ControlSchedule,
    pub objective: f64,
    pub constraint_losses: Vec<f64>,
    pub status: OcpStatus,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub multipliers: Vec<f64>,
    pub stationarity: f64,
    pub merit_history: Vec<(usize, f64)>,
    pub outer_log: Vec<nlp::OuterRecord>,
    pub trajectory: Trajectory,
    pub wall_time: f64,
}

/// Serializable digest of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSummary {
    #[serde(rename = "J")]
    pub objective: f64,
    pub constraint_losses: Vec<f64>,
    pub tolerances: Vec<f64>,
    pub status: OcpStatus,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub stationarity: f64,
    pub wall_time_s: f64,
}

impl OcpSolution {
    pub fn summary(&self, spec: &ConstraintSpec) -> OcpSummary {
        OcpSummary {
            objective: self.objective,
            constraint_losses: self.constraint_losses.clone(),
            tolerances: spec.tolerances.clone(),
            status: self.status,
            iterations: self.iterations,
            inner_iterations: self.inner_iterations,
            stationarity: self.stationarity,
            wall_time_s: self.wall_time,
        }
    }
}

struct Adapter<'a> {
    problem: &'a OcpProblem,
    template: ControlSchedule,
    lower: Vec<f64>,
    upper: Vec<f64>,
    functionals: Vec<Functional>,
    shift: f64,
}

impl Adapter<'_> {
    fn normalize(&self, losses: &[f64]) -> Vec<f64> {
        losses
            .iter()
            .zip(&self.problem.constraints.tolerances)
            .map(|(c, eps)| (c.max(0.0) / eps).sqrt() - self.shift)
            .collect()
    }
}

impl nlp::ConstrainedProblem for Adapter<'_> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn n_constraints(&self) -> usize {
        self.functionals.len() - 1
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn values(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = evaluate_inner(&self.template.with_flat(x), self.problem, false)?;
        Ok((e.cost, self.normalize(&e.losses)))
    }

    fn gradients(&mut self, x: &[f64]) -> Result<nlp::Evaluated> {
        let (e, grads) = gradients(&self.functionals, &self.template.with_flat(x), self.problem)?;
        let flat = |g: &Vec<Vec<f64>>| g.iter().flatten().copied().collect::<Vec<f64>>();
        let grad_g = e
            .losses
            .iter()
            .zip(&self.problem.constraints.tolerances)
            .zip(&grads[1..])
            .map(|((c, eps), g)| {
                // d sqrt(C / eps) = dC / (2 sqrt(C eps))
                let scale = if *c > 0.0 { 0.5 / (c * eps).sqrt() } else { 0.0 };
                flat(g).into_iter().map(|v| v * scale).collect()
            })
            .collect();
        Ok(nlp::Evaluated {
            f: e.cost,
            g: self.normalize(&e.losses),
            grad_f: flat(&grads[0]),
            grad_g,
        })
    }
}

/// Minimizes `J` subject to `C_eta <= eps_eta` and the control box,
/// starting from `initial` (zero schedule when `None`).
pub fn solve_ocp(
    problem: &OcpProblem,
    settings: &OcpSettings,
    initial: Option<&ControlSchedule>,
) -> Result<OcpSolution> {
    let start = Instant::now();
    problem.validate()?;
    let n = problem.n();
    let spec = &problem.constraints;
    let template = match initial {
        Some(s) => {
            s.validate(n)?;
            s.clone()
        }
        None => ControlSchedule::zeros(
            problem.integration.horizon,
            settings.intervals.unwrap_or(problem.integration.macro_steps),
            n,
        ),
    };
    schedule_map(&template, &problem.integration)?;
    let n_p = template.n_intervals();
    let mut adapter = Adapter {
        problem,
        lower: spec.u_min.iter().copied().cycle().take(n * n_p).collect(),
        upper: spec.u_max.iter().copied().cycle().take(n * n_p).collect(),
        functionals: Functional::all(spec.n_constraints()),
        shift: 1.0 - settings.solver.feasibility_margin,
        template,
    };
    let x0 = adapter.template.to_flat();
    let result = nlp::solve(&mut adapter, &x0, &settings.solver)?;

    let schedule = adapter.template.with_flat(&result.x);
    let evaluation = evaluate_inner(&schedule, problem, false)?;
    let feasible = evaluation
        .losses
        .iter()
        .zip(&spec.tolerances)
        .all(|(c, eps)| c <= eps);
    let status = match result.status {
        OcpStatus::Converged if feasible => OcpStatus::Converged,
        _ if feasible => OcpStatus::IterationLimit,
        _ => OcpStatus::Infeasible,
    };
    Ok(OcpSolution {
        schedule,
        objective: evaluation.cost,
        constraint_losses: evaluation.losses,
        status,
        iterations: result.outer_iterations,
        inner_iterations: result.inner_iterations,
        multipliers: result.multipliers,
        stationarity: result.stationarity,
        merit_history: result.merit_history,
        outer_log: result.outer_log,
        trajectory: evaluation.trajectory,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::find_steady_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(disturbance: DisturbanceProfile, macro_steps: usize) -> OcpProblem {
        let params = NetworkParameters::four_node_ring();
        let initial = find_steady_state(&params, &NetworkParameters::four_node_tabulated_state()).unwrap();
        OcpProblem {
            params,
            initial,
            disturbance,
            constraints: ConstraintSpec::standard(4),
            integration: IntegrationConfig {
                macro_steps,
                ..IntegrationConfig::desk()
            },
        }
    }

    #[test]
    fn zero_schedule_without_disturbance_is_free_and_feasible() {
        let p = problem(DisturbanceProfile::none(), 300);
        let e = evaluate(&ControlSchedule::zeros(60.0, 60, 4), &p).unwrap();
        assert_eq!(e.cost, 0.0);
        assert!(e.losses.iter().all(|c| *c < 1e-20), "{:?}", e.losses);
        let g = gradient(Functional::Cost, &ControlSchedule::zeros(60.0, 60, 4), &p).unwrap();
        assert!(g.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn persistent_disturbance_violates_mean_frequency() {
        let p = problem(DisturbanceProfile::persistent(), 300);
        let e = evaluate(&ControlSchedule::zeros(60.0, 300, 4), &p).unwrap();
        assert!(e.losses[1] > p.constraints.tolerances[1]);
    }

    #[test]
    fn cost_costate_vanishes_for_zero_control() {
        let p = problem(DisturbanceProfile::temporary(), 300);
        let e = evaluate(&ControlSchedule::zeros(60.0, 300, 4), &p).unwrap();
        let z = integrate_costate_backward(Functional::Cost, &e, &p).unwrap();
        assert!(z.values.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(z.times.len(), z.values.len());
    }

    #[test]
    fn inactive_constraint_has_zero_costate() {
        // voltages stay well inside [0.94, 1.06] under the temporary step
        let p = problem(DisturbanceProfile::temporary(), 300);
        let e = evaluate(&ControlSchedule::zeros(60.0, 300, 4), &p).unwrap();
        for eta in 3..=6 {
            assert_eq!(e.losses[eta - 1], 0.0);
            let z = integrate_costate_backward(Functional::Constraint(eta), &e, &p).unwrap();
            assert!(z.values.iter().flatten().all(|v| *v == 0.0));
        }
        let z = integrate_costate_backward(Functional::Constraint(1), &e, &p).unwrap();
        assert!(z.terminal().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn doubling_a_control_doubles_its_cost_gradient() {
        let p = problem(DisturbanceProfile::none(), 300);
        let mut s = ControlSchedule::zeros(60.0, 20, 4);
        s.values[3][1] = 0.25;
        let g1 = gradient(Functional::Cost, &s, &p).unwrap();
        s.values[3][1] = 0.5;
        let g2 = gradient(Functional::Cost, &s, &p).unwrap();
        assert!((g2[3][1] - 2.0 * g1[3][1]).abs() < 1e-12);
        assert!((g1[3][1] - 2.0 * 0.25 * 3.0).abs() < 1e-12);
    }

    /// Tight voltage band and persistent step: every constraint is active.
    fn active_problem() -> OcpProblem {
        let mut p = problem(DisturbanceProfile::persistent(), 300);
        p.constraints.v_min = vec![0.992; 4];
        p.constraints.v_max = vec![0.994; 4];
        p
    }

    #[test]
    fn adjoint_gradients_match_central_differences() {
        let p = active_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ControlSchedule::zeros(60.0, 20, 4);
        for v in s.values.iter_mut().flatten() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let fs = Functional::all(6);
        let (e, grads) = gradients(&fs, &s, &p).unwrap();
        assert!(e.losses.iter().all(|c| *c > 0.0), "{:?}", e.losses);
        let value = |s: &ControlSchedule, f: Functional| {
            let e = evaluate_inner(s, &p, false).unwrap();
            match f {
                Functional::Cost => e.cost,
                Functional::Constraint(eta) => e.losses[eta - 1],
            }
        };
        for (f, g) in fs.iter().zip(&grads) {
            for (k, i) in [(0, 0), (4, 1), (9, 2), (13, 3), (19, 0)] {
                let h = 1e-6;
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp.values[k][i] += h;
                sm.values[k][i] -= h;
                let fd = (value(&sp, *f) - value(&sm, *f)) / (2.0 * h);
                let err = (fd - g[k][i]).abs();
                assert!(
                    err <= 1e-4 * g[k][i].abs() || err <= 1e-8,
                    "{}: ({k},{i}) adjoint {} fd {}",
                    f.label(),
                    g[k][i],
                    fd
                );
            }
        }
    }

    #[test]
    fn prolonged_schedule_evaluates_identically() {
        let p = problem(DisturbanceProfile::temporary(), 300);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ControlSchedule::zeros(60.0, 30, 4);
        for v in s.values.iter_mut().flatten() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let a = evaluate(&s, &p).unwrap();
        let b = evaluate(&s.prolong(2), &p).unwrap();
        assert!((a.cost - b.cost).abs() <= 1e-12 * a.cost);
        for (x, y) in a.losses.iter().zip(&b.losses) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn zero_disturbance_solve_converges_immediately() {
        let p = problem(DisturbanceProfile::none(), 300);
        let settings = OcpSettings {
            intervals: Some(20),
            ..OcpSettings::default()
        };
        let sol = solve_ocp(&p, &settings, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Converged);
        assert!(sol.objective <= 1e-8);
        assert!(sol.schedule.values.iter().flatten().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn misaligned_schedule_is_rejected() {
        let p = problem(DisturbanceProfile::none(), 300);
        let s = ControlSchedule::zeros(60.0, 7, 4);
        assert!(matches!(evaluate(&s, &p), Err(Error::PartitionMismatch(_))));
    }
}
