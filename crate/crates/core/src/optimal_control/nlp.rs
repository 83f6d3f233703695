//! Augmented-Lagrangian solver for box-constrained problems with smooth
//! inequality constraints `g_j(x) <= 0`.
//!
//! The outer loop updates multipliers `y_j <- max(0, y_j + rho_j g_j)` and
//! raises a constraint's penalty `rho_j` when its violation does not shrink
//! fast enough. Each inner problem minimizes
//!
//! ```text
//! Phi(x) = f(x) + sum_j rho_j / 2 (max(0, g_j + y_j / rho_j)^2 - (y_j / rho_j)^2)
//! ```
//!
//! over the box with a projected L-BFGS method: two-loop direction on the
//! free variables, projected backtracking (Armijo) line search, and pairs
//! with insufficient curvature skipped, since `Phi` is only once
//! differentiable where a multiplier term switches on.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Objective `f` and constraints `g` with their gradients.
pub trait ConstrainedProblem {
    fn dim(&self) -> usize;
    fn n_constraints(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// `(f(x), g(x))`.
    fn values(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// `(f, g, grad f, grad g_j for every j)`.
    fn gradients(&mut self, x: &[f64]) -> Result<Evaluated>;
}

#[derive(Debug, Clone)]
pub struct Evaluated {
    pub f: f64,
    pub g: Vec<f64>,
    pub grad_f: Vec<f64>,
    pub grad_g: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Outer (multiplier) iterations.
    pub max_outer_iterations: usize,
    /// Inner iterations per outer iteration.
    pub max_inner_iterations: usize,
    /// Budget on inner iterations over the whole solve.
    pub max_total_inner_iterations: usize,
    /// Wall-clock budget for the whole solve (s).
    pub time_limit_s: f64,
    /// Projected-gradient norm of the Lagrangian accepted as stationary.
    pub stationarity_tolerance: f64,
    /// Largest accepted `g_j`.
    pub constraint_tolerance: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub lbfgs_memory: usize,
    /// Relative slack kept below each tolerance, so that the returned point
    /// is strictly feasible despite the asymptotic feasibility of the
    /// multiplier method.
    pub feasibility_margin: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_outer_iterations: 500,
            max_inner_iterations: 3000,
            max_total_inner_iterations: 100_000,
            time_limit_s: 600.0,
            stationarity_tolerance: 1e-4,
            constraint_tolerance: 1e-6,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            lbfgs_memory: 20,
            feasibility_margin: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    /// Feasible and stationary within tolerance.
    Converged,
    /// Feasible but the iteration budget ran out before stationarity.
    IterationLimit,
    /// Constraints still violated when the budget ran out.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct NlpResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub penalties: Vec<f64>,
    pub status: NlpStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Projected-gradient norm of the Lagrangian at `x`.
    pub stationarity: f64,
    /// `(outer iteration, Phi)` after every accepted inner step.
    pub merit_history: Vec<(usize, f64)>,
    pub outer_log: Vec<OuterRecord>,
}

fn merit(f: f64, g: &[f64], y: &[f64], rho: &[f64]) -> f64 {
    f + g
        .iter()
        .zip(y)
        .zip(rho)
        .map(|((g, y), r)| {
            let s = (g + y / r).max(0.0);
            0.5 * r * (s * s - (y / r) * (y / r))
        })
        .sum::<f64>()
}

fn merit_gradient(e: &Evaluated, y: &[f64], rho: &[f64]) -> Vec<f64> {
    let mut grad = e.grad_f.clone();
    for j in 0..e.g.len() {
        let w = (y[j] + rho[j] * e.g[j]).max(0.0);
        if w > 0.0 {
            for (a, b) in grad.iter_mut().zip(&e.grad_g[j]) {
                *a += w * b;
            }
        }
    }
    grad
}

fn lagrangian_gradient(e: &Evaluated, y: &[f64]) -> Vec<f64> {
    let mut grad = e.grad_f.clone();
    for (yj, gg) in y.iter().zip(&e.grad_g) {
        if *yj > 0.0 {
            for (a, b) in grad.iter_mut().zip(gg) {
                *a += yj * b;
            }
        }
    }
    grad
}

/// `max_i |P(x - grad) - x|`.
pub fn projected_gradient_norm(x: &[f64], grad: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(grad)
        .zip(lo.iter().zip(hi))
        .map(|((x, g), (l, h))| ((x - g).clamp(*l, *h) - x).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Lbfgs {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    memory: usize,
}

impl Lbfgs {
    fn new(memory: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(memory),
            memory,
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        let ss = dot(&s, &s);
        let yy = dot(&y, &y);
        if sy <= 1e-10 * (ss * yy).sqrt() || sy <= 0.0 {
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// `-H grad` restricted to `free`.
    fn direction(&self, grad: &[f64], free: &[bool]) -> Vec<f64> {
        let mut q: Vec<f64> = grad
            .iter()
            .zip(free)
            .map(|(g, f)| if *f { *g } else { 0.0 })
            .collect();
        let mut alpha = vec![0.0; self.pairs.len()];
        for (k, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            let a = rho * masked_dot(s, &q, free);
            alpha[k] = a;
            for i in 0..q.len() {
                if free[i] {
                    q[i] -= a * y[i];
                }
            }
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let yy = masked_dot(y, y, free);
            if yy > 0.0 {
                let gamma = masked_dot(s, y, free) / yy;
                if gamma > 0.0 {
                    q.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for (k, (s, y, rho)) in self.pairs.iter().enumerate() {
            let b = rho * masked_dot(y, &q, free);
            for i in 0..q.len() {
                if free[i] {
                    q[i] += (alpha[k] - b) * s[i];
                }
            }
        }
        q.iter().map(|v| -v).collect()
    }
}

fn masked_dot(a: &[f64], b: &[f64], free: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(free)
        .filter(|(_, f)| **f)
        .map(|((x, y), _)| x * y)
        .sum()
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

struct InnerOutcome {
    iterations: usize,
}

#[allow(clippy::too_many_arguments)]
fn minimize_merit<P: ConstrainedProblem>(
    problem: &mut P,
    x: &mut Vec<f64>,
    y: &[f64],
    rho: &[f64],
    tol: f64,
    max_iter: usize,
    memory: usize,
    outer: usize,
    history: &mut Vec<(usize, f64)>,
) -> Result<InnerOutcome> {
    let lo = problem.lower().to_vec();
    let hi = problem.upper().to_vec();
    let mut lbfgs = Lbfgs::new(memory);
    let mut e = problem.gradients(x)?;
    let mut phi = merit(e.f, &e.g, y, rho);
    let mut grad = merit_gradient(&e, y, rho);
    history.push((outer, phi));

    for it in 0..max_iter {
        if projected_gradient_norm(x, &grad, &lo, &hi) <= tol {
            return Ok(InnerOutcome { iterations: it });
        }
        let free: Vec<bool> = (0..x.len())
            .map(|i| !((x[i] <= lo[i] && grad[i] > 0.0) || (x[i] >= hi[i] && grad[i] < 0.0)))
            .collect();
        let mut d = lbfgs.direction(&grad, &free);
        if dot(&grad, &d) >= 0.0 {
            lbfgs.pairs.clear();
            d = grad
                .iter()
                .zip(&free)
                .map(|(g, f)| if *f { -g } else { 0.0 })
                .collect();
        }
        let mut alpha = if lbfgs.pairs.is_empty() {
            let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (1.0 / dmax.max(1e-300)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..50 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            project(&mut trial, &lo, &hi);
            let step: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            let decrease = dot(&grad, &step);
            if step.iter().all(|v| *v == 0.0) || decrease >= 0.0 {
                break;
            }
            let (ft, gt) = problem.values(&trial)?;
            let phit = merit(ft, &gt, y, rho);
            if phit.is_finite() && phit <= phi + 1e-4 * decrease {
                accepted = Some((trial, step, phit));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, step, phit)) = accepted else {
            if lbfgs.pairs.is_empty() {
                // stalled on a projected-gradient step: round-off floor
                return Ok(InnerOutcome { iterations: it });
            }
            lbfgs.pairs.clear();
            continue;
        };
        e = problem.gradients(&trial)?;
        let grad_new = merit_gradient(&e, y, rho);
        let yv: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        lbfgs.push(step, yv);
        *x = trial;
        phi = phit;
        grad = grad_new;
        history.push((outer, phi));
    }
    Ok(InnerOutcome { iterations: max_iter })
}

/// Per outer iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub f: f64,
    pub max_violation: f64,
    pub stationarity: f64,
    pub inner_iterations: usize,
    pub max_penalty: f64,
    pub multipliers_updated: bool,
}

/// Minimizes `f` over the box subject to `g <= 0`, starting from `x0`.
///
/// Multipliers are only updated when the complementarity-aware violation
/// `max_j |min(-g_j, y_j / rho_j)|` has dropped below a shrinking target;
/// otherwise the penalties of the offending constraints grow.
pub fn solve<P: ConstrainedProblem>(
    problem: &mut P,
    x0: &[f64],
    settings: &SolverSettings,
) -> Result<NlpResult> {
    let m = problem.n_constraints();
    let lo = problem.lower().to_vec();
    let hi = problem.upper().to_vec();
    let mut x = x0.to_vec();
    project(&mut x, &lo, &hi);
    let mut y = vec![0.0; m];
    let mut rho = vec![settings.initial_penalty; m];
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut total_inner = 0;
    let mut outer_done = 0;
    let mut status = NlpStatus::Infeasible;
    let mut stationarity = f64::INFINITY;
    let mut eta = 0.1f64;
    let mut omega = 1e-2f64.max(settings.stationarity_tolerance);
    let started = std::time::Instant::now();
    let mut idle_rounds = 0;

    for outer in 0..settings.max_outer_iterations {
        outer_done = outer + 1;
        let budget = settings
            .max_inner_iterations
            .min(settings.max_total_inner_iterations.saturating_sub(total_inner));
        let inner = minimize_merit(
            problem,
            &mut x,
            &y,
            &rho,
            omega,
            budget,
            settings.lbfgs_memory,
            outer,
            &mut history,
        )?;
        total_inner += inner.iterations;

        let e = problem.gradients(&x)?;
        let violation: Vec<f64> = (0..m).map(|j| e.g[j].max(-y[j] / rho[j]).abs()).collect();
        let worst = violation.iter().fold(0.0f64, |a, v| a.max(*v));
        let updated = worst <= eta;
        if updated {
            for j in 0..m {
                y[j] = (y[j] + rho[j] * e.g[j]).max(0.0);
            }
            eta = (eta * 0.1).max(0.1 * settings.constraint_tolerance);
            omega = (omega * 0.1).max(settings.stationarity_tolerance);
        } else {
            for j in 0..m {
                if violation[j] > eta {
                    rho[j] = (rho[j] * settings.penalty_growth).min(settings.max_penalty);
                }
            }
        }
        let feasible = e.g.iter().all(|g| *g <= settings.constraint_tolerance);
        stationarity = projected_gradient_norm(&x, &lagrangian_gradient(&e, &y), &lo, &hi);
        log.push(OuterRecord {
            f: e.f,
            max_violation: e.g.iter().fold(0.0f64, |a, g| a.max(*g)),
            stationarity,
            inner_iterations: inner.iterations,
            max_penalty: rho.iter().fold(0.0f64, |a, r| a.max(*r)),
            multipliers_updated: updated,
        });
        if feasible && stationarity <= settings.stationarity_tolerance {
            status = NlpStatus::Converged;
            break;
        }
        status = if feasible {
            NlpStatus::IterationLimit
        } else {
            NlpStatus::Infeasible
        };
        // inner solves that cannot move any more sit on the round-off floor
        idle_rounds = if inner.iterations == 0 { idle_rounds + 1 } else { 0 };
        if total_inner >= settings.max_total_inner_iterations
            || idle_rounds >= 3
            || started.elapsed().as_secs_f64() > settings.time_limit_s
        {
            break;
        }
    }

    let (f, g) = problem.values(&x)?;
    Ok(NlpResult {
        x,
        f,
        g,
        multipliers: y,
        penalties: rho,
        status,
        outer_iterations: outer_done,
        inner_iterations: total_inner,
        stationarity,
        merit_history: history,
        outer_log: log,
    })
}
