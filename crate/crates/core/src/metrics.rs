//! Synchronization statistics, constraint losses `C_eta` and control cost `J`.
//!
//! Constraint functions `psi_eta` are non-negative exactly when the
//! constraint holds:
//!
//! * `eta = 1`: `psi = -sigma(omega)` (synchronization)
//! * `eta = 2`: `psi = (omega_max - <omega>)(<omega> - omega_min)`
//! * `eta = 2 + i`: `psi = (V_i^max - V_i)(V_i - V_i^min)`
//!
//! and each loss is `C = int_0^T min(0, psi)^2 dt + lambda min(0, psi(T))^2`,
//! with the integral taken by the trapezoidal rule on the trajectory grid.

use serde::{Deserialize, Serialize};

use crate::controllers::ControlBounds;
use crate::error::{Error, Result};
use crate::grid_model::GridState;

/// Operational limits, tolerances and terminal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSpec {
    /// Bounds on the mean angular velocity (rad/s).
    pub omega_min: f64,
    pub omega_max: f64,
    /// Per-node voltage bounds (pu).
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// Per-node control bounds (pu).
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// `lambda_eta`, one per constraint (`N + 2` entries).
    pub terminal_weights: Vec<f64>,
    /// `epsilon_eta`, one per constraint (`N + 2` entries).
    pub tolerances: Vec<f64>,
    /// Control horizon `T` (s).
    pub horizon: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self::standard(4)
    }
}

impl ConstraintSpec {
    /// `T = 60 s`, `|<omega>| <= pi/10` (0.05 Hz at 50 Hz), `V in [0.94, 1.06]`,
    /// `u in [-5, 5]`, unit terminal weights, `epsilon_1 = 1e-4` and `1e-10`
    /// for the remaining constraints.
    pub fn standard(n: usize) -> Self {
        let bound = std::f64::consts::PI / 10.0;
        let mut tolerances = vec![1e-10; n + 2];
        tolerances[0] = 1e-4;
        Self {
            omega_min: -bound,
            omega_max: bound,
            v_min: vec![0.94; n],
            v_max: vec![1.06; n],
            u_min: vec![-5.0; n],
            u_max: vec![5.0; n],
            terminal_weights: vec![1.0; n + 2],
            tolerances,
            horizon: 60.0,
        }
    }

    pub fn n_constraints(&self) -> usize {
        self.tolerances.len()
    }

    pub fn control_bounds(&self) -> ControlBounds {
        ControlBounds {
            min: self.u_min.clone(),
            max: self.u_max.clone(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v, len) in [
            ("v_min", &self.v_min, n),
            ("v_max", &self.v_max, n),
            ("u_min", &self.u_min, n),
            ("u_max", &self.u_max, n),
            ("terminal_weights", &self.terminal_weights, n + 2),
            ("tolerances", &self.tolerances, n + 2),
        ] {
            if v.len() != len {
                return Err(Error::validation(
                    format!("constraints.{name}"),
                    format!("expected {len} entries, got {}", v.len()),
                ));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::validation(format!("constraints.{name}[{i}]"), "must be finite"));
            }
        }
        if !(self.omega_min < self.omega_max) {
            return Err(Error::validation("constraints.omega_min", "omega_min must be below omega_max"));
        }
        for i in 0..n {
            if !(self.v_min[i] < self.v_max[i]) {
                return Err(Error::validation(format!("constraints.v_min[{i}]"), "v_min must be below v_max"));
            }
            if !(self.u_min[i] < self.u_max[i]) {
                return Err(Error::validation(format!("constraints.u_min[{i}]"), "u_min must be below u_max"));
            }
        }
        for (name, v) in [("terminal_weights", &self.terminal_weights), ("tolerances", &self.tolerances)] {
            if let Some(i) = v.iter().position(|x| *x < 0.0) {
                return Err(Error::validation(format!("constraints.{name}[{i}]"), "must be non-negative"));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("constraints.horizon", "horizon must be positive"));
        }
        Ok(())
    }

    fn check_eta(&self, eta: usize) -> Result<()> {
        if eta == 0 || eta > self.n_constraints() {
            return Err(Error::ConstraintIndex {
                eta,
                max: self.n_constraints(),
            });
        }
        Ok(())
    }
}

/// States and held controls sampled on a time grid.
///
/// `controls[k]` is held on `[times[k], times[k+1])`; the last entry is the
/// value the controller would apply after the horizon and does not enter
/// the cost. `disturbances[k]` is `xi(times[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<GridState>,
    pub controls: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.states.first().map_or(0, GridState::n)
    }

    pub fn final_state(&self) -> &GridState {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.times.len();
        if k < 2 {
            return Err(Error::validation("trajectory.times", "need at least two samples"));
        }
        if self.times[0] != 0.0 {
            return Err(Error::validation("trajectory.times[0]", "must start at 0"));
        }
        if let Some(i) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::validation(format!("trajectory.times[{}]", i + 1), "times must increase strictly"));
        }
        for (name, len) in [
            ("states", self.states.len()),
            ("controls", self.controls.len()),
            ("disturbances", self.disturbances.len()),
        ] {
            if len != k {
                return Err(Error::dimension(format!("trajectory.{name}"), k, len));
            }
        }
        Ok(())
    }
}

/// Composite trapezoid of samples `values` on `times`.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) / 2.0)
        .sum()
}

/// Trapezoid weights `w_k` with `sum_k w_k f_k` the composite rule.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; times.len()];
    for (k, t) in times.windows(2).enumerate() {
        let h = (t[1] - t[0]) / 2.0;
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// Mean and population standard deviation.
pub fn angular_velocity_stats(omega: &[f64]) -> Result<(f64, f64)> {
    if omega.is_empty() {
        return Err(Error::dimension("omega", 1, 0));
    }
    let (mean, var) = mean_and_variance(omega);
    Ok((mean, var.sqrt()))
}

fn mean_and_variance(omega: &[f64]) -> (f64, f64) {
    let n = omega.len() as f64;
    let mean = omega.iter().sum::<f64>() / n;
    let var = omega.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// `psi_1 = -sigma(omega)`.
pub fn psi_sync(state: &GridState) -> f64 {
    let (_, var) = mean_and_variance(&state.angular_velocity);
    -var.sqrt()
}

/// `psi_2 = (omega_max - <omega>)(<omega> - omega_min)`.
pub fn psi_mean_omega(state: &GridState, spec: &ConstraintSpec) -> f64 {
    let (mean, _) = mean_and_variance(&state.angular_velocity);
    (spec.omega_max - mean) * (mean - spec.omega_min)
}

/// `psi_{2+i} = (V_i^max - V_i)(V_i - V_i^min)`.
pub fn psi_voltage(state: &GridState, spec: &ConstraintSpec, i: usize) -> Result<f64> {
    if i >= state.n() || i >= spec.v_min.len() {
        return Err(Error::NodeIndex {
            index: i,
            n_nodes: state.n(),
        });
    }
    let v = state.voltage[i];
    Ok((spec.v_max[i] - v) * (v - spec.v_min[i]))
}

/// `psi_eta` for `eta` in `1..=N+2`.
pub fn psi(state: &GridState, spec: &ConstraintSpec, eta: usize) -> Result<f64> {
    spec.check_eta(eta)?;
    match eta {
        1 => Ok(psi_sync(state)),
        2 => Ok(psi_mean_omega(state, spec)),
        _ => psi_voltage(state, spec, eta - 3),
    }
}

/// Running loss `min(0, psi_eta)^2` on the flat state layout.
///
/// For `eta = 1` this is the variance of `omega`, which is smooth.
pub(crate) fn running_loss_flat(x: &[f64], spec: &ConstraintSpec, eta: usize) -> f64 {
    let n = x.len() / 3;
    let omega = &x[n..2 * n];
    match eta {
        1 => mean_and_variance(omega).1,
        2 => {
            let (mean, _) = mean_and_variance(omega);
            let p = (spec.omega_max - mean) * (mean - spec.omega_min);
            p.min(0.0).powi(2)
        }
        _ => {
            let i = eta - 3;
            let v = x[2 * n + i];
            let p = (spec.v_max[i] - v) * (v - spec.v_min[i]);
            p.min(0.0).powi(2)
        }
    }
}

/// Adds `scale * d/dx min(0, psi_eta)^2` into `out` (flat layout).
pub(crate) fn add_running_loss_gradient(
    x: &[f64],
    spec: &ConstraintSpec,
    eta: usize,
    scale: f64,
    out: &mut [f64],
) {
    let n = x.len() / 3;
    let omega = &x[n..2 * n];
    match eta {
        1 => {
            let (mean, _) = mean_and_variance(omega);
            for i in 0..n {
                out[n + i] += scale * 2.0 * (omega[i] - mean) / n as f64;
            }
        }
        2 => {
            let (mean, _) = mean_and_variance(omega);
            let p = (spec.omega_max - mean) * (mean - spec.omega_min);
            if p < 0.0 {
                let dp = spec.omega_max + spec.omega_min - 2.0 * mean;
                let g = scale * 2.0 * p * dp / n as f64;
                for i in 0..n {
                    out[n + i] += g;
                }
            }
        }
        _ => {
            let i = eta - 3;
            let v = x[2 * n + i];
            let p = (spec.v_max[i] - v) * (v - spec.v_min[i]);
            if p < 0.0 {
                let dp = spec.v_max[i] + spec.v_min[i] - 2.0 * v;
                out[2 * n + i] += scale * 2.0 * p * dp;
            }
        }
    }
}

/// Constraint loss `C_eta` of a trajectory.
pub fn constraint_loss(traj: &Trajectory, spec: &ConstraintSpec, eta: usize) -> Result<f64> {
    spec.check_eta(eta)?;
    traj.validate()?;
    let losses: Vec<f64> = traj
        .states
        .iter()
        .map(|s| running_loss_flat(&s.to_flat(), spec, eta))
        .collect();
    let terminal = *losses.last().expect("validated trajectory");
    Ok(trapezoid(&traj.times, &losses) + spec.terminal_weights[eta - 1] * terminal)
}

/// All `N + 2` constraint losses.
pub fn constraint_losses(traj: &Trajectory, spec: &ConstraintSpec) -> Result<Vec<f64>> {
    (1..=spec.n_constraints())
        .map(|eta| constraint_loss(traj, spec, eta))
        .collect()
}

/// `J = int_0^T sum_i u_i^2 dt` for the held (zero-order-hold) controls; the
/// integral is exact for piecewise-constant controls on the grid.
pub fn control_cost(traj: &Trajectory) -> f64 {
    traj.times
        .windows(2)
        .zip(&traj.controls)
        .map(|(t, u)| (t[1] - t[0]) * u.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

pub fn constraint_name(eta: usize) -> String {
    match eta {
        1 => "sync".to_string(),
        2 => "mean_omega".to_string(),
        _ => format!("voltage_{}", eta - 2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub eta: usize,
    pub name: String,
    pub loss: f64,
    pub tolerance: f64,
    /// `tolerance - loss`; negative when violated.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub constraints: Vec<ConstraintReport>,
}

/// Feasibility in the sense `C_eta <= epsilon_eta` for every constraint.
pub fn is_feasible(traj: &Trajectory, spec: &ConstraintSpec) -> Result<FeasibilityReport> {
    let losses = constraint_losses(traj, spec)?;
    Ok(feasibility_from_losses(&losses, spec))
}

pub fn feasibility_from_losses(losses: &[f64], spec: &ConstraintSpec) -> FeasibilityReport {
    let constraints: Vec<ConstraintReport> = losses
        .iter()
        .zip(&spec.tolerances)
        .enumerate()
        .map(|(k, (&loss, &tolerance))| ConstraintReport {
            eta: k + 1,
            name: constraint_name(k + 1),
            loss,
            tolerance,
            margin: tolerance - loss,
        })
        .collect();
    FeasibilityReport {
        feasible: constraints.iter().all(|c| c.loss <= c.tolerance),
        constraints,
    }
}
