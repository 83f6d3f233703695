//! Fixed-step RK4 integration of the closed- and open-loop grid dynamics.
//!
//! The horizon is split into `macro_steps` equal intervals. Controls are
//! sampled (closed loop) or read from the schedule (open loop) at macro
//! grid points and held constant across the interval, which is integrated
//! with `substeps` RK4 steps. The disturbance is frozen per RK step at its
//! midpoint value, so breakpoints that sit on the grid are resolved
//! exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controllers::{ControlBounds, ControllerConfig, OnlineController};
use crate::error::{Error, Result};
use crate::grid_model::{rhs_into, DisturbanceProfile, GridState, NetworkParameters};
use crate::metrics::{angular_velocity_stats, Trajectory};
use crate::optimal_control::ControlSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationConfig {
    /// Horizon `T` (s).
    pub horizon: f64,
    /// Number of control intervals `n_p`.
    pub macro_steps: usize,
    /// RK4 steps per control interval.
    pub substeps: usize,
    /// Snap disturbance breakpoints onto the macro grid.
    pub breakpoint_alignment: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl IntegrationConfig {
    /// 300 intervals of 0.2 s, four RK4 steps each. The fastest voltage
    /// mode of the four-node ring sits near -32 1/s, so RK4 needs
    /// `h < 0.087 s`.
    pub fn desk() -> Self {
        Self {
            horizon: 60.0,
            macro_steps: 300,
            substeps: 4,
            breakpoint_alignment: true,
        }
    }

    /// 1500 intervals of 0.04 s, two RK4 steps each.
    pub fn paper() -> Self {
        Self {
            macro_steps: 1500,
            substeps: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.macro_steps == 0 {
            return Err(Error::validation("integration.macro_steps", "must be at least 1"));
        }
        if self.substeps == 0 {
            return Err(Error::validation("integration.substeps", "must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("integration.horizon", "must be positive"));
        }
        Ok(())
    }

    pub fn macro_dt(&self) -> f64 {
        self.horizon / self.macro_steps as f64
    }

    pub fn step_dt(&self) -> f64 {
        self.macro_dt() / self.substeps as f64
    }

    pub fn macro_time(&self, k: usize) -> f64 {
        if k == self.macro_steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.macro_steps as f64
        }
    }

    pub fn macro_times(&self) -> Vec<f64> {
        (0..=self.macro_steps).map(|k| self.macro_time(k)).collect()
    }
}

/// One classical fourth-order Runge-Kutta step of `x' = rhs(t, x)`.
pub fn rk4_step<F>(mut rhs: F, t: f64, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut ws = Rk4Workspace::new(x.len());
    let mut out = vec![0.0; x.len()];
    ws.step(&mut rhs, t, x, dt, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { t: t + dt });
    }
    Ok(out)
}

struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step<F>(&mut self, rhs: &mut F, t: f64, x: &[f64], dt: f64, out: &mut [f64])
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let h2 = dt / 2.0;
        rhs(t, x, &mut self.k1);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + h2 * self.k1[i];
        }
        rhs(t + h2, &self.tmp, &mut self.k2);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + h2 * self.k2[i];
        }
        rhs(t + h2, &self.tmp, &mut self.k3);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        rhs(t + dt, &self.tmp, &mut self.k4);
        for i in 0..x.len() {
            out[i] = x[i] + dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Per-RK-step data kept for the adjoint sweep.
#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    /// Flat state at the start of every RK step plus the final state.
    pub states: Vec<Vec<f64>>,
    /// Disturbance held during every RK step.
    pub disturbances: Vec<Vec<f64>>,
    pub step_dt: f64,
    pub substeps: usize,
}

/// Shared forward loop. `control(k, t_k, omega_k)` supplies the control
/// held on macro interval `k` (and the post-horizon value for `k = K`).
pub(crate) fn integrate_with<C>(
    params: &NetworkParameters,
    initial: &GridState,
    disturbance: &DisturbanceProfile,
    icfg: &IntegrationConfig,
    record_steps: bool,
    mut control: C,
) -> Result<(Trajectory, Option<StepRecord>)>
where
    C: FnMut(usize, f64, &[f64]) -> Result<Vec<f64>>,
{
    icfg.validate()?;
    let n = params.n();
    initial.validate(n)?;
    disturbance.validate(n)?;
    let disturbance = if icfg.breakpoint_alignment {
        disturbance.snapped(icfg.macro_dt())
    } else {
        disturbance.clone()
    };

    let k_max = icfg.macro_steps;
    let h = icfg.step_dt();
    let mut times = Vec::with_capacity(k_max + 1);
    let mut states = Vec::with_capacity(k_max + 1);
    let mut controls = Vec::with_capacity(k_max + 1);
    let mut disturbances = Vec::with_capacity(k_max + 1);
    let mut record = record_steps.then(|| StepRecord {
        states: Vec::with_capacity(k_max * icfg.substeps + 1),
        disturbances: Vec::with_capacity(k_max * icfg.substeps),
        step_dt: h,
        substeps: icfg.substeps,
    });

    let mut x = initial.to_flat();
    let mut next = vec![0.0; 3 * n];
    let mut xi = vec![0.0; n];
    let mut ws = Rk4Workspace::new(3 * n);

    for k in 0..=k_max {
        let t_k = icfg.macro_time(k);
        let u = control(k, t_k, &x[n..2 * n])?;
        if u.len() != n {
            return Err(Error::dimension("control", n, u.len()));
        }
        times.push(t_k);
        states.push(GridState::from_flat(&x));
        disturbances.push(disturbance.evaluate(t_k, n));
        controls.push(u.clone());
        if k == k_max {
            break;
        }
        for s in 0..icfg.substeps {
            let t = t_k + s as f64 * h;
            disturbance.evaluate_into(t + h / 2.0, &mut xi);
            if let Some(r) = record.as_mut() {
                r.states.push(x.clone());
                r.disturbances.push(xi.clone());
            }
            let mut rhs = |_t: f64, y: &[f64], out: &mut [f64]| rhs_into(params, y, &u, &xi, out);
            ws.step(&mut rhs, t, &x, h, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { t: t + h });
            }
            std::mem::swap(&mut x, &mut next);
        }
    }
    if let Some(r) = record.as_mut() {
        r.states.push(x.clone());
    }
    Ok((
        Trajectory {
            times,
            states,
            controls,
            disturbances,
        },
        record,
    ))
}

/// Runs the plant under an online controller sampled at the macro grid.
pub fn integrate_closed_loop(
    params: &NetworkParameters,
    initial: &GridState,
    disturbance: &DisturbanceProfile,
    controller: &ControllerConfig,
    bounds: &ControlBounds,
    icfg: &IntegrationConfig,
) -> Result<Trajectory> {
    controller.validate(params.n())?;
    let mut online = OnlineController::new(controller.clone(), bounds.clone());
    let (traj, _) = integrate_with(params, initial, disturbance, icfg, false, |_, t, omega| {
        online.sample(t, omega)
    })?;
    Ok(traj)
}

/// Maps macro intervals to schedule intervals; the macro grid must refine
/// the schedule partition.
pub(crate) fn schedule_map(schedule: &ControlSchedule, icfg: &IntegrationConfig) -> Result<usize> {
    let np = schedule.n_intervals();
    if np == 0 || icfg.macro_steps % np != 0 {
        return Err(Error::PartitionMismatch(format!(
            "{} macro steps is not a multiple of {np} schedule intervals",
            icfg.macro_steps
        )));
    }
    let ratio = icfg.macro_steps / np;
    let tol = 1e-9 * icfg.horizon;
    for (k, &t) in schedule.partition.iter().enumerate() {
        let grid_t = icfg.macro_time(k * ratio);
        if (t - grid_t).abs() > tol {
            return Err(Error::PartitionMismatch(format!(
                "partition point {k} at t = {t} is off the integration grid (expected {grid_t})"
            )));
        }
    }
    Ok(ratio)
}

/// Runs the plant with the piecewise-constant controls of `schedule`.
pub fn integrate_open_loop(
    params: &NetworkParameters,
    initial: &GridState,
    disturbance: &DisturbanceProfile,
    schedule: &ControlSchedule,
    icfg: &IntegrationConfig,
) -> Result<Trajectory> {
    Ok(integrate_open_loop_recorded(params, initial, disturbance, schedule, icfg, false)?.0)
}

pub(crate) fn integrate_open_loop_recorded(
    params: &NetworkParameters,
    initial: &GridState,
    disturbance: &DisturbanceProfile,
    schedule: &ControlSchedule,
    icfg: &IntegrationConfig,
    record: bool,
) -> Result<(Trajectory, Option<StepRecord>)> {
    icfg.validate()?;
    schedule.validate(params.n())?;
    let ratio = schedule_map(schedule, icfg)?;
    let last = schedule.n_intervals() - 1;
    integrate_with(params, initial, disturbance, icfg, record, |k, _, _| {
        Ok(schedule.values[(k / ratio).min(last)].clone())
    })
}

/// Writes the trajectory as CSV with columns
/// `t, theta_i, omega_i, freq_i, V_i, u_i, xi_i, mean_omega, sigma_omega`,
/// where `freq_i = F + omega_i / (2 pi)` in Hz.
pub fn write_trajectory_csv<W: Write>(
    traj: &Trajectory,
    nominal_frequency: f64,
    writer: W,
) -> Result<()> {
    let n = traj.n_nodes();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(trajectory_csv_header(n))?;
    let two_pi = 2.0 * std::f64::consts::PI;
    for k in 0..traj.len() {
        let s = &traj.states[k];
        let (mean, sigma) = angular_velocity_stats(&s.angular_velocity)?;
        let row = std::iter::once(traj.times[k])
            .chain(s.angle.iter().copied())
            .chain(s.angular_velocity.iter().copied())
            .chain(s.angular_velocity.iter().map(|w| nominal_frequency + w / two_pi))
            .chain(s.voltage.iter().copied())
            .chain(traj.controls[k].iter().copied())
            .chain(traj.disturbances[k].iter().copied())
            .chain([mean, sigma])
            .map(format_float);
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn trajectory_csv_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for prefix in ["theta", "omega", "freq", "V", "u", "xi"] {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    h.push("mean_omega".to_string());
    h.push("sigma_omega".to_string());
    h
}

/// 17 significant digits, `.` decimal separator.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}
