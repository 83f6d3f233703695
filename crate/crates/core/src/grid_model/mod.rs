//! Third-order machine model on a lossless network.
//!
//! Each node carries a rotor angle `theta`, an angular-velocity deviation
//! `omega` from the synchronous reference and a transient voltage `V`:
//!
//! ```text
//! theta_i' = omega_i
//! M_i omega_i' = P_in,i + xi_i - P_e,i + u_i - D_i omega_i
//! T'_do,i V_i' = E_f,i - V_i + I_d,i (X_d,i - X'_d,i)
//! P_e,i = sum_j B_ij sin(theta_i - theta_j) V_i V_j
//! I_d,i = sum_j B_ij cos(theta_i - theta_j) V_j
//! ```
//!
//! The flat state layout used by the integrators is
//! `[theta_0..theta_{N-1}, omega_0..omega_{N-1}, V_0..V_{N-1}]`.

mod disturbance;
mod steady_state;

pub use disturbance::{DisturbanceKind, DisturbanceProfile, DisturbanceStep};
pub use steady_state::find_steady_state;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-node machine constants and the line susceptance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParameters {
    pub n_nodes: usize,
    /// Inertia coefficients `M_i` (s^2).
    pub inertia: Vec<f64>,
    /// Damping coefficients `D_i` (pu).
    pub damping: Vec<f64>,
    /// Exciter voltages `E_f,i` (pu).
    pub exciter_voltage: Vec<f64>,
    /// Direct-axis transient time constants `T'_do,i` (s).
    pub transient_time: Vec<f64>,
    /// Direct synchronous reactances `X_d,i` (pu).
    pub reactance: Vec<f64>,
    /// Direct synchronous transient reactances `X'_d,i` (pu).
    pub transient_reactance: Vec<f64>,
    /// Susceptance matrix `B_ij` (pu), row-major, including the diagonal.
    pub susceptance: Vec<Vec<f64>>,
    /// Net injections `P_in,i` (pu); positive for generators.
    pub net_injection: Vec<f64>,
    /// Nominal grid frequency `F` (Hz).
    pub nominal_frequency: f64,
}

impl Default for NetworkParameters {
    fn default() -> Self {
        Self::four_node_ring()
    }
}

impl NetworkParameters {
    /// The four-node ring test system (mechanical power minus load gives
    /// the net injections `(-0.9, 0.4, -0.7, 1.2)`).
    pub fn four_node_ring() -> Self {
        let mut b = vec![vec![0.0; 4]; 4];
        let lines = [(0, 1, 34.13), (0, 3, 28.0), (1, 2, 44.1), (2, 3, 22.1)];
        for &(i, j, v) in &lines {
            b[i][j] = v;
            b[j][i] = v;
        }
        for (i, d) in [-66.1, -82.2, -69.6, -53.6].into_iter().enumerate() {
            b[i][i] = d;
        }
        let mechanical = [1.1, 1.4, 0.8, 2.2];
        let load = [2.0, 1.0, 1.5, 1.0];
        Self {
            n_nodes: 4,
            inertia: vec![5.22, 3.98, 4.49, 4.22],
            damping: vec![1.60, 1.22, 1.38, 1.42],
            exciter_voltage: vec![7.01, 6.09, 6.29, 6.67],
            transient_time: vec![5.54, 7.41, 6.11, 6.22],
            reactance: vec![1.84, 1.62, 1.80, 1.94],
            transient_reactance: vec![0.25, 0.17, 0.36, 0.44],
            susceptance: b,
            net_injection: mechanical
                .iter()
                .zip(load.iter())
                .map(|(m, l)| m - l)
                .collect(),
            nominal_frequency: 50.0,
        }
    }

    /// Tabulated operating point of the four-node ring (three significant
    /// figures); a good Newton starting guess, not an exact fixed point.
    pub fn four_node_tabulated_state() -> GridState {
        GridState {
            angle: vec![0.0911, 0.0973, 0.0930, 0.115],
            angular_velocity: vec![0.0; 4],
            voltage: vec![0.998, 0.997, 1.0, 1.0],
        }
    }

    pub fn n(&self) -> usize {
        self.n_nodes
    }

    /// Synchronous reference `Omega = 2 pi F` (rad/s).
    pub fn reference_angular_velocity(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.nominal_frequency
    }

    /// Checks array lengths, symmetry of `B` and the sign constraints on
    /// `M`, `D` and `T'_do`.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        if n < 2 {
            return Err(Error::validation(
                "network.n_nodes",
                format!("need at least 2 nodes, got {n}"),
            ));
        }
        let arrays: [(&str, &Vec<f64>); 8] = [
            ("inertia", &self.inertia),
            ("damping", &self.damping),
            ("exciter_voltage", &self.exciter_voltage),
            ("transient_time", &self.transient_time),
            ("reactance", &self.reactance),
            ("transient_reactance", &self.transient_reactance),
            ("net_injection", &self.net_injection),
            ("susceptance", &vec![0.0; self.susceptance.len()]),
        ];
        for (name, arr) in arrays {
            if arr.len() != n {
                return Err(Error::validation(
                    format!("network.{name}"),
                    format!("expected {n} entries, got {}", arr.len()),
                ));
            }
        }
        for (name, arr) in [
            ("inertia", &self.inertia),
            ("damping", &self.damping),
            ("exciter_voltage", &self.exciter_voltage),
            ("transient_time", &self.transient_time),
            ("reactance", &self.reactance),
            ("transient_reactance", &self.transient_reactance),
            ("net_injection", &self.net_injection),
        ] {
            if let Some(i) = arr.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(
                    format!("network.{name}[{i}]"),
                    "value must be finite",
                ));
            }
        }
        for i in 0..n {
            if self.inertia[i] <= 0.0 {
                return Err(Error::validation(
                    format!("network.inertia[{i}]"),
                    "inertia must be positive",
                ));
            }
            if self.transient_time[i] <= 0.0 {
                return Err(Error::validation(
                    format!("network.transient_time[{i}]"),
                    "transient time constant must be positive",
                ));
            }
            if self.damping[i] < 0.0 {
                return Err(Error::validation(
                    format!("network.damping[{i}]"),
                    "damping must be non-negative",
                ));
            }
        }
        for (i, row) in self.susceptance.iter().enumerate() {
            if row.len() != n {
                return Err(Error::validation(
                    format!("network.susceptance[{i}]"),
                    format!("expected {n} entries, got {}", row.len()),
                ));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(
                    format!("network.susceptance[{i}][{j}]"),
                    "value must be finite",
                ));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (self.susceptance[i][j], self.susceptance[j][i]);
                if a != b {
                    return Err(Error::validation(
                        format!("network.susceptance[{i}][{j}]"),
                        format!("asymmetric pair: B[{i}][{j}] = {a} but B[{j}][{i}] = {b}"),
                    ));
                }
            }
        }
        if !(self.nominal_frequency.is_finite() && self.nominal_frequency > 0.0) {
            return Err(Error::validation(
                "network.nominal_frequency",
                "must be positive and finite",
            ));
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n_nodes {
            return Err(Error::NodeIndex {
                index: i,
                n_nodes: self.n_nodes,
            });
        }
        Ok(())
    }
}

/// Machine state: rotor angles (rad), angular-velocity deviations (rad/s)
/// and voltages (pu). Also used as the container for state derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridState {
    pub angle: Vec<f64>,
    pub angular_velocity: Vec<f64>,
    pub voltage: Vec<f64>,
}

impl GridState {
    pub fn new(angle: Vec<f64>, angular_velocity: Vec<f64>, voltage: Vec<f64>) -> Result<Self> {
        let s = Self {
            angle,
            angular_velocity,
            voltage,
        };
        s.validate(s.angle.len())?;
        Ok(s)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            angle: vec![0.0; n],
            angular_velocity: vec![0.0; n],
            voltage: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.angle.len()
    }

    /// Checks that every component has `n` finite entries.
    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [
            ("angle", &self.angle),
            ("angular_velocity", &self.angular_velocity),
            ("voltage", &self.voltage),
        ] {
            if v.len() != n {
                return Err(Error::dimension(format!("state.{name}"), n, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("state.{name}")));
            }
        }
        Ok(())
    }

    /// Flat `3N` layout `[theta, omega, V]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 * self.n());
        x.extend_from_slice(&self.angle);
        x.extend_from_slice(&self.angular_velocity);
        x.extend_from_slice(&self.voltage);
        x
    }

    pub fn from_flat(x: &[f64]) -> Self {
        let n = x.len() / 3;
        Self {
            angle: x[..n].to_vec(),
            angular_velocity: x[n..2 * n].to_vec(),
            voltage: x[2 * n..3 * n].to_vec(),
        }
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &GridState) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Electrical power `P_e,i = sum_j B_ij sin(theta_i - theta_j) V_i V_j`.
pub fn electrical_power(params: &NetworkParameters, state: &GridState, i: usize) -> Result<f64> {
    params.check_index(i)?;
    state.validate(params.n())?;
    Ok(electrical_power_at(params, &state.angle, &state.voltage, i))
}

/// Armature current `I_d,i = sum_j B_ij cos(theta_i - theta_j) V_j`.
pub fn armature_current(params: &NetworkParameters, state: &GridState, i: usize) -> Result<f64> {
    params.check_index(i)?;
    state.validate(params.n())?;
    Ok(armature_current_at(params, &state.angle, &state.voltage, i))
}

#[inline]
pub(crate) fn electrical_power_at(p: &NetworkParameters, theta: &[f64], v: &[f64], i: usize) -> f64 {
    let row = &p.susceptance[i];
    let mut s = 0.0;
    for j in 0..theta.len() {
        if j != i && row[j] != 0.0 {
            s += row[j] * (theta[i] - theta[j]).sin() * v[j];
        }
    }
    s * v[i]
}

#[inline]
pub(crate) fn armature_current_at(p: &NetworkParameters, theta: &[f64], v: &[f64], i: usize) -> f64 {
    let row = &p.susceptance[i];
    let mut s = row[i] * v[i];
    for j in 0..theta.len() {
        if j != i && row[j] != 0.0 {
            s += row[j] * (theta[i] - theta[j]).cos() * v[j];
        }
    }
    s
}

/// Right-hand side on the flat layout. No checks; `out` must have length `3N`.
pub fn rhs_into(p: &NetworkParameters, x: &[f64], u: &[f64], xi: &[f64], out: &mut [f64]) {
    let n = p.n_nodes;
    let (theta, rest) = x.split_at(n);
    let (omega, v) = rest.split_at(n);
    for i in 0..n {
        let pe = electrical_power_at(p, theta, v, i);
        let id = armature_current_at(p, theta, v, i);
        out[i] = omega[i];
        out[n + i] = (p.net_injection[i] + xi[i] - pe + u[i] - p.damping[i] * omega[i]) / p.inertia[i];
        out[2 * n + i] = (p.exciter_voltage[i] - v[i]
            + id * (p.reactance[i] - p.transient_reactance[i]))
            / p.transient_time[i];
    }
}

/// Time derivative of the state under control `u` and disturbance `xi`.
pub fn dynamics_rhs(
    params: &NetworkParameters,
    state: &GridState,
    control: &[f64],
    disturbance: &[f64],
) -> Result<GridState> {
    let n = params.n();
    state.validate(n)?;
    for (name, v) in [("control", control), ("disturbance", disturbance)] {
        if v.len() != n {
            return Err(Error::dimension(name, n, v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    let x = state.to_flat();
    let mut out = vec![0.0; 3 * n];
    rhs_into(params, &x, control, disturbance, &mut out);
    Ok(GridState::from_flat(&out))
}

/// Jacobian of the right-hand side with respect to the flat state.
///
/// Control and disturbance enter additively, so the Jacobian depends on the
/// state only.
pub fn state_jacobian_into(p: &NetworkParameters, x: &[f64], jac: &mut DMatrix<f64>) {
    let n = p.n_nodes;
    let (theta, rest) = x.split_at(n);
    let v = &rest[n..];
    jac.fill(0.0);
    for i in 0..n {
        let row = &p.susceptance[i];
        let mi = p.inertia[i];
        let gain = (p.reactance[i] - p.transient_reactance[i]) / p.transient_time[i];
        jac[(i, n + i)] = 1.0;
        jac[(n + i, n + i)] = -p.damping[i] / mi;
        let mut dpe_dtheta_i = 0.0;
        let mut dpe_dv_i = 0.0;
        let mut did_dtheta_i = 0.0;
        for j in 0..n {
            if j == i || row[j] == 0.0 {
                continue;
            }
            let d = theta[i] - theta[j];
            let (s, c) = d.sin_cos();
            let b = row[j];
            // P_e
            dpe_dtheta_i += b * c * v[i] * v[j];
            jac[(n + i, j)] = b * c * v[i] * v[j] / mi;
            dpe_dv_i += b * s * v[j];
            jac[(n + i, 2 * n + j)] = -b * s * v[i] / mi;
            // I_d
            did_dtheta_i -= b * s * v[j];
            jac[(2 * n + i, j)] = gain * b * s * v[j];
            jac[(2 * n + i, 2 * n + j)] = gain * b * c;
        }
        jac[(n + i, i)] = -dpe_dtheta_i / mi;
        jac[(n + i, 2 * n + i)] = -dpe_dv_i / mi;
        jac[(2 * n + i, i)] = gain * did_dtheta_i;
        jac[(2 * n + i, 2 * n + i)] = (-1.0 + (p.reactance[i] - p.transient_reactance[i]) * row[i])
            / p.transient_time[i];
    }
}

/// Allocating wrapper around [`state_jacobian_into`].
pub fn state_jacobian(p: &NetworkParameters, state: &GridState) -> Result<DMatrix<f64>> {
    state.validate(p.n())?;
    let n = p.n();
    let mut jac = DMatrix::zeros(3 * n, 3 * n);
    state_jacobian_into(p, &state.to_flat(), &mut jac);
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_node() -> NetworkParameters {
        NetworkParameters {
            n_nodes: 2,
            inertia: vec![1.0; 2],
            damping: vec![0.5; 2],
            exciter_voltage: vec![1.0; 2],
            transient_time: vec![1.0; 2],
            reactance: vec![1.0; 2],
            transient_reactance: vec![0.5; 2],
            susceptance: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            net_injection: vec![0.0; 2],
            nominal_frequency: 50.0,
        }
    }

    #[test]
    fn power_zero_at_equal_angles() {
        let p = NetworkParameters::four_node_ring();
        let s = GridState::new(vec![0.3; 4], vec![0.0; 4], vec![1.1, 0.9, 1.0, 0.95]).unwrap();
        for i in 0..4 {
            assert_eq!(electrical_power(&p, &s, i).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_node_quarter_turn() {
        let p = two_node();
        let s = GridState::new(
            vec![std::f64::consts::FRAC_PI_2, 0.0],
            vec![0.0; 2],
            vec![1.0; 2],
        )
        .unwrap();
        assert_abs_diff_eq!(electrical_power(&p, &s, 0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(electrical_power(&p, &s, 1).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(armature_current(&p, &s, 0).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn armature_current_row_sums_at_equal_angles() {
        let p = NetworkParameters::four_node_ring();
        let s = GridState::new(vec![0.0; 4], vec![0.0; 4], vec![1.0; 4]).unwrap();
        for i in 0..4 {
            let row_sum: f64 = p.susceptance[i].iter().sum();
            assert_abs_diff_eq!(armature_current(&p, &s, i).unwrap(), row_sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn index_out_of_range() {
        let p = two_node();
        let s = GridState::zeros(2);
        assert!(matches!(
            electrical_power(&p, &s, 2),
            Err(Error::NodeIndex { index: 2, n_nodes: 2 })
        ));
        assert!(armature_current(&p, &s, 5).is_err());
    }

    #[test]
    fn tabulated_state_is_near_equilibrium() {
        // The tabulated point carries three significant figures; the voltage
        // balance is the most sensitive part because I_d sums large
        // susceptances of opposite sign.
        let p = NetworkParameters::four_node_ring();
        let s = NetworkParameters::four_node_tabulated_state();
        for i in 0..4 {
            let pe = electrical_power(&p, &s, i).unwrap();
            assert!((pe - p.net_injection[i]).abs() < 5e-2, "node {i}: {pe}");
        }
        let d = dynamics_rhs(&p, &s, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(d.angle.iter().all(|v| *v == 0.0));
        assert!(d.angular_velocity.iter().all(|v| v.abs() < 2e-2));
        assert!(d.voltage.iter().all(|v| v.abs() < 6e-2));
        for i in 0..4 {
            let id = armature_current(&p, &s, i).unwrap();
            let r = p.exciter_voltage[i] - s.voltage[i]
                + id * (p.reactance[i] - p.transient_reactance[i]);
            assert!(r.abs() < 0.45, "node {i}: {r}");
        }
    }

    #[test]
    fn omega_zero_gives_zero_angle_rate() {
        let p = NetworkParameters::four_node_ring();
        let s = GridState::new(vec![0.1, -0.2, 0.3, 0.0], vec![0.0; 4], vec![1.0; 4]).unwrap();
        let d = dynamics_rhs(&p, &s, &[0.3; 4], &[0.0; 4]).unwrap();
        assert!(d.angle.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disturbance_shifts_only_its_node() {
        let p = NetworkParameters::four_node_ring();
        let s = NetworkParameters::four_node_tabulated_state();
        let base = dynamics_rhs(&p, &s, &[0.0; 4], &[0.0; 4]).unwrap();
        let hit = dynamics_rhs(&p, &s, &[0.0; 4], &[-2.0, 0.0, 0.0, 0.0]).unwrap();
        let d0 = hit.angular_velocity[0] - base.angular_velocity[0];
        // -2.0 / 5.22
        assert_abs_diff_eq!(d0, -0.383_141_762_452_107_3, epsilon = 1e-12);
        for i in 1..4 {
            assert_eq!(hit.angular_velocity[i], base.angular_velocity[i]);
        }
    }

    #[test]
    fn rhs_rejects_bad_input() {
        let p = NetworkParameters::four_node_ring();
        let s = NetworkParameters::four_node_tabulated_state();
        assert!(matches!(
            dynamics_rhs(&p, &s, &[0.0; 3], &[0.0; 4]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            dynamics_rhs(&p, &s, &[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 4]),
            Err(Error::NonFinite(_))
        ));
        let mut bad = s.clone();
        bad.voltage[2] = f64::INFINITY;
        assert!(dynamics_rhs(&p, &bad, &[0.0; 4], &[0.0; 4]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = NetworkParameters::four_node_ring();
        let s = GridState::new(
            vec![0.05, 0.2, -0.1, 0.4],
            vec![0.01, -0.02, 0.03, 0.0],
            vec![0.97, 1.02, 1.0, 0.99],
        )
        .unwrap();
        let jac = state_jacobian(&p, &s).unwrap();
        let x = s.to_flat();
        let u = [0.1, -0.2, 0.0, 0.3];
        let xi = [0.0; 4];
        let h = 1e-6;
        for c in 0..12 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let mut fp = vec![0.0; 12];
            let mut fm = vec![0.0; 12];
            rhs_into(&p, &xp, &u, &xi, &mut fp);
            rhs_into(&p, &xm, &u, &xi, &mut fm);
            for r in 0..12 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                let err = (fd - jac[(r, c)]).abs();
                assert!(
                    err <= 1e-6 * fd.abs().max(1.0),
                    "entry ({r},{c}): analytic {} fd {fd}",
                    jac[(r, c)]
                );
            }
        }
    }

    #[test]
    fn validation_names_asymmetric_pair() {
        let mut p = NetworkParameters::four_node_ring();
        p.susceptance[0][1] = 30.0;
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("susceptance[0][1]"), "{err}");
        let mut p = NetworkParameters::four_node_ring();
        p.inertia[2] = 0.0;
        assert!(p.validate().is_err());
        let mut p = NetworkParameters::four_node_ring();
        p.damping.pop();
        assert!(p.validate().is_err());
        assert!(NetworkParameters::four_node_ring().validate().is_ok());
    }
}
