//! Distributed frequency controllers evaluated online at sample times.
//!
//! * LLF: `u_i = -nu_i omega_i`
//! * ILF: `u_i = -(1/kappa_i) int_0^t omega_i`
//! * GAB: `u_i = -(1/mu_i) int_0^t sum_j A_ij omega_j`
//!
//! Integrals are accumulated with the trapezoidal rule on the sample times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlLaw {
    None,
    Llf,
    Ilf,
    Gab,
}

impl ControlLaw {
    pub fn name(self) -> &'static str {
        match self {
            ControlLaw::None => "none",
            ControlLaw::Llf => "llf",
            ControlLaw::Ilf => "ilf",
            ControlLaw::Gab => "gab",
        }
    }
}

/// A gain given either once for all nodes or per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Uniform(f64),
    PerNode(Vec<f64>),
}

impl Gain {
    pub fn resolve(&self, n: usize) -> Vec<f64> {
        match self {
            Gain::Uniform(g) => vec![*g; n],
            Gain::PerNode(v) => v.clone(),
        }
    }

    fn validate(&self, n: usize, path: &str) -> Result<()> {
        let v = self.resolve(n);
        if v.len() != n {
            return Err(Error::validation(path, format!("expected {n} gains, got {}", v.len())));
        }
        if let Some(i) = v.iter().position(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::validation(format!("{path}[{i}]"), "gain must be positive"));
        }
        Ok(())
    }
}

/// Communication topology for the gather-and-broadcast law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    /// `A_ij = 1` for all pairs.
    Full,
    /// `A = I`, which turns GAB into ILF.
    Identity,
    Matrix(Vec<Vec<u8>>),
}

impl Adjacency {
    pub fn to_matrix(&self, n: usize) -> Vec<Vec<u8>> {
        match self {
            Adjacency::Full => vec![vec![1; n]; n],
            Adjacency::Identity => (0..n)
                .map(|i| (0..n).map(|j| u8::from(i == j)).collect())
                .collect(),
            Adjacency::Matrix(m) => m.clone(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let m = self.to_matrix(n);
        if m.len() != n || m.iter().any(|r| r.len() != n) {
            return Err(Error::validation("controller.adjacency", format!("must be {n}x{n}")));
        }
        for i in 0..n {
            for j in 0..n {
                if m[i][j] > 1 {
                    return Err(Error::validation(
                        format!("controller.adjacency[{i}][{j}]"),
                        "entries must be 0 or 1",
                    ));
                }
                if m[i][j] != m[j][i] {
                    return Err(Error::validation(
                        format!("controller.adjacency[{i}][{j}]"),
                        "adjacency must be symmetric",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Box `[u_min, u_max]` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ControlBounds {
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Self {
        Self {
            min: vec![lo; n],
            max: vec![hi; n],
        }
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.min).zip(&self.max) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub law: ControlLaw,
    /// Row label; defaults to the law name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `nu_i` (1/s).
    pub llf_gain: Gain,
    /// `kappa_i` (1/s^2).
    pub ilf_gain: Gain,
    /// `mu_i` (1/s^2).
    pub gab_gain: Gain,
    pub adjacency: Adjacency,
    /// Project outputs onto the control bounds.
    pub clamp: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            law: ControlLaw::None,
            name: None,
            llf_gain: Gain::Uniform(1.0),
            ilf_gain: Gain::Uniform(15.0),
            gab_gain: Gain::Uniform(60.0),
            adjacency: Adjacency::Full,
            clamp: true,
        }
    }
}

impl ControllerConfig {
    pub fn with_law(law: ControlLaw) -> Self {
        Self {
            law,
            ..Self::default()
        }
    }

    pub fn llf(nu: f64) -> Self {
        Self {
            llf_gain: Gain::Uniform(nu),
            ..Self::with_law(ControlLaw::Llf)
        }
    }

    pub fn ilf(kappa: f64) -> Self {
        Self {
            ilf_gain: Gain::Uniform(kappa),
            ..Self::with_law(ControlLaw::Ilf)
        }
    }

    pub fn gab(mu: f64) -> Self {
        Self {
            gab_gain: Gain::Uniform(mu),
            ..Self::with_law(ControlLaw::Gab)
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.law.name().to_string())
    }

    /// Validates the gains of the active law and the adjacency.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self.law {
            ControlLaw::None => Ok(()),
            ControlLaw::Llf => self.llf_gain.validate(n, "controller.llf_gain"),
            ControlLaw::Ilf => self.ilf_gain.validate(n, "controller.ilf_gain"),
            ControlLaw::Gab => {
                self.gab_gain.validate(n, "controller.gab_gain")?;
                self.adjacency.validate(n)
            }
        }
    }

    fn finish(&self, mut u: Vec<f64>, bounds: &ControlBounds) -> Vec<f64> {
        if self.clamp {
            bounds.clamp(&mut u);
        }
        u
    }

    /// Proportional law `u_i = -nu_i omega_i`.
    pub fn llf_control(&self, omega: &[f64], bounds: &ControlBounds) -> Result<Vec<f64>> {
        let nu = self.llf_gain.resolve(omega.len());
        check_len("llf gains", omega.len(), nu.len())?;
        let u = omega.iter().zip(&nu).map(|(w, g)| -g * w).collect();
        Ok(self.finish(u, bounds))
    }

    /// Integral law `u_i = -(1/kappa_i) I_i`.
    pub fn ilf_control(&self, state: &ControllerState, bounds: &ControlBounds) -> Result<Vec<f64>> {
        let n = state.accumulated_integral.len();
        let kappa = self.ilf_gain.resolve(n);
        check_len("ilf gains", n, kappa.len())?;
        let u = state
            .accumulated_integral
            .iter()
            .zip(&kappa)
            .map(|(s, k)| -s / k)
            .collect();
        Ok(self.finish(u, bounds))
    }

    /// Gather-and-broadcast law `u_i = -(1/mu_i) sum_j A_ij I_j`.
    pub fn gab_control(&self, state: &ControllerState, bounds: &ControlBounds) -> Result<Vec<f64>> {
        let n = state.accumulated_integral.len();
        let mu = self.gab_gain.resolve(n);
        check_len("gab gains", n, mu.len())?;
        let a = self.adjacency.to_matrix(n);
        if a.len() != n || a.iter().any(|r| r.len() != n) {
            return Err(Error::dimension("adjacency", n, a.len()));
        }
        let u = (0..n)
            .map(|i| {
                let s: f64 = a[i]
                    .iter()
                    .zip(&state.accumulated_integral)
                    .map(|(aij, v)| f64::from(*aij) * v)
                    .sum();
                -s / mu[i]
            })
            .collect();
        Ok(self.finish(u, bounds))
    }
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dimension(what, expected, actual));
    }
    Ok(())
}

/// Running trapezoidal integral of the sampled angular velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub accumulated_integral: Vec<f64>,
    pub last_sample: Vec<f64>,
    pub last_time: f64,
}

impl ControllerState {
    pub fn new(n: usize) -> Self {
        Self {
            accumulated_integral: vec![0.0; n],
            last_sample: vec![0.0; n],
            last_time: 0.0,
        }
    }

    /// Adds the trapezoid `(t - last_time) (omega + last_sample) / 2`.
    pub fn integral_step(&self, t: f64, omega: &[f64]) -> Result<ControllerState> {
        let mut next = self.clone();
        next.integral_step_mut(t, omega)?;
        Ok(next)
    }

    pub fn integral_step_mut(&mut self, t: f64, omega: &[f64]) -> Result<()> {
        check_len("omega", self.last_sample.len(), omega.len())?;
        if t < self.last_time {
            return Err(Error::TimeReversal {
                t,
                last: self.last_time,
            });
        }
        let dt = t - self.last_time;
        for ((acc, last), w) in self
            .accumulated_integral
            .iter_mut()
            .zip(self.last_sample.iter_mut())
            .zip(omega)
        {
            *acc += dt * (w + *last) / 2.0;
            *last = *w;
        }
        self.last_time = t;
        Ok(())
    }
}

/// A controller together with its integrator state.
#[derive(Debug, Clone)]
pub struct OnlineController {
    pub config: ControllerConfig,
    pub bounds: ControlBounds,
    pub state: ControllerState,
}

impl OnlineController {
    pub fn new(config: ControllerConfig, bounds: ControlBounds) -> Self {
        let n = bounds.min.len();
        Self {
            config,
            bounds,
            state: ControllerState::new(n),
        }
    }

    /// Feeds the sample `omega(t)` and returns the control to hold until the
    /// next sample.
    pub fn sample(&mut self, t: f64, omega: &[f64]) -> Result<Vec<f64>> {
        self.state.integral_step_mut(t, omega)?;
        match self.config.law {
            ControlLaw::None => Ok(vec![0.0; omega.len()]),
            ControlLaw::Llf => self.config.llf_control(omega, &self.bounds),
            ControlLaw::Ilf => self.config.ilf_control(&self.state, &self.bounds),
            ControlLaw::Gab => self.config.gab_control(&self.state, &self.bounds),
        }
    }
}
