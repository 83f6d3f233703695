//! Piecewise-constant perturbations of the net power injections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    None,
    /// Step of `magnitude` at `node` on `[onset, onset + duration)`.
    Temporary,
    /// Step of `magnitude` at `node` from `onset` to the end of the horizon.
    Persistent,
    /// Sum of the listed `steps`.
    Custom,
}

/// One rectangular pulse; `duration = None` lasts forever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceStep {
    pub node: usize,
    pub magnitude: f64,
    pub onset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

impl DisturbanceStep {
    fn active(&self, t: f64) -> bool {
        t >= self.onset && self.duration.map_or(true, |d| t < self.onset + d)
    }
}

/// Perturbation `xi_i(t)` added to `P_in,i`.
///
/// Intervals are half-open, so the value at a breakpoint is the value just
/// after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceProfile {
    pub kind: DisturbanceKind,
    /// Target node (zero-based).
    pub node: usize,
    /// Step size (pu); negative values are extra demand.
    pub magnitude: f64,
    /// Start time (s).
    pub onset: f64,
    /// Length (s); ignored for persistent disturbances.
    pub duration: f64,
    /// Pulses of a custom profile.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<DisturbanceStep>,
}

impl Default for DisturbanceProfile {
    fn default() -> Self {
        Self::temporary()
    }
}

impl DisturbanceProfile {
    /// Demand at node 0 doubles (`-2.0` pu) at `t = 10 s` for twenty seconds.
    pub fn temporary() -> Self {
        Self {
            kind: DisturbanceKind::Temporary,
            node: 0,
            magnitude: -2.0,
            onset: 10.0,
            duration: 20.0,
            steps: Vec::new(),
        }
    }

    /// Demand at node 0 doubles at `t = 10 s` and stays doubled.
    pub fn persistent() -> Self {
        Self {
            kind: DisturbanceKind::Persistent,
            ..Self::temporary()
        }
    }

    pub fn none() -> Self {
        Self {
            kind: DisturbanceKind::None,
            ..Self::temporary()
        }
    }

    pub fn custom(steps: Vec<DisturbanceStep>) -> Self {
        Self {
            kind: DisturbanceKind::Custom,
            steps,
            ..Self::temporary()
        }
    }

    /// Short name used in output file names.
    pub fn label(&self) -> &'static str {
        match self.kind {
            DisturbanceKind::None => "none",
            DisturbanceKind::Temporary => "temporary",
            DisturbanceKind::Persistent => "persistent",
            DisturbanceKind::Custom => "custom",
        }
    }

    /// The profile as a list of pulses.
    pub fn steps(&self) -> Vec<DisturbanceStep> {
        match self.kind {
            DisturbanceKind::None => Vec::new(),
            DisturbanceKind::Temporary => vec![DisturbanceStep {
                node: self.node,
                magnitude: self.magnitude,
                onset: self.onset,
                duration: Some(self.duration),
            }],
            DisturbanceKind::Persistent => vec![DisturbanceStep {
                node: self.node,
                magnitude: self.magnitude,
                onset: self.onset,
                duration: None,
            }],
            DisturbanceKind::Custom => self.steps.clone(),
        }
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        for (k, s) in self.steps().iter().enumerate() {
            let path = match self.kind {
                DisturbanceKind::Custom => format!("disturbance.steps[{k}]"),
                _ => "disturbance".to_string(),
            };
            if s.node >= n_nodes {
                return Err(Error::validation(
                    format!("{path}.node"),
                    format!("node {} out of range for {n_nodes} nodes", s.node),
                ));
            }
            if !s.magnitude.is_finite() || !s.onset.is_finite() {
                return Err(Error::validation(path, "magnitude and onset must be finite"));
            }
            if let Some(d) = s.duration {
                if !(d >= 0.0) {
                    return Err(Error::validation(
                        format!("{path}.duration"),
                        "duration must be non-negative",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Writes `xi(t)` into `out` (length `N`).
    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) {
        out.fill(0.0);
        match self.kind {
            DisturbanceKind::None => {}
            DisturbanceKind::Temporary => {
                if t >= self.onset && t < self.onset + self.duration {
                    out[self.node] += self.magnitude;
                }
            }
            DisturbanceKind::Persistent => {
                if t >= self.onset {
                    out[self.node] += self.magnitude;
                }
            }
            DisturbanceKind::Custom => {
                for s in &self.steps {
                    if s.active(t) {
                        out[s.node] += s.magnitude;
                    }
                }
            }
        }
    }

    pub fn evaluate(&self, t: f64, n_nodes: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_nodes];
        self.evaluate_into(t, &mut out);
        out
    }

    /// Sorted, de-duplicated switching times.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .steps()
            .iter()
            .flat_map(|s| std::iter::once(s.onset).chain(s.duration.map(|d| s.onset + d)))
            .collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    /// Copy with every switching time moved to the nearest multiple of `dt`.
    pub fn snapped(&self, dt: f64) -> Self {
        let snap = |t: f64| (t / dt).round() * dt;
        let mut out = self.clone();
        match self.kind {
            DisturbanceKind::None => {}
            DisturbanceKind::Temporary | DisturbanceKind::Persistent => {
                let end = snap(self.onset + self.duration);
                out.onset = snap(self.onset);
                out.duration = end - out.onset;
            }
            DisturbanceKind::Custom => {
                for s in &mut out.steps {
                    let end = s.duration.map(|d| snap(s.onset + d));
                    s.onset = snap(s.onset);
                    s.duration = end.map(|e| e - s.onset);
                }
            }
        }
        out
    }
}
