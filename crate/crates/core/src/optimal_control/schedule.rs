//! Piecewise-constant control parametrization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controllers::ControlBounds;
use crate::error::{Error, Result};
use crate::simulate::format_float;

/// Controls `values[k]` held on `[partition[k], partition[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub partition: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ControlSchedule {
    pub fn new(partition: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self { partition, values };
        let n = s.values.first().map_or(0, Vec::len);
        s.validate(n)?;
        Ok(s)
    }

    /// Zero controls on `n_p` equal intervals of `[0, horizon]`.
    pub fn zeros(horizon: f64, n_p: usize, n_nodes: usize) -> Self {
        Self {
            partition: equidistant(horizon, n_p),
            values: vec![vec![0.0; n_nodes]; n_p],
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.values.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn horizon(&self) -> f64 {
        *self.partition.last().unwrap_or(&0.0)
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::validation("schedule.values", "need at least one interval"));
        }
        if self.partition.len() != self.values.len() + 1 {
            return Err(Error::dimension(
                "schedule.partition",
                self.values.len() + 1,
                self.partition.len(),
            ));
        }
        if self.partition[0] != 0.0 {
            return Err(Error::validation("schedule.partition[0]", "must be 0"));
        }
        if let Some(k) = self.partition.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::validation(
                format!("schedule.partition[{}]", k + 1),
                "partition must increase strictly",
            ));
        }
        for (k, row) in self.values.iter().enumerate() {
            if row.len() != n_nodes {
                return Err(Error::dimension(format!("schedule.values[{k}]"), n_nodes, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("schedule.values[{k}]")));
            }
        }
        Ok(())
    }

    pub fn within_bounds(&self, bounds: &ControlBounds) -> bool {
        self.values.iter().all(|row| {
            row.iter()
                .zip(&bounds.min)
                .zip(&bounds.max)
                .all(|((v, lo), hi)| v >= lo && v <= hi)
        })
    }

    /// Splits every interval into `factor` equal parts; the represented
    /// control function is unchanged.
    pub fn prolong(&self, factor: usize) -> Self {
        assert!(factor >= 1);
        let mut partition = Vec::with_capacity(self.n_intervals() * factor + 1);
        let mut values = Vec::with_capacity(self.n_intervals() * factor);
        for (k, w) in self.partition.windows(2).enumerate() {
            for j in 0..factor {
                partition.push(w[0] + (w[1] - w[0]) * j as f64 / factor as f64);
                values.push(self.values[k].clone());
            }
        }
        partition.push(self.horizon());
        Self { partition, values }
    }

    /// Interval-major flattening `[u^1_1..u^1_N, u^2_1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let n = self.n_nodes();
        Self {
            partition: self.partition.clone(),
            values: flat.chunks(n).map(<[f64]>::to_vec).collect(),
        }
    }

    /// Control held at time `t` (the last interval extends to `t >= T`).
    pub fn value_at(&self, t: f64) -> &[f64] {
        let k = self.partition[1..].partition_point(|&p| p <= t);
        &self.values[k.min(self.n_intervals() - 1)]
    }

    /// CSV with columns `k, t_start, u_1..u_N`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["k".to_string(), "t_start".to_string()];
        header.extend((1..=self.n_nodes()).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for (k, row) in self.values.iter().enumerate() {
            let rec = std::iter::once(k.to_string())
                .chain(std::iter::once(format_float(self.partition[k])))
                .chain(row.iter().map(|v| format_float(*v)));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn equidistant(horizon: f64, n_p: usize) -> Vec<f64> {
    (0..=n_p)
        .map(|k| if k == n_p { horizon } else { horizon * k as f64 / n_p as f64 })
        .collect()
}
