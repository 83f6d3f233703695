//! Scenario files, benchmark runs and reports.
//!
//! A scenario is a JSON or TOML document whose sections mirror
//! [`Scenario`]; every section and field is optional and falls back to the
//! four-node ring defaults. Unknown keys are rejected.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllers::{ControlLaw, ControllerConfig};
use crate::error::{Error, Result};
use crate::grid_model::{find_steady_state, DisturbanceProfile, GridState, NetworkParameters};
use crate::metrics::{
    angular_velocity_stats, constraint_losses, control_cost, feasibility_from_losses, ConstraintSpec, Trajectory,
};
use crate::optimal_control::{solve_ocp, OcpProblem, OcpSettings, OcpSolution, OcpStatus};
use crate::simulate::{format_float, integrate_closed_loop, write_trajectory_csv, IntegrationConfig};

/// Optimal-control section of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Add an optimal-control row to the benchmark.
    pub solve: bool,
    pub settings: OcpSettings,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            solve: true,
            settings: OcpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub network: NetworkParameters,
    pub disturbance: DisturbanceProfile,
    pub constraints: ConstraintSpec,
    pub integration: IntegrationConfig,
    pub controllers: Vec<ControllerConfig>,
    pub optimizer: OptimizerConfig,
    /// Initial state; the network's steady state when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<GridState>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            network: NetworkParameters::default(),
            disturbance: DisturbanceProfile::default(),
            constraints: ConstraintSpec::default(),
            integration: IntegrationConfig::default(),
            controllers: vec![
                ControllerConfig::llf(1.0),
                ControllerConfig::ilf(15.0),
                ControllerConfig::gab(60.0),
            ],
            optimizer: OptimizerConfig::default(),
            initial: None,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let n = self.network.n();
        self.disturbance
            .validate(n)
            .map_err(|e| e.rebase_path("disturbance", "disturbance"))?;
        self.constraints
            .validate(n)
            .map_err(|e| e.rebase_path("constraints", "constraints"))?;
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
        let mut names = Vec::new();
        for (k, c) in self.controllers.iter().enumerate() {
            c.validate(n)
                .map_err(|e| e.rebase_path("controller", &format!("controllers[{k}]")))?;
            let label = c.label();
            if label == "oc" || names.contains(&label) {
                return Err(Error::validation(
                    format!("controllers[{k}].name"),
                    format!("duplicate or reserved row name `{label}`"),
                ));
            }
            names.push(label);
        }
        if let Some(s) = &self.initial {
            s.validate(n).map_err(|e| e.rebase_path("state", "initial"))?;
        }
        Ok(())
    }

    /// The given initial state, or the steady state found by Newton's method.
    pub fn initial_state(&self) -> Result<GridState> {
        if let Some(s) = &self.initial {
            return Ok(s.clone());
        }
        let n = self.network.n();
        let guess = if self.network == NetworkParameters::four_node_ring() {
            NetworkParameters::four_node_tabulated_state()
        } else {
            GridState {
                angle: vec![0.0; n],
                angular_velocity: vec![0.0; n],
                voltage: vec![1.0; n],
            }
        };
        find_steady_state(&self.network, &guess)
    }

    pub fn ocp_problem(&self) -> Result<OcpProblem> {
        Ok(OcpProblem {
            params: self.network.clone(),
            initial: self.initial_state()?,
            disturbance: self.disturbance.clone(),
            constraints: self.constraints.clone(),
            integration: self.integration.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}

/// Parses a scenario from text; `toml` selects the syntax.
pub fn parse_scenario(text: &str, toml: bool) -> Result<Scenario> {
    let scenario: Scenario = if toml {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?
    } else {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Reads and validates a scenario. Files ending in `.toml` are TOML; any
/// other file is tried as JSON first and then as TOML.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        return parse_scenario(&text, true);
    }
    match parse_scenario(&text, false) {
        Err(Error::Parse(json_err)) => parse_scenario(&text, true).map_err(|e| match e {
            Error::Parse(toml_err) => Error::Parse(format!("not JSON ({json_err}) nor TOML ({toml_err})")),
            other => other,
        }),
        other => other,
    }
}

/// Writes a scenario as TOML (`.toml`) or pretty JSON (anything else).
pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = if path.extension().is_some_and(|e| e == "toml") {
        scenario.to_toml()?
    } else {
        scenario.to_json()?
    };
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    #[serde(rename = "J")]
    pub cost: f64,
    /// `C_1 .. C_{N+2}`.
    pub constraint_losses: Vec<f64>,
    pub feasible: bool,
    pub terminal_sigma: f64,
    pub terminal_mean_omega: f64,
}

impl RowMetrics {
    pub fn from_trajectory(traj: &Trajectory, spec: &ConstraintSpec) -> Result<Self> {
        let losses = constraint_losses(traj, spec)?;
        let (mean, sigma) = angular_velocity_stats(&traj.final_state().angular_velocity)?;
        Ok(Self {
            cost: control_cost(traj),
            feasible: feasibility_from_losses(&losses, spec).feasible,
            constraint_losses: losses,
            terminal_sigma: sigma,
            terminal_mean_omega: mean,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub name: String,
    /// `ok` or `failed` for controllers; the solver status for the
    /// optimal-control row.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RowMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_s: f64,
}

impl BenchmarkRow {
    pub fn failed(&self) -> bool {
        self.status == "failed"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub disturbance: String,
    pub macro_steps: usize,
    pub substeps: usize,
    pub scenario_hash: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn row(&self, name: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Copy with every wall-time field set to zero.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.metadata.wall_time_s = 0.0;
        for row in &mut r.rows {
            row.wall_time_s = 0.0;
        }
        r
    }
}

/// Report plus the trajectories behind each successful row.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    /// `(row name, trajectory)` in row order.
    pub trajectories: Vec<(String, Trajectory)>,
    pub ocp: Option<OcpSolution>,
}

enum Job<'a> {
    Controller(&'a ControllerConfig),
    Optimal,
}

enum JobOutput {
    Controller(Trajectory),
    Optimal(Box<OcpSolution>),
}

/// Runs every controller and, when requested, the optimal control. Rows run
/// in parallel; a failing row is reported and does not stop the others.
pub fn run_benchmark(scenario: &Scenario) -> Result<BenchmarkRun> {
    let start = Instant::now();
    scenario.validate()?;
    let problem = scenario.ocp_problem()?;
    let bounds = scenario.constraints.control_bounds();

    let mut jobs: Vec<Job> = scenario.controllers.iter().map(Job::Controller).collect();
    if scenario.optimizer.solve {
        jobs.push(Job::Optimal);
    }
    let outputs: Vec<(String, f64, Result<JobOutput>)> = jobs
        .par_iter()
        .map(|job| {
            let t0 = Instant::now();
            let (name, out) = match job {
                Job::Controller(c) => (
                    c.label(),
                    integrate_closed_loop(
                        &problem.params,
                        &problem.initial,
                        &problem.disturbance,
                        c,
                        &bounds,
                        &problem.integration,
                    )
                    .map(JobOutput::Controller),
                ),
                Job::Optimal => (
                    "oc".to_string(),
                    solve_ocp(&problem, &scenario.optimizer.settings, None)
                        .map(|s| JobOutput::Optimal(Box::new(s))),
                ),
            };
            (name, t0.elapsed().as_secs_f64(), out)
        })
        .collect();

    let mut rows = Vec::with_capacity(outputs.len());
    let mut trajectories = Vec::new();
    let mut ocp = None;
    for (name, wall, out) in outputs {
        let row = match out.and_then(|o| {
            let (traj, status, iterations, solution) = match o {
                JobOutput::Controller(t) => (t, "ok".to_string(), None, None),
                JobOutput::Optimal(s) => (
                    s.trajectory.clone(),
                    status_name(s.status).to_string(),
                    Some(s.iterations),
                    Some(s),
                ),
            };
            let metrics = RowMetrics::from_trajectory(&traj, &scenario.constraints)?;
            Ok((traj, status, iterations, solution, metrics))
        }) {
            Ok((traj, status, iterations, solution, metrics)) => {
                trajectories.push((name.clone(), traj));
                if let Some(s) = solution {
                    ocp = Some(*s);
                }
                BenchmarkRow {
                    name,
                    status,
                    metrics: Some(metrics),
                    iterations,
                    error: None,
                    wall_time_s: wall,
                }
            }
            Err(e) => BenchmarkRow {
                name,
                status: "failed".to_string(),
                metrics: None,
                iterations: None,
                error: Some(e.to_string()),
                wall_time_s: wall,
            },
        };
        rows.push(row);
    }

    Ok(BenchmarkRun {
        report: BenchmarkReport {
            metadata: ReportMetadata {
                disturbance: scenario.disturbance.label().to_string(),
                macro_steps: scenario.integration.macro_steps,
                substeps: scenario.integration.substeps,
                scenario_hash: scenario.hash()?,
                wall_time_s: start.elapsed().as_secs_f64(),
            },
            rows,
        },
        trajectories,
        ocp,
    })
}

pub fn status_name(status: OcpStatus) -> &'static str {
    match status {
        OcpStatus::Converged => "converged",
        OcpStatus::IterationLimit => "iteration_limit",
        OcpStatus::Infeasible => "infeasible",
    }
}

/// Writes the report as CSV: one line per row, empty cells for failed rows.
pub fn write_report_csv<W: Write>(report: &BenchmarkReport, n_constraints: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["name".into(), "status".into(), "J".into()];
    header.extend((1..=n_constraints).map(|k| format!("C_{k}")));
    header.extend(
        ["feasible", "terminal_sigma", "terminal_mean_omega", "iterations", "wall_time_s"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![row.name.clone(), row.status.clone()];
        match &row.metrics {
            Some(m) => {
                rec.push(format_float(m.cost));
                rec.extend(m.constraint_losses.iter().map(|c| format_float(*c)));
                rec.push(m.feasible.to_string());
                rec.push(format_float(m.terminal_sigma));
                rec.push(format_float(m.terminal_mean_omega));
            }
            None => rec.extend(std::iter::repeat(String::new()).take(n_constraints + 5)),
        }
        rec.push(row.iterations.map(|i| i.to_string()).unwrap_or_default());
        rec.push(format_float(row.wall_time_s));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `report.csv` and `{row}_{disturbance}.csv` for
/// every trajectory; returns the written paths.
pub fn emit_outputs(
    report: &BenchmarkReport,
    trajectories: &[(String, Trajectory)],
    nominal_frequency: f64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n")?;
    written.push(json);

    let n_constraints = report
        .rows
        .iter()
        .find_map(|r| r.metrics.as_ref().map(|m| m.constraint_losses.len()))
        .unwrap_or(0);
    let csv_path = dir.join("report.csv");
    write_report_csv(report, n_constraints, fs::File::create(&csv_path)?)?;
    written.push(csv_path);

    for (name, traj) in trajectories {
        let path = dir.join(format!("{name}_{}.csv", report.metadata.disturbance));
        write_trajectory_csv(traj, nominal_frequency, std::io::BufWriter::new(fs::File::create(&path)?))?;
        written.push(path);
    }
    Ok(written)
}

/// Runs one controller of the scenario by row name (`none` is always available).
pub fn simulate_controller(scenario: &Scenario, name: &str) -> Result<Trajectory> {
    scenario.validate()?;
    let uncontrolled = ControllerConfig::with_law(ControlLaw::None);
    let controller = if name == "none" {
        &uncontrolled
    } else {
        scenario
            .controllers
            .iter()
            .find(|c| c.label() == name)
            .ok_or_else(|| Error::validation("controller", format!("no controller named `{name}` in the scenario")))?
    };
    let problem = scenario.ocp_problem()?;
    integrate_closed_loop(
        &problem.params,
        &problem.initial,
        &problem.disturbance,
        controller,
        &scenario.constraints.control_bounds(),
        &problem.integration,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let s = parse_scenario("{}", false).unwrap();
        assert_eq!(s, Scenario::default());
        assert_eq!(s.network.n(), 4);
        assert_eq!(s.network.susceptance[0][1], 34.13);
        assert_eq!(s.constraints.tolerances[0], 1e-4);
        assert_eq!(parse_scenario("", true).unwrap(), Scenario::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(parse_scenario(r#"{"netwrk": {}}"#, false), Err(Error::Parse(_))));
        assert!(matches!(
            parse_scenario(r#"{"integration": {"macro_step": 300}}"#, false),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn asymmetric_susceptance_names_the_pair() {
        let mut s = Scenario::default();
        s.network.susceptance[0][1] = 30.0;
        let err = parse_scenario(&s.to_json().unwrap(), false).unwrap_err();
        match err {
            Error::Validation { path, message } => {
                assert_eq!(path, "network.susceptance[0][1]");
                assert!(message.contains("asymmetric"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_override() {
        let s = parse_scenario("[integration]\nmacro_steps = 300\n", true).unwrap();
        assert_eq!(s.integration.macro_steps, 300);
        assert_eq!(s.network, NetworkParameters::four_node_ring());
        let s = parse_scenario(r#"{"disturbance": {"kind": "persistent"}}"#, false).unwrap();
        assert_eq!(s.disturbance, DisturbanceProfile::persistent());
    }

    #[test]
    fn controller_errors_carry_index() {
        let text = r#"{"controllers": [{"law": "llf"}, {"law": "ilf", "ilf_gain": -1.0}]}"#;
        match parse_scenario(text, false).unwrap_err() {
            Error::Validation { path, .. } => assert_eq!(path, "controllers[1].ilf_gain[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_and_toml_round_trip() {
        let mut s = Scenario::default();
        s.controllers.push(ControllerConfig {
            name: Some("gab_local".into()),
            adjacency: crate::controllers::Adjacency::Identity,
            ..ControllerConfig::gab(15.0)
        });
        s.optimizer.settings.intervals = Some(60);
        s.disturbance = DisturbanceProfile::persistent();
        assert_eq!(parse_scenario(&s.to_json().unwrap(), false).unwrap(), s);
        assert_eq!(parse_scenario(&s.to_toml().unwrap(), true).unwrap(), s);
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let text = r#"{"integration": {"horizon": 30.0}}"#;
        match parse_scenario(text, false).unwrap_err() {
            Error::Validation { path, .. } => assert_eq!(path, "constraints.horizon"),
            other => panic!("{other:?}"),
        }
    }
}
