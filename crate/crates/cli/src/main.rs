//! `gridstab` command-line harness.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridstab::bench::{self, Scenario};
use gridstab::grid_model::DisturbanceProfile;
use gridstab::optimal_control::{self, ControlSchedule, Functional, OcpStatus};
use gridstab::simulate::{write_trajectory_csv, IntegrationConfig};
use gridstab::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "gridstab", version, about = "Transient-stability controller and optimal-control benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (JSON or TOML); defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Use the fine grid (1500 control intervals, two RK4 steps each).
    #[arg(long)]
    paper_scale: bool,
    /// Override the scenario disturbance.
    #[arg(long, value_enum)]
    disturbance: Option<DisturbanceArg>,
    /// Seed for randomized audits; the simulations themselves are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DisturbanceArg {
    None,
    Temporary,
    Persistent,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controller under the scenario disturbance.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Row name of the controller (`none` runs the uncontrolled plant).
        #[arg(long, default_value = "llf")]
        controller: String,
    },
    /// Solve the optimal-control problem only.
    Optimize {
        #[command(flatten)]
        common: Common,
    },
    /// Run every controller and the optimal control and write the report.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Skip the optimal-control row.
        #[arg(long)]
        no_oc: bool,
    },
    /// Compare adjoint gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Schedule intervals.
        #[arg(long, default_value_t = 20)]
        intervals: usize,
        /// Coordinates probed per functional.
        #[arg(long, default_value_t = 10)]
        probes: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
}

fn load(common: &Common) -> gridstab::Result<Scenario> {
    let mut scenario = match &common.scenario {
        Some(path) => bench::load_scenario(path)?,
        None => Scenario::default(),
    };
    if common.paper_scale {
        scenario.integration = IntegrationConfig {
            horizon: scenario.integration.horizon,
            breakpoint_alignment: scenario.integration.breakpoint_alignment,
            ..IntegrationConfig::paper()
        };
    }
    if let Some(d) = common.disturbance {
        scenario.disturbance = match d {
            DisturbanceArg::None => DisturbanceProfile::none(),
            DisturbanceArg::Temporary => DisturbanceProfile::temporary(),
            DisturbanceArg::Persistent => DisturbanceProfile::persistent(),
        };
    }
    scenario.validate()?;
    Ok(scenario)
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_input_error() {
        ExitCode::from(EXIT_VALIDATION)
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn simulate(common: &Common, controller: &str) -> gridstab::Result<ExitCode> {
    let scenario = load(common)?;
    let traj = bench::simulate_controller(&scenario, controller)?;
    fs::create_dir_all(&common.out)?;
    let path = common
        .out
        .join(format!("{controller}_{}.csv", scenario.disturbance.label()));
    write_trajectory_csv(&traj, scenario.network.nominal_frequency, fs::File::create(&path)?)?;
    let metrics = bench::RowMetrics::from_trajectory(&traj, &scenario.constraints)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn optimize(common: &Common) -> gridstab::Result<ExitCode> {
    let scenario = load(common)?;
    let problem = scenario.ocp_problem()?;
    let solution = optimal_control::solve_ocp(&problem, &scenario.optimizer.settings, None)?;
    fs::create_dir_all(&common.out)?;
    let label = scenario.disturbance.label();
    solution
        .schedule
        .write_csv(fs::File::create(common.out.join(format!("oc_{label}_schedule.csv")))?)?;
    write_trajectory_csv(
        &solution.trajectory,
        scenario.network.nominal_frequency,
        fs::File::create(common.out.join(format!("oc_{label}.csv")))?,
    )?;
    let summary = serde_json::to_string_pretty(&solution.summary(&scenario.constraints))?;
    fs::write(common.out.join(format!("oc_{label}_summary.json")), format!("{summary}\n"))?;
    println!("{summary}");
    Ok(match solution.status {
        OcpStatus::Infeasible => ExitCode::from(EXIT_INFEASIBLE),
        _ => ExitCode::SUCCESS,
    })
}

fn run_bench(common: &Common, no_oc: bool) -> gridstab::Result<ExitCode> {
    let mut scenario = load(common)?;
    if no_oc {
        scenario.optimizer.solve = false;
    }
    let run = bench::run_benchmark(&scenario)?;
    let written = bench::emit_outputs(
        &run.report,
        &run.trajectories,
        scenario.network.nominal_frequency,
        &common.out,
    )?;
    for p in &written {
        eprintln!("wrote {}", p.display());
    }
    for row in &run.report.rows {
        match (&row.metrics, &row.error) {
            (Some(m), _) => println!(
                "{:<10} {:<16} J = {:>10.4e}  C_1 = {:>10.4e}  feasible = {}",
                row.name, row.status, m.cost, m.constraint_losses[0], m.feasible
            ),
            (None, Some(e)) => println!("{:<10} failed: {e}", row.name),
            (None, None) => println!("{:<10} failed", row.name),
        }
    }
    if run.report.rows.iter().any(|r| r.failed()) {
        return Ok(ExitCode::from(EXIT_RUNTIME));
    }
    if run.ocp.as_ref().is_some_and(|s| s.status == OcpStatus::Infeasible) {
        return Ok(ExitCode::from(EXIT_INFEASIBLE));
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(common: &Common, intervals: usize, probes: usize, step: f64) -> gridstab::Result<ExitCode> {
    let scenario = load(common)?;
    let problem = scenario.ocp_problem()?;
    let n = scenario.network.n();
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let mut schedule = ControlSchedule::zeros(scenario.integration.horizon, intervals, n);
    for v in schedule.values.iter_mut().flatten() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let functionals = Functional::all(scenario.constraints.n_constraints());
    let (_, grads) = optimal_control::gradients(&functionals, &schedule, &problem)?;
    let value = |s: &ControlSchedule, f: Functional| -> gridstab::Result<f64> {
        let e = optimal_control::evaluate(s, &problem)?;
        Ok(match f {
            Functional::Cost => e.cost,
            Functional::Constraint(eta) => e.losses[eta - 1],
        })
    };
    let mut worst = 0.0f64;
    println!("functional  k   i  adjoint                 finite-difference       rel.error");
    for (f, g) in functionals.iter().zip(&grads) {
        for _ in 0..probes {
            let k = rng.gen_range(0..intervals);
            let i = rng.gen_range(0..n);
            let mut plus = schedule.clone();
            let mut minus = schedule.clone();
            plus.values[k][i] += step;
            minus.values[k][i] -= step;
            let fd = (value(&plus, *f)? - value(&minus, *f)?) / (2.0 * step);
            let abs = (fd - g[k][i]).abs();
            let rel = if abs <= 1e-8 { 0.0 } else { abs / g[k][i].abs().max(fd.abs()) };
            worst = worst.max(rel);
            println!("{:<10} {k:>3} {i:>2}  {:>22.15e}  {:>22.15e}  {rel:.2e}", f.label(), g[k][i], fd);
        }
    }
    println!("worst relative error {worst:.3e}");
    Ok(if worst < 1e-4 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUNTIME)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, controller } => simulate(common, controller),
        Command::Optimize { common } => optimize(common),
        Command::Bench { common, no_oc } => run_bench(common, *no_oc),
        Command::Gradcheck {
            common,
            intervals,
            probes,
            step,
        } => gradcheck(common, *intervals, *probes, *step),
    };
    result.unwrap_or_else(|e| fail(&e))
}
