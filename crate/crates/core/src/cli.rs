//! Command-line entry points and the on-disk artifact formats.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 I/O, 4 solver failure or
//! non-convergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::discretization::TrajectoryIterate;
use crate::dynamics::{SpacecraftState, SystemParameters};
use crate::error::{Error, Result};
use crate::evaluation::{
    average_impulse_per_day, crlb_run, pareto_sweep, plan_and_evaluate, total_impulse, CovarianceHistory,
    ParetoPoint,
};
use crate::scenario::{load_scenario, Scenario, NODE_TOL};
use crate::scvx::IterationRecord;

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "infoplan", version, about = "Information-driven observer trajectory planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan one trajectory and write its artifacts.
    Plan {
        #[arg(long)]
        config: PathBuf,
        /// Homotopy weight; defaults to the config's `alpha_h`.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan and evaluate one trajectory per homotopy weight.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated weights; defaults to the config's `alpha_grid`.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the covariance analysis on a saved trajectory.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the node grid of a scenario.
    Nodes {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. }
        | Error::Validation { .. }
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch(_)
        | Error::UnresolvablePeriod(_) => EXIT_USAGE,
        Error::Io { .. } => EXIT_IO,
        Error::Iteration { source, .. } => match **source {
            Error::Io { .. } => EXIT_IO,
            _ => EXIT_SOLVER,
        },
        _ => EXIT_SOLVER,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Plan { config, alpha, out } => cmd_plan(&config, alpha, &out),
        Command::Sweep { config, alphas, out } => cmd_sweep(&config, alphas.as_deref(), &out),
        Command::Evaluate {
            config,
            trajectory,
            out,
        } => cmd_evaluate(&config, &trajectory, &out),
        Command::Nodes { config } => cmd_nodes(&config),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

fn usage(message: impl Into<String>) -> Error {
    Error::InvalidArgument(message.into())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(usage(format!("alpha_h = {alpha} is outside [0, 1]")))
    }
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

pub fn cmd_plan(config: &Path, alpha: Option<f64>, out: &Path) -> Result<i32> {
    let scenario = load_scenario(config)?;
    let alpha = alpha
        .or(scenario.alpha_h)
        .ok_or_else(|| usage("no --alpha given and the config has no alpha_h"))?;
    check_alpha(alpha)?;
    prepare_out_dir(out)?;
    let plan = plan_and_evaluate(&scenario, alpha, &scenario.scvx)?;
    let report = &plan.report;
    write_trajectory(&out.join("trajectory.json"), &report.iterate, alpha, &scenario.params)?;
    write_iterations(&out.join("iterations.csv"), &report.history)?;
    let summary = PlanSummary::new(&scenario, &plan.report, &plan.history);
    write_json(&out.join("summary.json"), &summary)?;
    if report.converged {
        log::info!("converged in {} iterations", report.iterations);
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "error: SCvx did not converge in {} iterations (max defect {:e})",
            report.iterations, report.max_defect
        );
        Ok(EXIT_SOLVER)
    }
}

pub fn cmd_sweep(config: &Path, alphas: Option<&[f64]>, out: &Path) -> Result<i32> {
    let scenario = load_scenario(config)?;
    let grid: Vec<f64> = match alphas {
        Some(a) => a.to_vec(),
        None => scenario
            .alpha_grid
            .clone()
            .ok_or_else(|| usage("no --alphas given and the config has no alpha_grid"))?,
    };
    if grid.is_empty() {
        return Err(usage("the alpha grid is empty"));
    }
    for &a in &grid {
        check_alpha(a)?;
    }
    prepare_out_dir(out)?;
    let points = pareto_sweep(&scenario, &grid, &scenario.scvx);
    write_pareto(&out.join("pareto.csv"), &points, scenario.n_targets())?;
    if points.iter().any(|p| p.converged) {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: no sweep point converged");
        Ok(EXIT_SOLVER)
    }
}

pub fn cmd_evaluate(config: &Path, trajectory: &Path, out: &Path) -> Result<i32> {
    let scenario = load_scenario(config)?;
    let iterate = read_trajectory(trajectory, &scenario)?;
    prepare_out_dir(out)?;
    let history = crlb_run(&iterate, &scenario)?;
    write_crlb(&out.join("crlb.csv"), &history)?;
    Ok(EXIT_OK)
}

pub fn cmd_nodes(config: &Path) -> Result<i32> {
    use std::io::Write;
    let scenario = load_scenario(config)?;
    let p = &scenario.params;
    let mut text = String::from("node,t_tu,t_days,u_max_km_s\n");
    for (k, (&t, &u)) in scenario.grid.nodes().iter().zip(&scenario.u_max).enumerate() {
        text.push_str(&format!("{k},{t},{},{}\n", p.tu_to_days(t), p.du_tu_to_km_s(u)));
    }
    // A closed pipe downstream is not an error.
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(EXIT_OK),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemRecord {
    pub mu: f64,
    pub du_km: f64,
    pub tu_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub t_tu: f64,
    pub t_s: f64,
    pub state_du_du_tu: [f64; 6],
    pub state_km_km_s: [f64; 6],
    pub control_du_tu2: [f64; 3],
    pub control_km_s2: [f64; 3],
    /// Bound on the node's control norm, in acceleration-time units.
    pub u_max_du_tu: f64,
    pub u_max_km_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub format_version: u32,
    pub alpha_h: f64,
    pub system: SystemRecord,
    pub nodes: Vec<NodeRecord>,
}

impl TrajectoryFile {
    pub fn new(iterate: &TrajectoryIterate, alpha_h: f64, p: &SystemParameters) -> Self {
        let nodes = iterate
            .grid
            .nodes()
            .iter()
            .zip(&iterate.states)
            .zip(&iterate.controls)
            .zip(&iterate.u_max)
            .map(|(((&t, x), u), &u_max)| {
                let x = x.to_array();
                let mut si = [0.0; 6];
                for i in 0..3 {
                    si[i] = p.du_to_km(x[i]);
                    si[i + 3] = p.du_tu_to_km_s(x[i + 3]);
                }
                NodeRecord {
                    t_tu: t,
                    t_s: t * p.tu_s,
                    state_du_du_tu: x,
                    state_km_km_s: si,
                    control_du_tu2: [u.x, u.y, u.z],
                    control_km_s2: [u.x, u.y, u.z].map(|c| p.du_tu2_to_km_s2(c)),
                    u_max_du_tu: u_max,
                    u_max_km_s: p.du_tu_to_km_s(u_max),
                }
            })
            .collect();
        Self {
            format_version: TRAJECTORY_FORMAT_VERSION,
            alpha_h,
            system: SystemRecord {
                mu: p.mu,
                du_km: p.du_km,
                tu_s: p.tu_s,
            },
            nodes,
        }
    }

    /// Rebuilds the iterate from the normalized fields after checking it
    /// against `scenario`.
    pub fn to_iterate(&self, scenario: &Scenario) -> Result<TrajectoryIterate> {
        if self.format_version != TRAJECTORY_FORMAT_VERSION {
            return Err(usage(format!("unsupported trajectory format_version {}", self.format_version)));
        }
        let p = &scenario.params;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        if !(close(self.system.mu, p.mu) && close(self.system.du_km, p.du_km) && close(self.system.tu_s, p.tu_s)) {
            return Err(Error::DimensionMismatch("trajectory system parameters differ from the config".into()));
        }
        let grid = &scenario.grid;
        if self.nodes.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} nodes, the config grid has {}",
                self.nodes.len(),
                grid.len()
            )));
        }
        if let Some(k) = self
            .nodes
            .iter()
            .zip(grid.nodes())
            .position(|(n, &t)| (n.t_tu - t).abs() > NODE_TOL)
        {
            return Err(Error::DimensionMismatch(format!("trajectory node {k} is off the config grid")));
        }
        TrajectoryIterate::new(
            grid.clone(),
            self.nodes.iter().map(|n| SpacecraftState::from_array(n.state_du_du_tu)).collect(),
            self.nodes.iter().map(|n| Vector3::from(n.control_du_tu2)).collect(),
            self.nodes.iter().map(|n| n.u_max_du_tu).collect(),
        )
    }
}

pub fn write_trajectory(path: &Path, iterate: &TrajectoryIterate, alpha_h: f64, p: &SystemParameters) -> Result<()> {
    write_json(path, &TrajectoryFile::new(iterate, alpha_h, p))
}

pub fn read_trajectory(path: &Path, scenario: &Scenario) -> Result<TrajectoryIterate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TrajectoryFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    file.to_iterate(scenario)
}

#[derive(Clone, Debug, Serialize)]
pub struct TerminalRms {
    pub observer_km: f64,
    pub targets_km: Vec<f64>,
}

impl TerminalRms {
    fn new(rms: &[f64]) -> Self {
        Self {
            observer_km: rms.first().copied().unwrap_or(f64::NAN),
            targets_km: rms.iter().skip(1).copied().collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanSummary {
    pub alpha_h: f64,
    pub converged: bool,
    pub iterations: usize,
    pub mutual_information_nats: f64,
    pub total_impulse_km_s: f64,
    pub avg_impulse_km_s_per_day: f64,
    pub max_defect_normalized: f64,
    pub cost_normalized: f64,
    pub terminal_rms: TerminalRms,
}

impl PlanSummary {
    pub fn new(scenario: &Scenario, report: &crate::scvx::ScvxReport, history: &CovarianceHistory) -> Self {
        let p = &scenario.params;
        Self {
            alpha_h: report.alpha_h,
            converged: report.converged,
            iterations: report.iterations,
            mutual_information_nats: report.cost.information,
            total_impulse_km_s: total_impulse(&report.iterate, p),
            avg_impulse_km_s_per_day: average_impulse_per_day(&report.iterate, p),
            max_defect_normalized: report.max_defect,
            cost_normalized: report.cost.total,
            terminal_rms: TerminalRms::new(&history.terminal_rms()),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_iterations(path: &Path, history: &[IterationRecord]) -> Result<()> {
    let header = [
        "iteration",
        "j_ref_normalized",
        "j_star_normalized",
        "l_star_normalized",
        "rho",
        "eta_normalized",
        "max_defect_normalized",
        "accepted",
        "solver_iterations",
    ];
    write_rows(
        path,
        header.iter().map(|s| s.to_string()).collect(),
        history.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.j_ref.to_string(),
                r.j_star.to_string(),
                r.l_star.to_string(),
                r.rho.to_string(),
                r.eta.to_string(),
                r.max_defect.to_string(),
                r.accepted.to_string(),
                r.solver_iterations.to_string(),
            ]
        }),
    )
}

pub fn pareto_header(n_targets: usize) -> Vec<String> {
    let mut h: Vec<String> = ["alpha_h", "total_impulse_km_s", "avg_impulse_km_s_per_day", "rms_observer_km"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=n_targets).map(|i| format!("rms_target_{i}_km")));
    h.extend(["converged", "iterations", "error"].iter().map(|s| s.to_string()));
    h
}

pub fn write_pareto(path: &Path, points: &[ParetoPoint], n_targets: usize) -> Result<()> {
    write_rows(
        path,
        pareto_header(n_targets),
        points.iter().map(|p| {
            let mut row = vec![
                p.alpha_h.to_string(),
                p.total_impulse.to_string(),
                p.avg_impulse_per_day.to_string(),
            ];
            row.extend(p.terminal_rms.iter().map(|r| r.to_string()));
            row.push(p.converged.to_string());
            row.push(p.iterations.to_string());
            row.push(p.error.clone().unwrap_or_default());
            row
        }),
    )
}

pub fn write_crlb(path: &Path, history: &CovarianceHistory) -> Result<()> {
    let n_obj = history.n_objects();
    let mut header: Vec<String> = ["epoch_tu", "measured"].iter().map(|s| s.to_string()).collect();
    for o in 0..n_obj {
        let name = if o == 0 {
            "observer".to_string()
        } else {
            format!("target_{o}")
        };
        header.push(format!("rms_{name}_pre_km"));
        header.push(format!("rms_{name}_post_km"));
    }
    write_rows(
        path,
        header,
        (0..history.epochs().len()).map(|k| {
            let mut row = vec![history.epochs()[k].to_string(), history.pass.measured[k].to_string()];
            for o in 0..n_obj {
                row.push(history.rms_pre_km[k][o].to_string());
                row.push(history.rms_post_km[k][o].to_string());
            }
            row
        }),
    )
}
