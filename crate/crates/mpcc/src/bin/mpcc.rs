//! Scenario driver: plan, simulate, report, sweep, and check subcommands.
//!
//! All artifacts land in the output directory (--out, or $MPCC_OUT_DIR, or
//! the working directory). Failures print one machine-readable JSON object
//! to stderr; exit codes are 0 success, 2 validation, 3 solver, 4 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpcc::analysis::{
    compute_metrics, corridor_violation, detect_jackknife, swept_path,
    DEFAULT_JACKKNIFE_THRESHOLD,
};
use mpcc::error::Error;
use mpcc::nlp::{check_derivatives, solve, SolverStatus};
use mpcc::ocp::{assemble_nlp, extract_trajectory};
use mpcc::scenario::{
    effective_config_toml, expand_alias, load_scenario, plan_log, read_trace, rebuild_log,
    write_trace, Scenario, ScenarioFile,
};
use mpcc::sim::{cold_plan, initialize_progress, run_receding_horizon, TerminationReason};

#[derive(Parser)]
#[command(name = "mpcc", about = "Trajectory planning scenarios for tractor-semitrailer vehicles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Dotted-path overrides applied after the file loads, e.g.
    /// --set weights.qc.2=1000.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; defaults to $MPCC_OUT_DIR, then the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a single horizon from the initial state and write the plan.
    Plan(CommonArgs),
    /// Run the full receding-horizon loop; write trace CSV and metrics JSON.
    Simulate(CommonArgs),
    /// Recompute metrics and the swept-path outline from an existing trace.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Trace CSV produced by `simulate`.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Repeat `simulate` over a grid of one weight, e.g. --sweep qc2=10,100,1000.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: String,
    },
    /// Validate the scenario and check the problem derivatives; no artifacts.
    Check(CommonArgs),
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::PlanFailure(_) => ("solver", 3),
        Error::Io(_) => ("io", 4),
        _ => ("validation", 2),
    }
}

fn out_dir(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone()
        .or_else(|| std::env::var_os("MPCC_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_sidecar(dir: &Path, name: &str, file: &ScenarioFile) -> mpcc::error::Result<()> {
    std::fs::create_dir_all(dir)?;
    let toml = effective_config_toml(file)?;
    std::fs::write(dir.join(format!("{name}.effective.toml")), toml)?;
    Ok(())
}

fn load(common: &CommonArgs) -> mpcc::error::Result<(Scenario, ScenarioFile)> {
    load_scenario(&common.scenario, &common.set)
}

fn run_plan(common: &CommonArgs) -> mpcc::error::Result<String> {
    let (sc, eff) = load(common)?;
    let dir = out_dir(&common.out);
    write_sidecar(&dir, &sc.name, &eff)?;

    let x0 = initialize_progress(&sc.def.path, &sc.def.params, &sc.start)?;
    let plan = cold_plan(&sc.def, &x0, &sc.solver)?;
    let dest = dir.join(format!("{}.plan.csv", sc.name));
    write_trace(&plan_log(&sc.def, &plan)?, &dest)?;
    if plan.solver_status != SolverStatus::Converged {
        return Err(Error::PlanFailure(format!(
            "solver finished with status {:?} after {} iterations (kkt {:.3e})",
            plan.solver_status, plan.iterations, plan.kkt_residual
        )));
    }
    Ok(serde_json::json!({
        "plan": dest,
        "status": format!("{:?}", plan.solver_status),
        "iterations": plan.iterations,
        "kkt_residual": plan.kkt_residual,
        "objective": plan.objective_value,
        "solve_time_s": plan.solve_time,
    })
    .to_string())
}

fn run_simulate(common: &CommonArgs) -> mpcc::error::Result<String> {
    let (sc, eff) = load(common)?;
    let dir = out_dir(&common.out);
    write_sidecar(&dir, &sc.name, &eff)?;

    let log = run_receding_horizon(&sc.def, &sc.start, &sc.sim, &sc.solver)?;
    let trace = dir.join(format!("{}.trace.csv", sc.name));
    write_trace(&log, &trace)?;
    let metrics = compute_metrics(&sc.def, &log)?;
    let metrics_path = dir.join(format!("{}.metrics.json", sc.name));
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n",
    )?;
    if log.termination == TerminationReason::PlanFailure {
        return Err(Error::PlanFailure(format!(
            "closed loop aborted after {:.1} s; partial trace at {}",
            log.duration(),
            trace.display()
        )));
    }
    Ok(serde_json::json!({
        "trace": trace,
        "metrics": metrics_path,
        "termination": format!("{:?}", log.termination),
        "duration_s": log.duration(),
        "plans": log.plans.len(),
    })
    .to_string())
}

fn run_report(common: &CommonArgs, trace: &Path) -> mpcc::error::Result<String> {
    let (sc, eff) = load(common)?;
    let dir = out_dir(&common.out);
    write_sidecar(&dir, &sc.name, &eff)?;

    let (times, states, inputs) = read_trace(trace)?;
    let log = rebuild_log(&sc.def, times, states, inputs)?;
    let metrics = compute_metrics(&sc.def, &log)?;
    let metrics_path = dir.join(format!("{}.metrics.json", sc.name));
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n",
    )?;

    let sweep = swept_path(&log, &sc.def.params, &sc.footprint)?;
    let outline_path = dir.join(format!("{}.outline.csv", sc.name));
    let mut outline = String::from("x,y\n");
    for &(x, y) in &sweep.outline {
        outline.push_str(&format!("{x:.8e},{y:.8e}\n"));
    }
    std::fs::write(&outline_path, outline)?;

    let violation = corridor_violation(&sc.def, &log);
    let jackknife = detect_jackknife(&log, DEFAULT_JACKKNIFE_THRESHOLD)?;
    Ok(serde_json::json!({
        "metrics": metrics_path,
        "outline": outline_path,
        "swept_area_m2": sweep.area,
        "corridor_violation_m": violation.max_violation,
        "jackknife_time_s": jackknife,
    })
    .to_string())
}

fn run_sweep(common: &CommonArgs, sweep: &str) -> mpcc::error::Result<String> {
    let (key, values) = sweep
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("sweep \"{sweep}\" is not KEY=V1,V2,...")))?;
    let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Parse("sweep needs at least one value".into()));
    }
    let base = out_dir(&common.out);
    let mut points = Vec::new();
    for v in values {
        let point_dir = base.join(format!("{}_{}", key, v));
        let mut set = common.set.clone();
        set.push(format!("{}={}", expand_alias(key), v));
        let point = CommonArgs {
            scenario: common.scenario.clone(),
            set,
            out: Some(point_dir.clone()),
        };
        let summary = run_simulate(&point)?;
        points.push(serde_json::json!({
            "value": v,
            "dir": point_dir,
            "result": serde_json::from_str::<serde_json::Value>(&summary).expect("summary json"),
        }));
    }
    Ok(serde_json::json!({ "key": key, "points": points }).to_string())
}

/// Relative-error threshold for the finite-difference derivative check.
const DERIVATIVE_TOLERANCE: f64 = 1e-4;

fn run_check(common: &CommonArgs) -> mpcc::error::Result<String> {
    let (sc, _) = load(common)?;
    let x0 = initialize_progress(&sc.def.path, &sc.def.params, &sc.start)?;
    // Check at the stationary guess: progress matches the held pose, so the
    // objective stays small and finite differences stay meaningful.
    let nlp = assemble_nlp(&sc.def, &x0, None)?;
    let report = check_derivatives(&nlp, nlp.initial_guess());
    let max_error = report.max_error();
    if max_error > DERIVATIVE_TOLERANCE {
        return Err(Error::PlanFailure(format!(
            "derivative check failed: max relative error {max_error:.3e}"
        )));
    }
    Ok(serde_json::json!({
        "name": sc.name,
        "valid": true,
        "derivative_max_error": max_error,
        "objective_grad_error": report.objective_grad,
        "eq_jacobian_error": report.eq_jacobian,
        "ineq_jacobian_error": report.ineq_jacobian,
    })
    .to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(c) => run_plan(c),
        Command::Simulate(c) => run_simulate(c),
        Command::Report { common, trace } => run_report(common, trace),
        Command::Sweep { common, sweep } => run_sweep(common, sweep),
        Command::Check(c) => run_check(c),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = error_kind(&e);
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": kind })
            );
            ExitCode::from(code)
        }
    }
}
