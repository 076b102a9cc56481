mod artifacts;
mod config;
mod error;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riphs::diagnostics::{horizon_sweep, turnpike_metrics, SweepReport, TurnpikeReport};
use riphs::equilibria::{find_optimal_steady_state, manifold_dimension, EquilibriumKind};
use riphs::integrate::HorizonSpec;
use riphs::model::{BalanceResiduals, Vector};
use riphs::ocp::{cost_identity, solve_ocp, ControlBounds, CostIdentity, CostWeights, OcpSpec};
use riphs::systems::{SystemKind, SystemParams};
use riphs::trajectory::{SolverMetadata, TrajectorySolution};
use serde::Serialize;
use serde_json::json;

use artifacts::Table;
use config::{ExperimentConfig, Resolved};
use error::{io_err, CliError};

#[derive(Parser)]
#[command(
    name = "riphs",
    version,
    about = "Optimal control and turnpike diagnostics for reversible-irreversible port-Hamiltonian systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one experiment and write CSV, JSON report and SVG figure.
    Run {
        /// Config file, or the name of a bundled experiment.
        config: String,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve an experiment on several horizons and compare turnpike metrics.
    Sweep {
        config: String,
        /// Comma-separated horizons; overrides `sweep` from the config.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equilibrium manifold and optimal steady states of a system, as JSON.
    Equilibria {
        system: String,
        /// JSON object of parameter overrides.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Reference temperature of the exergy weights.
        #[arg(long = "t0")]
        t0: Option<f64>,
    },
    /// Built-in systems and bundled experiments.
    List,
    /// Dimensions, default parameters and bounds of a system.
    Describe { system: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => run(&config, out),
        Command::Sweep {
            config,
            horizons,
            out,
        } => sweep(&config, horizons, out),
        Command::Equilibria { system, params, t0 } => equilibria(&system, params, t0),
        Command::List => {
            list();
            Ok(())
        }
        Command::Describe { system } => describe(&system),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("riphs: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn output_dir(
    out: Option<PathBuf>,
    config: &ExperimentConfig,
    name: &str,
) -> Result<PathBuf, CliError> {
    let dir = out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").join(name));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn kind_of(name: &str) -> Result<SystemKind, CliError> {
    SystemKind::from_name(name).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Serialize)]
struct SetSummary {
    kind: &'static str,
    dimension: usize,
    rank: usize,
}

#[derive(Serialize)]
struct RunReport<'a> {
    name: &'a str,
    config: &'a ExperimentConfig,
    active_bounds: &'a ControlBounds,
    metadata: &'a SolverMetadata,
    balance_residuals: BalanceResiduals,
    cost_identity: CostIdentity,
    /// Largest deviation from the fixed terminal components.
    terminal_error: Option<f64>,
    equilibrium_set: SetSummary,
    turnpike: Option<TurnpikeReport>,
    turnpike_error: Option<String>,
    artifacts: Vec<&'static str>,
}

fn set_summary(r: &Resolved) -> SetSummary {
    SetSummary {
        kind: if r.set.is_affine() {
            "affine"
        } else {
            "implicit"
        },
        dimension: r.set.dimension(),
        rank: r.set.rank(),
    }
}

fn terminal_error(spec: &OcpSpec, traj: &TrajectorySolution) -> Option<f64> {
    let last = traj.states.last()?;
    let fixed = spec.terminal.fixed();
    (!fixed.is_empty()).then(|| {
        fixed
            .iter()
            .map(|(i, v)| (last[*i] - v).abs())
            .fold(0.0, f64::max)
    })
}

fn solve(spec: &OcpSpec) -> Result<TrajectorySolution, CliError> {
    solve_ocp(spec).map_err(|e| CliError::Solver(e.to_string()))
}

/// Write CSV and figure for one solution; returns the turnpike report.
fn emit(
    dir: &Path,
    stem: &str,
    title: &str,
    r: &Resolved,
    spec: &OcpSpec,
    traj: &TrajectorySolution,
) -> Result<(Option<TurnpikeReport>, Option<String>), CliError> {
    let table = Table::build(spec, &r.set, traj)?;
    artifacts::write(&dir.join(format!("{stem}.csv")), &table.to_csv())?;
    artifacts::write(&dir.join(format!("{stem}.svg")), &table.figure(title))?;
    Ok(
        match turnpike_metrics(
            &spec.model,
            traj,
            &r.set,
            spec.output.as_ref(),
            r.config.epsilon,
        ) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        },
    )
}

fn run(source: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    let (config, name) = config::load(source)?;
    let r = config.resolve()?;
    let dir = output_dir(out, &config, &name)?;
    let spec = &r.spec;
    let traj = solve(spec)?;
    let (turnpike, turnpike_error) = emit(&dir, "trajectory", &name, &r, spec, &traj)?;
    let solver = |e: &dyn std::fmt::Display| CliError::Solver(e.to_string());
    let report = RunReport {
        name: &name,
        config: &r.config,
        active_bounds: &spec.bounds,
        metadata: &traj.metadata,
        balance_residuals: spec
            .model
            .balance_residuals(&traj)
            .map_err(|e| solver(&e))?,
        cost_identity: cost_identity(&spec.model, &spec.weights, &traj).map_err(|e| solver(&e))?,
        terminal_error: terminal_error(spec, &traj),
        equilibrium_set: set_summary(&r),
        turnpike,
        turnpike_error,
        artifacts: vec!["trajectory.csv", "trajectory.svg", "report.json"],
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    artifacts::write(&dir.join("report.json"), &json)?;

    let md = &traj.metadata;
    println!(
        "{name}: {} ({} system)",
        md.status,
        config.system.name.name()
    );
    println!("  active bounds: {}", format_bounds(&spec.bounds));
    if let Some(obj) = md.objective {
        println!("  objective: {obj:.6e}");
    }
    println!(
        "  constraint violation: {:.3e}, cost identity residual: {:.3e}",
        md.constraint_violation, report.cost_identity.residual
    );
    if let Some(e) = report.terminal_error {
        println!("  terminal error: {e:.3e}");
    }
    if let Some(t) = &report.turnpike {
        println!(
            "  integral dist^2: {:.6e}, fraction within {}: {:.3}",
            t.integral_dist_sq, t.epsilon, t.fraction_near
        );
    }
    println!("  wrote {}", dir.display());
    if md.status != "converged" {
        return Err(CliError::Solver(format!(
            "solver stopped with status {}",
            md.status
        )));
    }
    Ok(())
}

fn format_bounds(b: &ControlBounds) -> String {
    b.lower
        .iter()
        .zip(&b.upper)
        .map(|(l, u)| format!("[{l}, {u}]"))
        .collect::<Vec<_>>()
        .join(" x ")
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    name: &'a str,
    config: &'a ExperimentConfig,
    active_bounds: &'a ControlBounds,
    horizons: &'a [f64],
    #[serde(flatten)]
    report: &'a SweepReport,
}

fn sweep(source: &str, horizons: Option<Vec<f64>>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (config, name) = config::load(source)?;
    let horizons = horizons
        .or_else(|| config.sweep.clone())
        .ok_or_else(|| CliError::Config("no horizons given (--horizons or `sweep`)".into()))?;
    config::check_horizons(&horizons)?;
    let r = config.resolve()?;
    let dir = output_dir(out, &config, &name)?;
    let report = horizon_sweep(&r.spec, &horizons, &r.set, config.epsilon);
    let mut failed = Vec::new();
    println!(
        "{name}: horizon sweep, active bounds {}",
        format_bounds(&r.spec.bounds)
    );
    for e in &report.entries {
        let stem = format!("trajectory_tf{}", e.t_f);
        if let Some(sol) = &e.solution {
            let mut spec = r.spec.clone();
            spec.horizon = HorizonSpec::new(e.t_f, r.spec.horizon.dt)
                .map_err(|err| CliError::Config(err.to_string()))?;
            emit(
                &dir,
                &stem,
                &format!("{name}, t_f = {}", e.t_f),
                &r,
                &spec,
                sol,
            )?;
        }
        match (&e.report, &e.error) {
            (Some(t), _) => println!(
                "  t_f = {:>8}: {:<14} integral dist^2 = {:.6e}",
                e.t_f,
                e.status.as_deref().unwrap_or("-"),
                t.integral_dist_sq
            ),
            (None, err) => println!(
                "  t_f = {:>8}: failed ({})",
                e.t_f,
                err.as_deref().unwrap_or("unknown")
            ),
        }
        if e.report.is_none() || e.status.as_deref() != Some("converged") {
            failed.push(e.t_f);
        }
    }
    if let Some(ratio) = report.ratio {
        println!("  max/min ratio: {ratio:.4}");
    }
    let output = SweepOutput {
        name: &name,
        config: &r.config,
        active_bounds: &r.spec.bounds,
        horizons: &horizons,
        report: &report,
    };
    let json = serde_json::to_string_pretty(&output).expect("report serializes");
    artifacts::write(&dir.join("sweep.json"), &json)?;
    println!("  wrote {}", dir.display());
    if !failed.is_empty() {
        return Err(CliError::Solver(format!(
            "horizons {failed:?} did not converge"
        )));
    }
    Ok(())
}

fn equilibria(system: &str, params: Option<PathBuf>, t0: Option<f64>) -> Result<(), CliError> {
    let kind = kind_of(system)?;
    let overrides = match params {
        None => Default::default(),
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
    };
    let params = config::system_params(kind, &overrides)?;
    let model = params
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let set = params
        .equilibria(&model)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let weights = CostWeights::exergy(t0.unwrap_or_else(|| config::default_t0(&params)));
    weights
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let b = config::default_bounds(kind);
    let bounds = ControlBounds::new(
        b.iter().map(|r| r[0]).collect(),
        b.iter().map(|r| r[1]).collect(),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let region = model.sampling_region();
    let steady: Vec<_> = [0.5, 0.25, 0.75]
        .iter()
        .map(|&f| {
            let raw = Vector::from_iterator(
                region.lower.len(),
                region
                    .lower
                    .iter()
                    .zip(&region.upper)
                    .map(|(lo, hi)| lo + f * (hi - lo)),
            );
            let start = match &region.map {
                Some(m) => m * raw,
                None => raw,
            };
            match find_optimal_steady_state(&model, &weights, &bounds, &start) {
                Ok(s) => json!({ "start": start.as_slice(), "steady_state": s }),
                Err(e) => json!({ "start": start.as_slice(), "error": e.to_string() }),
            }
        })
        .collect();

    let set_json = match set.kind() {
        EquilibriumKind::Affine { offset, basis } => json!({
            "kind": "affine",
            "offset": offset.as_slice(),
            "basis": basis.column_iter().map(|c| c.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        }),
        EquilibriumKind::Implicit => json!({ "kind": "implicit" }),
    };
    let out = json!({
        "system": kind.name(),
        "params": params,
        "dimension": manifold_dimension(&model),
        "equilibrium_set": set_json,
        "codim_vectors": set.codim_vectors().iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>(),
        "weights": weights,
        "bounds": bounds,
        "optimal_steady_states": steady,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("report serializes")
    );
    Ok(())
}

fn list() {
    println!("systems:");
    for k in SystemKind::ALL {
        println!("  {:<16} {}", k.name(), k.description());
    }
    println!("bundled experiments:");
    for (name, text) in config::BUNDLED {
        let c = config::parse(text).expect("bundled configs parse");
        println!(
            "  {:<22} system {}, t_f = {}, dt = {}",
            name,
            c.system.name.name(),
            c.horizon.t_f,
            c.horizon.dt
        );
    }
}

fn describe(system: &str) -> Result<(), CliError> {
    let kind = kind_of(system)?;
    let params = SystemParams::defaults(kind);
    let model = params
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dim = manifold_dimension(&model);
    println!("{}: {}", kind.name(), kind.description());
    println!("  n = {}", model.state_dim());
    println!("  m = {}", model.input_dim());
    println!("  N = {}", model.num_irreversible());
    println!("  dim 𝒯 = {} (rank {})", dim.dimension, dim.rank);
    let bounds = config::default_bounds(kind);
    println!(
        "  default control bounds: {}",
        bounds
            .iter()
            .map(|b| format!("[{}, {}]", b[0], b[1]))
            .collect::<Vec<_>>()
            .join(" x ")
    );
    println!("  default parameters:");
    let value = serde_json::to_value(&params).expect("parameters serialize");
    if let serde_json::Value::Object(m) = value {
        for (k, v) in m {
            println!("    {k} = {v}");
        }
    }
    if let SystemParams::GasPiston(p) = &params {
        println!("  derived:");
        println!("    piston mass m = A·P0/g = {:.4}", p.mass());
        println!(
            "    rest state (S, V, p) at T0, P0 = {:?}",
            p.initial_state().as_slice()
        );
        if let Ok(x) = p.expanded_state(1.3) {
            println!("    rest state at P0 and 1.3·V = {:?}", x.as_slice());
        }
    }
    Ok(())
}
