//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 validation error (bad files, bad flags),
//! 2 numerical failure (load flow non-convergence). Diagnostics go to
//! standard error; data goes to files or standard output.

use clap::{Args, Parser, Subcommand, ValueEnum};
use p2pvolt::control::{centralized_solve, CentralizedSolution, Snapshot};
use p2pvolt::grid_model::{self, NetworkModel};
use p2pvolt::powerflow::{solve_bfs, InjectionSet, PowerFlowError};
use p2pvolt::sensitivity::sensitivity_matrix;
use p2pvolt::sim::engine::{run_simulation_detailed, EngineOptions, SimError};
use p2pvolt::sim::result::{export_csv, fmt_value, CsvTable};
use p2pvolt::sim::{load_scenario, Scenario};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Default output directory when `--out` is omitted.
const OUT_DIR_ENV: &str = "P2PVOLT_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "p2pvolt",
    version,
    about = "Peer-to-peer voltage control simulator for radial distribution feeders",
    long_about = "Runs closed-loop voltage-control simulations on radial feeders.\n\
\n\
Network files are JSON: {\"v_base_volts\": .., \"s_base_va\": .., \"nodes\": \
[{\"id\": \"..\", \"kind\": \"slack\"|\"load\", \"der\": \"..\"?}], \"branches\": \
[{\"from\": \"..\", \"to\": \"..\", \"r_ohm\": .., \"x_ohm\": ..}]}.\n\
\n\
Scenario files are JSON with the network (inline or by path), voltage limits, \
step size alpha, gossip/latency/multiplier timing in ms, the time window, a seed, \
and per-DER and per-load entries with power profiles (CSV path, inline samples, \
or a seeded synthetic spec).\n\
\n\
Config precedence everywhere: CLI flag > scenario file > built-in default."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and export the 1 Hz time series as CSV.
    Simulate(SimulateArgs),
    /// Solve one load flow and print a per-node voltage table.
    Powerflow(PowerflowArgs),
    /// Dump the dV/dP and dV/dQ sensitivity matrices as CSV.
    Sensitivity(SensitivityArgs),
    /// Solve a centralized snapshot (JSON in, JSON out).
    SolveSnapshot(SolveSnapshotArgs),
    /// Derive plot-ready panel CSVs from a pair of result files.
    PlotData(PlotDataArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Seed override; omitting it uses the scenario's embedded seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path. Default: <scenario stem>.csv under $P2PVOLT_OUT_DIR
    /// or the working directory. A `<out>.summary.csv` side file is written
    /// next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario's control_enabled flag.
    #[arg(long)]
    control: Option<OnOff>,
    /// Also write a gossip message trace CSV to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run the scenario once per listed seed (comma separated) instead of a
    /// single run; outputs become `<out stem>_seed<N>.csv`.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<u64>,
    /// Worker threads for the seed sweep.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PowerflowArgs {
    /// Network JSON file.
    #[arg(long)]
    network: PathBuf,
    /// Injection `node=P,Q` in pu (generator convention), repeatable.
    #[arg(long = "inject")]
    injections: Vec<String>,
}

#[derive(Args)]
struct SensitivityArgs {
    /// Network JSON file.
    #[arg(long)]
    network: PathBuf,
    /// DER node names (comma separated). Default: every node with a `der`
    /// attribute in the network file.
    #[arg(long, value_delimiter = ',')]
    ders: Vec<String>,
    /// Output directory for dv_dp.csv and dv_dq.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveSnapshotArgs {
    /// Snapshot JSON file.
    #[arg(long)]
    snapshot: PathBuf,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotDataArgs {
    /// Control-on result CSV (from `simulate`).
    #[arg(long)]
    run: PathBuf,
    /// Paired control-off result CSV; panel 2 is skipped when omitted.
    #[arg(long)]
    uncontrolled: Option<PathBuf>,
    /// Symmetric dQ limit drawn as constant columns in panel 3, pu.
    #[arg(long, default_value_t = 0.05)]
    q_limit: f64,
    /// Output directory for the four panel CSVs.
    #[arg(long)]
    out: PathBuf,
}

/// Errors carrying their exit code.
enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Powerflow(a) => cmd_powerflow(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::SolveSnapshot(a) => cmd_solve_snapshot(a),
        Command::PlotData(a) => cmd_plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_network_file(path: &Path) -> Result<NetworkModel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let net = grid_model::load_network(&text).map_err(validation)?;
    grid_model::to_per_unit(&net).map_err(validation)
}

fn default_out(scenario: &Path, suffix: &str) -> PathBuf {
    let stem = scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let dir = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    dir.join(format!("{stem}{suffix}.csv"))
}

fn sweep_path(out: &Path, seed: u64) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}_seed{seed}.csv"))
}

fn run_error(e: SimError) -> CliError {
    match e {
        SimError::PowerFlowDiverged { .. } => CliError::Numerical(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

fn run_one(
    scenario: &Scenario,
    out: &Path,
    trace: Option<&Path>,
) -> Result<(), CliError> {
    let options = EngineOptions {
        collect_trace: trace.is_some(),
        ..EngineOptions::default()
    };
    let output = run_simulation_detailed(scenario, &options).map_err(run_error)?;
    export_csv(&output.result, out).map_err(validation)?;
    if let Some(trace_path) = trace {
        let mut text =
            String::from("time_ms,sender,receiver,node,lambda_min,lambda_max,version\n");
        for r in &output.trace {
            writeln!(
                text,
                "{},{},{},{},{},{},{}",
                r.time_ms,
                r.sender,
                r.receiver,
                r.node,
                fmt_value(r.lambda_min),
                fmt_value(r.lambda_max),
                r.version
            )
            .expect("write to string");
        }
        std::fs::write(trace_path, text)
            .map_err(|e| validation(format!("cannot write {}: {e}", trace_path.display())))?;
    }
    eprintln!(
        "wrote {} ({} rows, {} messages, {} power-flow solves)",
        out.display(),
        output.result.rows.len(),
        output.result.summary.message_count,
        output.result.summary.power_flow_solves
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let load = |seed: Option<u64>| -> Result<Scenario, CliError> {
        let mut scenario = load_scenario(&args.scenario, seed).map_err(validation)?;
        if let Some(c) = args.control {
            scenario.control_enabled = c == OnOff::On;
        }
        Ok(scenario)
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_out(&args.scenario, ""));

    if args.sweep.is_empty() {
        return run_one(&load(args.seed)?, &out, args.trace.as_deref());
    }

    if args.threads == 0 {
        return Err(CliError::Validation("--threads must be at least 1".into()));
    }
    // Independent runs; each worker takes seeds off a shared list.
    let scenarios: Vec<(u64, Scenario)> = args
        .sweep
        .iter()
        .map(|&s| Ok((s, load(Some(s))?)))
        .collect::<Result<_, CliError>>()?;
    let jobs = std::sync::Mutex::new(scenarios.into_iter());
    let errors = std::sync::Mutex::new(Vec::<CliError>::new());
    std::thread::scope(|scope| {
        for _ in 0..args.threads.min(args.sweep.len()) {
            scope.spawn(|| loop {
                let job = jobs.lock().expect("sweep queue").next();
                let Some((seed, scenario)) = job else { break };
                if let Err(e) = run_one(&scenario, &sweep_path(&out, seed), None) {
                    errors.lock().expect("error list").push(e);
                }
            });
        }
    });
    match errors.into_inner().expect("error list").into_iter().next() {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

fn cmd_powerflow(args: PowerflowArgs) -> Result<(), CliError> {
    let net = load_network_file(&args.network)?;
    let mut inj = InjectionSet::zeros(net.node_count());
    for spec in &args.injections {
        let bad = || validation(format!("--inject {spec}: expected node=P,Q in pu"));
        let (name, pq) = spec.split_once('=').ok_or_else(bad)?;
        let (p, q) = pq.split_once(',').ok_or_else(bad)?;
        let node = net.node_by_name(name.trim()).map_err(validation)?;
        inj.add(
            node,
            p.trim().parse().map_err(|_| bad())?,
            q.trim().parse().map_err(|_| bad())?,
        );
    }
    let sol = solve_bfs(&net, &inj).map_err(|e| match e {
        PowerFlowError::NonConvergence(..) => CliError::Numerical(e.to_string()),
        other => CliError::Validation(other.to_string()),
    })?;
    println!("node,v_pu,angle_rad,p_inj_pu,q_inj_pu");
    for n in &net.nodes {
        println!(
            "{},{},{},{},{}",
            n.name,
            fmt_value(sol.magnitude(n.id)),
            fmt_value(sol.angle(n.id)),
            fmt_value(inj.get(n.id).re),
            fmt_value(inj.get(n.id).im)
        );
    }
    eprintln!("converged in {} sweeps, residual {:.3e}", sol.iterations, sol.residual);
    Ok(())
}

fn cmd_sensitivity(args: SensitivityArgs) -> Result<(), CliError> {
    let net = load_network_file(&args.network)?;
    let der_names: Vec<String> = if args.ders.is_empty() {
        net.nodes
            .iter()
            .filter(|n| n.attached_der.is_some())
            .map(|n| n.name.clone())
            .collect()
    } else {
        args.ders.clone()
    };
    if der_names.is_empty() {
        return Err(CliError::Validation(
            "no DER nodes: pass --ders or mark nodes with \"der\" in the network file".into(),
        ));
    }
    let ders = der_names
        .iter()
        .map(|n| net.node_by_name(n).map_err(validation))
        .collect::<Result<Vec<_>, _>>()?;
    let sens = sensitivity_matrix(&net, &ders).map_err(validation)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| validation(format!("cannot create {}: {e}", args.out.display())))?;
    let dump = |matrix: &[Vec<f64>], file: &str| -> Result<(), CliError> {
        let mut text = format!("node,{}\n", der_names.join(","));
        for (node, row) in matrix.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|&v| fmt_value(v)).collect();
            writeln!(text, "{},{}", net.nodes[node].name, cells.join(",")).expect("string write");
        }
        let path = args.out.join(file);
        std::fs::write(&path, text)
            .map_err(|e| validation(format!("cannot write {}: {e}", path.display())))
    };
    dump(&sens.dv_dp, "dv_dp.csv")?;
    dump(&sens.dv_dq, "dv_dq.csv")
}

fn cmd_solve_snapshot(args: SolveSnapshotArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.snapshot)
        .map_err(|e| validation(format!("cannot read {}: {e}", args.snapshot.display())))?;
    let snapshot: Snapshot = serde_json::from_str(&text).map_err(validation)?;
    let solution: CentralizedSolution = centralized_solve(&snapshot);
    let json = serde_json::to_string_pretty(&solution).map_err(validation)?;
    match &args.out {
        Some(path) => std::fs::write(path, json)
            .map_err(|e| validation(format!("cannot write {}: {e}", path.display())))?,
        None => println!("{json}"),
    }
    if !solution.converged {
        eprintln!(
            "warning: not converged after {} iterations (residual {:.3e})",
            solution.iterations, solution.residual
        );
    }
    Ok(())
}

fn cmd_plot_data(args: PlotDataArgs) -> Result<(), CliError> {
    let run = CsvTable::read(&args.run).map_err(validation)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| validation(format!("cannot create {}: {e}", args.out.display())))?;

    let schema = |msg: &str| -> CliError {
        validation(format!("{}: {msg}", args.run.display()))
    };
    let time_col = run
        .header
        .iter()
        .position(|h| h == "time_s")
        .ok_or_else(|| schema("missing time_s column"))?;

    let write_panel = |file: &str,
                       cols: &[(String, usize)],
                       extra: &[(String, f64)]|
     -> Result<(), CliError> {
        let mut text = String::from("time_s");
        for (name, _) in cols {
            write!(text, ",{name}").expect("string write");
        }
        for (name, _) in extra {
            write!(text, ",{name}").expect("string write");
        }
        text.push('\n');
        for row in &run.rows {
            write!(text, "{}", row[time_col]).expect("string write");
            for &(_, i) in cols {
                write!(text, ",{}", fmt_value(row[i])).expect("string write");
            }
            for &(_, v) in extra {
                write!(text, ",{}", fmt_value(v)).expect("string write");
            }
            text.push('\n');
        }
        let path = args.out.join(file);
        std::fs::write(&path, text)
            .map_err(|e| validation(format!("cannot write {}: {e}", path.display())))
    };

    let named = |prefix: &str| -> Vec<(String, usize)> {
        run.columns_with_prefix(prefix)
            .into_iter()
            .map(|i| (run.header[i].clone(), i))
            .collect()
    };

    // Panel 1: per-time sum of net active injections.
    let p_cols = run.columns_with_prefix("P_");
    if p_cols.is_empty() {
        return Err(schema("no P_ columns"));
    }
    {
        let mut text = String::from("time_s,p_total\n");
        for row in &run.rows {
            let total: f64 = p_cols.iter().map(|&i| row[i]).sum();
            writeln!(text, "{},{}", row[time_col], fmt_value(total)).expect("string write");
        }
        let path = args.out.join("aggregate_power.csv");
        std::fs::write(&path, text)
            .map_err(|e| validation(format!("cannot write {}: {e}", path.display())))?;
    }

    // Panel 2: voltages of the paired control-off run.
    if let Some(unc_path) = &args.uncontrolled {
        let unc = CsvTable::read(unc_path).map_err(validation)?;
        if unc.header != run.header {
            return Err(validation(format!(
                "{}: header differs from {}",
                unc_path.display(),
                args.run.display()
            )));
        }
        let cols: Vec<(String, usize)> = unc
            .columns_with_prefix("V_")
            .into_iter()
            .map(|i| (unc.header[i].clone(), i))
            .collect();
        let mut text = String::from("time_s");
        for (name, _) in &cols {
            write!(text, ",{name}").expect("string write");
        }
        text.push('\n');
        for row in &unc.rows {
            write!(text, "{}", row[time_col]).expect("string write");
            for &(_, i) in &cols {
                write!(text, ",{}", fmt_value(row[i])).expect("string write");
            }
            text.push('\n');
        }
        let path = args.out.join("voltages_uncontrolled.csv");
        std::fs::write(&path, text)
            .map_err(|e| validation(format!("cannot write {}: {e}", path.display())))?;
    }

    // Panel 3: per-inverter dQ with constant limit lines.
    write_panel(
        "delta_q.csv",
        &named("dQ_"),
        &[
            ("dq_limit_upper".into(), args.q_limit),
            ("dq_limit_lower".into(), -args.q_limit),
        ],
    )?;

    // Panel 4: controlled voltages.
    let v_cols = named("V_");
    if v_cols.is_empty() {
        return Err(schema("no V_ columns"));
    }
    write_panel("voltages_controlled.csv", &v_cols, &[])
}
