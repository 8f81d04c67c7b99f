mod commands;
mod error;
mod modelfile;
mod report;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use commands::{Discovery, FlowArgs, FlowMode, SimArgs};
use error::CliError;

#[derive(Parser)]
#[command(name = "qpot", version, about = "Local quasipotentials of weak-noise stochastic systems")]
struct Cli {
    /// Output file (analyze, kramers-demo) or directory (flow, simulate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DiscoveryArgs {
    /// Newton seed grid, `lo:hi:count` per axis, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    seeds: Option<String>,
    /// Relative residual tolerance for equilibria.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

impl DiscoveryArgs {
    fn discovery(&self) -> Discovery {
        Discovery { tol: self.tol, seeds: self.seeds.clone() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Find equilibria and report the local quasipotential at each.
    Analyze {
        model: PathBuf,
        #[command(flatten)]
        discovery: DiscoveryArgs,
    },
    /// Integrate characteristics from one equilibrium into CSV files.
    Flow {
        model: PathBuf,
        #[command(flatten)]
        discovery: DiscoveryArgs,
        /// Index into the equilibrium list of `analyze`.
        #[arg(long, default_value_t = 0)]
        ep: usize,
        #[arg(long, value_enum, default_value_t = FlowMode::Ring)]
        mode: FlowMode,
        /// Ring size (three dimensions and up use twice as many points).
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Ring radius in the Hessian norm, or exit offset.
        #[arg(long, default_value_t = 1e-4)]
        radius: f64,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 20.0)]
        tmax: f64,
        /// Half width of the integration box around the equilibrium.
        #[arg(long = "box", default_value_t = 10.0)]
        box_half: f64,
    },
    /// Euler–Maruyama oracle for the covariance or mean exit time.
    Simulate {
        model: PathBuf,
        #[command(flatten)]
        discovery: DiscoveryArgs,
        #[arg(long, allow_hyphen_values = true)]
        eps: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        burn_in: Option<usize>,
        /// Attractor index (defaults to the first attractor).
        #[arg(long)]
        ep: Option<usize>,
        /// Start point for exit-time runs, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long, conflicts_with = "exit_time")]
        covariance: bool,
        /// Exit region such as `x1>0`.
        #[arg(long, required_unless_present = "covariance")]
        exit_time: Option<String>,
    },
    /// Closed-form comparison table for the quadratic Kramers model.
    KramersDemo {
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        gamma: f64,
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        u2: f64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn emit(out: Option<&Path>, quiet: bool, body: &str) -> Result<(), CliError> {
    if let Some(path) = out {
        std::fs::write(path, format!("{body}\n")).map_err(|e| CliError::io(path, e))?;
    }
    if !quiet {
        let mut stdout = std::io::stdout().lock();
        // a closed pipe downstream is not an error of ours
        let _ = writeln!(stdout, "{body}");
    }
    Ok(())
}

fn json_text(v: Value) -> String {
    report::to_string(&report::envelope(v))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Analyze { model, discovery } => {
            let loaded = modelfile::load(&model)?;
            let report = commands::analyze(&loaded, &discovery.discovery())?;
            emit(out, cli.quiet, &json_text(report))
        }
        Command::Flow { model, discovery, ep, mode, k, radius, dt, tmax, box_half } => {
            let dir = out.ok_or_else(|| CliError::usage("flow needs --out DIR".into()))?;
            let loaded = modelfile::load(&model)?;
            let args = FlowArgs { ep, mode, k, radius, dt, tmax, box_half };
            let manifest = commands::flow(&loaded, &discovery.discovery(), &args, dir)?;
            emit(None, cli.quiet, &json_text(manifest))
        }
        Command::Simulate { model, discovery, eps, dt, steps, paths, seed, burn_in, ep, x0, covariance: _, exit_time } => {
            let loaded = modelfile::load(&model)?;
            let args = SimArgs { eps, dt, steps, paths, seed, burn_in, ep, x0, exit_time };
            let summary = commands::simulate(&loaded, &discovery.discovery(), &args, out)?;
            emit(None, cli.quiet, &json_text(summary))
        }
        Command::KramersDemo { gamma, u2, json } => {
            let table = commands::kramers_demo(gamma, u2)?;
            let body = if json { json_text(table) } else { commands::kramers_demo_text(&table) };
            emit(out, cli.quiet, body.trim_end())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}
