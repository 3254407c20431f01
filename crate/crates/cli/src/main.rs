use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sphere_euler_cli::commands::{cmd_diagnose, cmd_jko, cmd_run, cmd_transport, Common, TransportArgs};
use sphere_euler_cli::CliError;

/// Isentropic Euler flow on the unit sphere by a three-stage transport scheme.
#[derive(Parser)]
#[command(name = "sphere-euler", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; for `diagnose`, the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver and write snapshots, ledger and summary.
    Run,
    /// Optimal transport between two densities or a fixture.
    Transport(Transport),
    /// One minimizing-movement step from the configured initial density.
    Jko,
    /// Audit stored run artifacts and write diagnostics.json.
    Diagnose {
        /// Second run from the same initial data for the Gronwall comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Transport {
    /// Built-in fixture; `two-dirac` puts unit masses a quarter circle apart.
    #[arg(long)]
    fixture: Option<String>,
    /// Source density: a preset such as `zonal(0.2, 0)` or a file of nodal values.
    #[arg(long)]
    mu: Option<String>,
    /// Target density, as for `--mu`.
    #[arg(long)]
    nu: Option<String>,
    /// Icosphere level; defaults to the configured one, else 2.
    #[arg(long)]
    level: Option<usize>,
    /// Print primal, dual and duality gap.
    #[arg(long)]
    check_duality: bool,
    /// Also report the entropic cost at this regularization.
    #[arg(long)]
    sinkhorn: Option<f64>,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("SPHERE_EULER_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("SPHERE_EULER_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = Common { config: cli.config, out: cli.out, seed: cli.seed };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Run => cmd_run(&common).map(|_| ()),
        Command::Transport(t) => cmd_transport(
            &common,
            &TransportArgs {
                fixture: t.fixture,
                mu: t.mu,
                nu: t.nu,
                level: t.level,
                check_duality: t.check_duality,
                sinkhorn: t.sinkhorn,
            },
        )
        .map(|_| ()),
        Command::Jko => cmd_jko(&common).map(|_| ()),
        Command::Diagnose { compare } => cmd_diagnose(&common, compare.as_deref()).map(|_| ()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
