use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dalvq_cli::commands::{cmd_phi_table, cmd_run, cmd_validate_schedule, Overrides};
use dalvq_cli::report::cmd_report;
use dalvq_cli::{parse_config, Failure};

/// Distributed asynchronous learning vector quantization simulator.
#[derive(Parser)]
#[command(name = "dalvq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured mode and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Keep going when the schedule fails the assumptions.
        #[arg(long)]
        allow_invalid_schedule: bool,
    },
    /// Check the configured schedule against the assumptions.
    ValidateSchedule {
        #[command(flatten)]
        common: Common,
    },
    /// Export the coefficients phi^{i,j}(t, tau).
    PhiTable {
        #[command(flatten)]
        common: Common,
        /// Time index; defaults to the horizon.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
        tau_min: i64,
    },
    /// Tabulate finished runs as CSV, one row per run directory.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(c: &Common, allow_invalid_schedule: bool) -> Overrides {
    Overrides { seed: c.seed, out: c.out.clone(), allow_invalid_schedule }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { common, allow_invalid_schedule } => {
            let cfg = parse_config(&common.config)?;
            let summary = cmd_run(cfg, &overrides(&common, allow_invalid_schedule))?;
            if !summary.failed_assumptions.is_empty() {
                eprintln!("warning: schedule fails {}", summary.failed_assumptions.join(", "));
            }
            eprintln!("wrote {} ({:.2}s)", summary.out.display(), summary.wall_time_s);
        }
        Command::ValidateSchedule { common } => {
            let cfg = parse_config(&common.config)?;
            cmd_validate_schedule(cfg, &overrides(&common, false))?;
        }
        Command::PhiTable { common, t, tau_min } => {
            let cfg = parse_config(&common.config)?;
            cmd_phi_table(cfg, &overrides(&common, false), t, tau_min)?;
        }
        Command::Report { runs, out } => match out {
            Some(path) => {
                let file = std::fs::File::create(&path)
                    .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
                cmd_report(&runs, file)?;
            }
            None => {
                cmd_report(&runs, std::io::stdout().lock())?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
