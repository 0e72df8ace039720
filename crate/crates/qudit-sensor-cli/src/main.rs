//! Command-line front end for the qudit microwave-field sensor toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qudit_sensor_cli::commands::{self, resolve_out, CmdError, CmdResult};
use qudit_sensor_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "qudit-sensor", version, about = "Microwave field sensing with a transmon qudit, in software")]
struct Cli {
    /// Worker threads for grid generation and sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit circuit parameters to the configured transition frequencies.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the shift lookup table over the configured grid.
    GenTable {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the row journal of an interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Recover field amplitude and frequency from traces or a synthetic field.
    Sense {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        table: PathBuf,
        /// Recorded first-transition trace (otherwise synthetic mode).
        #[arg(long, requires = "trace2")]
        trace1: Option<PathBuf>,
        /// Recorded second-transition trace.
        #[arg(long, requires = "trace1")]
        trace2: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the synthetic field over a frequency range through the full pipeline.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the detectable-shift limits of the Ramsey protocol.
    Limits {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_r: Option<usize>,
        #[arg(long)]
        delta_t_max_ns: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scan the two-pulse phase readout over a detuning window.
    PhaseScan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one Ramsey trace and write it as CSV plus metadata.
    SynthTrace {
        #[arg(long)]
        config: PathBuf,
        /// Which qudit transition to Ramsey (1 or 2).
        #[arg(long)]
        transition: u8,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf) -> CmdResult<RunConfig> {
    RunConfig::load(path).map_err(CmdError::Validation)
}

fn dispatch(cli: Cli) -> CmdResult {
    if let Some(jobs) = cli.jobs {
        // ignore the error when a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match cli.cmd {
        Cmd::Calibrate { config, out } => {
            let cfg = load_config(&config)?;
            commands::cmd_calibrate(&cfg, resolve_out(out, "transmon_params.json"))
        }
        Cmd::GenTable {
            config,
            out,
            resume,
        } => {
            let cfg = load_config(&config)?;
            commands::cmd_gen_table(&cfg, resolve_out(out, "lookup_table.csv"), resume)
        }
        Cmd::Sense {
            config,
            table,
            trace1,
            trace2,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let traces = match (trace1, trace2) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            };
            commands::cmd_sense(
                &cfg,
                &table,
                traces,
                seed,
                resolve_out(out, "sense_result.json"),
            )
        }
        Cmd::Sweep {
            config,
            table,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            commands::cmd_sweep(&cfg, &table, seed, resolve_out(out, "sweep.csv"))
        }
        Cmd::Limits {
            config,
            n_r,
            delta_t_max_ns,
            out,
        } => {
            let cfg = match &config {
                Some(p) => Some(load_config(p)?),
                None => None,
            };
            commands::cmd_limits(cfg.as_ref(), n_r, delta_t_max_ns, out)
        }
        Cmd::PhaseScan { config, out } => {
            let cfg = load_config(&config)?;
            commands::cmd_phase_scan(&cfg, resolve_out(out, "phase_scan.csv"))
        }
        Cmd::SynthTrace {
            config,
            transition,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            commands::cmd_synth_trace(&cfg, transition, seed, resolve_out(out, "trace.csv"))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
