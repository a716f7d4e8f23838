use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nuclear_cdd::cli::{run_budget, run_effective, run_fit, run_simulate, Invocation};
use nuclear_cdd::error::Result;

#[derive(Parser)]
#[command(name = "nuclear-cdd", version, about = "Nuclear spin dephasing under continuous dynamical decoupling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; its fields override the preset.
    config: Option<PathBuf>,
    /// Built-in parameter set to start from.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trajectories: Option<usize>,
    /// Output directory (default: run.out_dir, then $CDD_OUT_DIR, then ".").
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<Common> for Invocation {
    fn from(c: Common) -> Self {
        Invocation { config_path: c.config, preset: c.preset, seed: c.seed, trajectories: c.trajectories, out: c.out }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the trajectory ensemble, write the trace CSV and the fit report.
    Simulate(Common),
    /// Write the coherence budget without running dynamics.
    Budget(Common),
    /// Write the effective couplings with their numeric Magnus cross-checks.
    Effective {
        #[command(flatten)]
        common: Common,
        /// Terms to report (default: all that apply).
        #[arg(long, value_delimiter = ',')]
        terms: Vec<String>,
    },
    /// Refit a trace written by `simulate`.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Trace CSV (default: the one `simulate` writes for this config).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let out = run_simulate(&c.into())?;
            println!("trace: {}", out.trace_path.display());
            println!("report: {}", out.report_path.display());
            match (&out.report.fit, &out.report.fit_error) {
                (Some(f), _) => println!("t2_fit = {:.6e} s (residual rms {:.3e})", f.t2_fit, f.residual_rms),
                (None, Some(e)) => println!("fit failed: {e}"),
                _ => {}
            }
            if let Some(t) = out.report.predicted_total_t2_s {
                println!("budget total_t2 = {t:.6e} s");
            }
            if let Some(f) = out.report.beat_frequency_hz {
                println!("beat frequency = {f:.1} Hz");
            }
        }
        Command::Budget(c) => {
            let report = run_budget(&c.into())?;
            for ch in &report.channels {
                println!("{:<14} dphi {:.4e}  step {:.3e} s  t2 {:.4e} s  {:?}", ch.name, ch.delta_phi, ch.step_time_s, ch.t2_s, ch.status);
            }
            println!("total_t2 = {:.6e} s", report.total_t2_s);
        }
        Command::Effective { common, terms } => {
            let report = run_effective(&common.into(), &terms)?;
            for t in &report.terms {
                match (t.numeric_hz, t.error) {
                    (Some(n), Some(e)) => println!("{:<16} {:>14.6} Hz  numeric {:>14.6} Hz  error {:.3e}", t.name, t.analytic_hz, n, e),
                    _ => println!("{:<16} {:>14.6} Hz", t.name, t.analytic_hz),
                }
            }
            if !report.valid {
                println!("warning: outside the perturbative regime");
            }
        }
        Command::Fit { common, trace } => {
            let report = run_fit(&common.into(), trace.as_deref())?;
            match (&report.fit, &report.fit_error) {
                (Some(f), _) => println!("t2_fit = {:.6e} s", f.t2_fit),
                (None, Some(e)) => println!("fit failed: {e}"),
                _ => {}
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
