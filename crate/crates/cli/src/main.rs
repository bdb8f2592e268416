use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ilnet_cli::{analyze::cmd_analyze, resolve_out, run::cmd_run, sweep::cmd_sweep, SCRATCH_ENV};

#[derive(Parser)]
#[command(name = "ilnet", version, about = "Semi-supervised detection experiments on synthetic scenes")]
struct Cli {
    /// Scratch directory used when --out is omitted.
    #[arg(long, env = SCRATCH_ENV, global = true)]
    scratch: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write checkpoints, metrics log and final report.
    Run {
        /// key = value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per (value, seed) of a sweep spec, plus summary tables.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tables and plots from a run directory or a sweep directory.
    Analyze {
        #[arg(long)]
        log_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let scratch = cli.scratch.as_deref();
    let result = match &cli.command {
        Command::Run { config, seed, out } => resolve_out(out.as_deref(), scratch, "run").and_then(|out| {
            let report = cmd_run(config.as_deref(), *seed, &out)?;
            println!("{}", report.summary_table().trim_end());
            Ok(())
        }),
        Command::Sweep { spec, out } => resolve_out(out.as_deref(), scratch, "sweep").and_then(|out| {
            let rows = cmd_sweep(spec, &out)?;
            println!("{} runs; summary in {}", rows.len(), out.join(ilnet_cli::sweep::SUMMARY_FILE).display());
            Ok(())
        }),
        Command::Analyze { log_dir, out } => resolve_out(out.as_deref(), scratch, "analyze").and_then(|out| {
            cmd_analyze(log_dir, &out)?;
            println!("analysis written to {}", out.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
