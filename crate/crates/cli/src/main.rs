use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use smp_lab::commands::{self, Command};
use smp_lab::config::ExperimentConfig;
use smp_lab::record::RunRecord;

#[derive(Parser)]
#[command(name = "smp-lab", version, about = "Monte Carlo experiments for controlled linear SPDEs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Forward ensemble with moment and energy checks.
    Simulate(RunArgs),
    /// Adjoint solve with duality and orthogonality checks.
    Adjoint(RunArgs),
    /// Control optimisation, maximum-condition check and falsification.
    CheckMp(RunArgs),
    /// Spike-width sweep of the variation and its first-order expansion.
    SpikeSweep(RunArgs),
    /// Text summary of all runs under an output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `paths` (changes the config hash).
    #[arg(long)]
    paths: Option<usize>,
    /// Overrides `seed` (changes the config hash).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "SMP_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Restrict the report to this configuration's run.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn execute(cmd: Command, args: &RunArgs) -> Result<RunRecord> {
    if let Some(k) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global()?;
    }
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(n) = args.paths {
        cfg.paths = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    commands::run(cmd, &cfg, &args.out)
}

fn print_record(rec: &RunRecord) {
    for (name, c) in &rec.checks {
        println!("{} {name}: {:.6e} ({})", if c.pass { "PASS" } else { "FAIL" }, c.value, c.detail);
    }
    println!("{} {} [{}]", rec.command, if rec.pass { "passed" } else { "failed" }, &rec.config_hash[..16]);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Simulate(a) => execute(Command::Simulate, a).map(Some),
        Cmd::Adjoint(a) => execute(Command::Adjoint, a).map(Some),
        Cmd::CheckMp(a) => execute(Command::CheckMp, a).map(Some),
        Cmd::SpikeSweep(a) => execute(Command::SpikeSweep, a).map(Some),
        Cmd::Report(a) => (|| {
            let only = a.config.as_ref().map(|p| ExperimentConfig::load(p).map(|c| c.short_hash())).transpose()?;
            print!("{}", smp_lab::report::write(&a.out, only.as_deref())?);
            Ok(None)
        })(),
    };
    match result {
        Ok(Some(rec)) => {
            print_record(&rec);
            if rec.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
