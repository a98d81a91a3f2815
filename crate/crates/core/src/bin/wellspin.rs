use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use wellspin::harness::{self, exit, ExperimentConfig, RunOptions, Scenario};

/// Discrete multi-well elasticity and lattice spin Hamiltonian experiments.
#[derive(Parser)]
#[command(name = "wellspin", version, about)]
struct RunArgs {
    /// laminate-sweep, spin-lemma-suite, rigidity-family, antiferro-sweep,
    /// lattice-sweep or wellset-analysis.
    scenario: String,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Proceed when the mesh fails the incompatibility check.
    #[arg(long)]
    force: bool,
    /// Cap on worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output root (overrides the config and WELLSPIN_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only validate the config and print diagnostics.
    #[arg(long)]
    validate: bool,
}

fn main() -> ExitCode {
    match RunArgs::try_parse() {
        Ok(args) => ExitCode::from(run(args) as u8),
        Err(e) => usage(e),
    }
}

fn usage(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if e.use_stderr() {
        ExitCode::from(exit::INTERNAL as u8)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(args: RunArgs) -> i32 {
    let scenario: Scenario = match args.scenario.parse() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return exit::INTERNAL;
        }
    };
    let base_dir = args
        .config
        .as_ref()
        .and_then(|p| p.parent())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    if let Some(path) = &args.config {
        let diags = harness::validate_config(path, Some(scenario));
        for d in &diags {
            eprintln!("{d}");
        }
        if !diags.is_empty() {
            return exit::INTERNAL;
        }
    }
    if args.validate {
        println!("config ok");
        return exit::OK;
    }
    let cfg = match &args.config {
        Some(p) => match ExperimentConfig::from_file(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return exit::INTERNAL;
            }
        },
        None => ExperimentConfig::default_for(scenario),
    };
    let opts = RunOptions { force: args.force, out_root: args.out, base_dir, write: true };
    match harness::run_with_workers(scenario, &cfg, &opts, args.workers) {
        Ok(out) => {
            print!("{}", harness::render_digest(&out));
            if let Some(dir) = &out.dir {
                println!("artifacts: {}", dir.display());
            }
            out.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            harness::exit_code_for(&e)
        }
    }
}
