use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nonlocal_cli::{exit_code, load_config, run, ExperimentName, RunOptions};

#[derive(Parser)]
#[command(
    name = "nonlocal",
    version,
    about = "Run nonlocal evolution experiments from a TOML config"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the model hypotheses and report the derived constants
    Validate(Common),
    /// Evolve an ensemble of random initial fields
    Simulate(Common),
    /// Measure absorbing-ball entry times against the analytic bound
    Absorb(Common),
    /// Sample the long-time attractor
    Attractor(Common),
    /// Compare attractors across kernel perturbations
    Continuity(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output_dir in the config)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match cli.command {
        Command::Validate(a) => (ExperimentName::Validate, a),
        Command::Simulate(a) => (ExperimentName::Simulate, a),
        Command::Absorb(a) => (ExperimentName::Absorb, a),
        Command::Attractor(a) => (ExperimentName::Attractor, a),
        Command::Continuity(a) => (ExperimentName::Continuity, a),
    };
    let config = match load_config(&args.config, name, args.seed, args.out.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.max(1))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot start {} worker threads: {e}", args.threads);
            return ExitCode::from(6);
        }
    };
    let options = RunOptions {
        out_dir: config.output_dir.clone(),
        threads: args.threads.max(1),
    };
    match pool.install(|| run(&config, &options)) {
        Ok(summary) => {
            print!("{}", summary.summary);
            println!("outputs in {}", options.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
