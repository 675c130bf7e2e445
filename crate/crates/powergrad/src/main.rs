//! Command-line entry point: load an experiment file, run it, report where
//! the artifacts went.

use clap::{Args, Parser, Subcommand};
use powergrad::config::{self, ExperimentKind};
use powergrad::experiment::run_experiment;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "powergrad",
    version,
    about = "Differentiable power-system dynamics: simulate, identify parameters, tune stabilizers, scan loss landscapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover model parameters by fitting a reference trajectory.
    Identify(RunArgs),
    /// Tune stabilizer parameters to damp rotor-speed swings.
    TunePss(RunArgs),
    /// Map loss and gradient over per-parameter value grids.
    Scan(RunArgs),
    /// Run one forward simulation and export its trajectories.
    Simulate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides the config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Noise std as a fraction of reference RMS (overrides the config).
    #[arg(long)]
    noise: Option<f64>,
}

impl Command {
    fn expected_kind(&self) -> ExperimentKind {
        match self {
            Command::Identify(_) => ExperimentKind::Identify,
            Command::TunePss(_) => ExperimentKind::TunePss,
            Command::Scan(_) => ExperimentKind::Scan,
            Command::Simulate(_) => ExperimentKind::Simulate,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Identify(a) | Command::TunePss(a) | Command::Scan(a) | Command::Simulate(a) => a,
        }
    }
}

fn run(cli: &Cli) -> Result<(), (i32, String)> {
    let args = cli.command.args();
    let mut cfg = config::load_experiment(&args.config).map_err(|e| (1, e.to_string()))?;

    let expected = cli.command.expected_kind();
    if cfg.kind != expected {
        return Err((
            1,
            format!(
                "{}: kind = {:?} does not match the {:?} subcommand",
                args.config.display(),
                cfg.kind.as_str(),
                expected.as_str()
            ),
        ));
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(noise) = args.noise {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err((1, format!("--noise {noise} must be a finite fraction >= 0")));
        }
        cfg.noise_level = noise;
    }

    match run_experiment(&cfg) {
        Ok(report) => {
            for file in &report.files {
                println!("wrote {}", file.display());
            }
            Ok(())
        }
        Err(e) => Err((e.exit_code(), e.to_string())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
