//! Command-line front end: simulate projection data, reconstruct from a
//! config file, or run a named preset experiment.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tomocal::harness::{
    make_problem, run_experiment, run_preset, trace_csv_string, write_pgm, ExperimentConfig,
};
use tomocal::phantom::ImageGrid;
use tomocal::Error;

#[derive(Parser)]
#[command(
    name = "tomocal",
    version,
    about = "Tomographic self-calibration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom and (noisy) sinogram for a configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the configured reconstruction scheme and write its outputs.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run a named preset experiment (e.g. exp-separability, exp-dtheta).
    Experiment {
        preset: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn simulate(config: &Path, out_dir: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(config)?;
    let problem = make_problem(&cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let phantom = ImageGrid::new(problem.side, problem.truth.x_true.clone())?;
    write_pgm(&phantom, &out_dir.join(format!("{}_true.pgm", cfg.name)))?;
    let n_det = problem.det.n_det;
    let mut sino = String::new();
    for view in problem.b_noisy.chunks(n_det) {
        let row: Vec<String> = view.iter().map(|v| format!("{v:.16e}")).collect();
        sino.push_str(&row.join(","));
        sino.push('\n');
    }
    std::fs::write(out_dir.join(format!("{}_sino.csv", cfg.name)), sino)?;
    Ok(())
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Simulate { config, out_dir } => simulate(&config, &out_dir),
        Command::Reconstruct { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let artifacts = run_experiment(&cfg, &out_dir)?;
            print!("{}", trace_csv_string(&artifacts.result.trace));
            Ok(())
        }
        Command::Experiment { preset, out_dir } => {
            for artifacts in run_preset(&preset, &out_dir)? {
                let last = artifacts.result.trace.rows.last().unwrap();
                eprintln!(
                    "{}: {} iterations, objective {:.6e}",
                    artifacts.trace_path.display(),
                    last.iter,
                    last.objective
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage,
                Error::Config(_) => "config",
                Error::Io(_) => "io",
                _ => "harness",
            };
            eprintln!("error [{stage}]: {e}");
            if matches!(e, Error::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
