use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use quadflat::cli::{cmd_compare, cmd_generate, cmd_simulate};
use quadflat::scenario::load_scenario;

#[derive(Parser)]
#[command(version, about = "Flat B-spline trajectories and tracking simulation for quadcopters")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the trajectory and write trajectory.json and reference.csv.
    Generate(Common),
    /// Run the closed loop and write trace.csv and metrics.json.
    Simulate(Common),
    /// Run all strategies with and without wind and print the IAE table.
    Compare(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Sample step for generate, control period for simulate/compare (s).
    #[arg(long)]
    dt: Option<f64>,
    /// Reserved; all runs are deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: Args) -> anyhow::Result<()> {
    match args.command {
        Command::Generate(c) => {
            let loaded = load_scenario(&c.scenario)?;
            let dump = cmd_generate(&loaded, &c.out, c.dt)?;
            println!("{} control points, order {}, written to {}", dump.control_points.len(), dump.order, c.out.display());
        }
        Command::Simulate(c) => {
            let loaded = load_scenario(&c.scenario)?;
            let report = cmd_simulate(&loaded, &c.out, c.dt)?;
            let m = &report.metrics;
            println!(
                "{}: IAE {:.6} m·s, max error {:.4} m, max tilt {:.2} deg, {} saturated periods",
                report.strategy,
                m.iae,
                m.max_position_error,
                m.max_tilt.to_degrees(),
                m.saturation_count
            );
        }
        Command::Compare(c) => {
            let loaded = load_scenario(&c.scenario)?;
            let report = cmd_compare(&loaded, Some(&c.out), c.dt)?;
            print!("{}", report.table());
            for cell in report.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("{} (wind: {}): {}", cell.strategy, cell.windy, cell.error.as_deref().unwrap_or_default());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Some(seed) = match &args.command {
        Command::Generate(c) | Command::Simulate(c) | Command::Compare(c) => c.seed,
    } {
        log::debug!("--seed {seed} ignored");
    }
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
