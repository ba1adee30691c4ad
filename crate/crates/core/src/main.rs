use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snake_rom::scenario_io::{self, Scenario};
use snake_rom::{gaits, Error};

#[derive(Parser)]
#[command(name = "snakeplan", version, about = "Snake robot gait simulation, prediction and corridor planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fixed gait and write its trajectory.
    Simulate(RunArgs),
    /// Compare horizon predictions against a finer-step plant.
    Predict(RunArgs),
    /// Closed-loop corridor planning towards the scenario goal.
    Plan(RunArgs),
    /// Shipped gait presets.
    Gaits {
        #[command(subcommand)]
        command: GaitsCommand,
    },
}

#[derive(Subcommand)]
enum GaitsCommand {
    List,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario duration [s].
    #[arg(long)]
    duration: Option<f64>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<Scenario, Error> {
        let mut scenario = scenario_io::load_scenario(&self.scenario)?;
        if let Some(d) = self.duration {
            scenario.duration = d;
        }
        if let Some(s) = self.seed {
            scenario.seed = s;
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => {
            let scenario = args.load()?;
            let report = scenario_io::run_simulate(&scenario, Some(&args.out))?;
            let d = report.displacement;
            println!("samples: {}", report.records.len());
            println!("CoM displacement [m]: {:.4} {:.4} {:.4}", d.x, d.y, d.z);
            let duty: Vec<String> = report.contact_duty.iter().map(|c| format!("{c:.2}")).collect();
            println!("contact duty per link: {}", duty.join(" "));
        }
        Command::Predict(args) => {
            let scenario = args.load()?;
            let report = scenario_io::run_predict(&scenario, Some(&args.out))?;
            println!("horizons: {}", report.horizons.len());
            println!("terminal CoM error [m]: max {:.3e}, mean {:.3e}", report.max_terminal_error(), report.mean_terminal_error());
        }
        Command::Plan(args) => {
            let scenario = args.load()?;
            let report = scenario_io::run_plan(&scenario, Some(&args.out))?;
            println!("goal reached: {} at t = {:.2} s", report.reached, report.elapsed());
            println!("final distance [m]: {:.4}", report.final_distance);
            println!("max executed corridor excess [m]: {:.4}", report.max_violation);
            let converged = report.solves.iter().filter(|s| s.converged).count();
            println!("solves: {} ({converged} converged)", report.solves.len());
        }
        Command::Gaits { command: GaitsCommand::List } => {
            for g in gaits::presets() {
                println!("{:<12} {}", g.name, g.description);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{} error: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
