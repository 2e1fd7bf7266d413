use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contact_aware::estimation::EstimatorConfig;
use contact_aware::scenario::load_scenario;
use contact_aware_cli::{cmd_export_plot, cmd_identify, cmd_optimize_goal, cmd_plan, cmd_simulate, CliError, PlanOptions};

#[derive(Parser)]
#[command(name = "contact-aware", version, about = "Contact-aware control and band-aware planning experiments")]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop rollout toward the task goal.
    Simulate { scenario: PathBuf },
    /// Plans in every band mode and keeps the cheapest path.
    Plan {
        scenario: PathBuf,
        /// Replay the best path through the simulator.
        #[arg(long)]
        execute: bool,
        #[arg(long)]
        no_smoothing: bool,
    },
    /// Offline stiffness identification over a recorded contacts.csv.
    Identify {
        contacts: PathBuf,
        /// Take estimator settings from this scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Reduces band stretch at the goal while holding the end effector.
    OptimizeGoal {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        sigma: u8,
    },
    /// Writes plot-ready series from a run CSV or plan JSON.
    ExportPlot { input: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = &cli.out;
    match cli.command {
        Command::Simulate { scenario } => {
            let s = cmd_simulate(&scenario, out, cli.seed)?;
            println!("steps {} max_force {:.6} tracking_error_final {:.3e}", s.steps, s.max_force, s.tracking_error_final);
        }
        Command::Plan { scenario, execute, no_smoothing } => {
            let best = cmd_plan(&scenario, out, &PlanOptions { seed: cli.seed, execute, no_smoothing })?;
            println!("best sigma {} cost {:.6} waypoints {}", best.sigma, best.total_cost, best.path.len());
        }
        Command::Identify { contacts, scenario } => {
            let config = match scenario {
                Some(p) => load_scenario(p)?.estimator,
                None => EstimatorConfig::default(),
            };
            let r = cmd_identify(&contacts, out, config)?;
            for (k, v) in &r.k_hat {
                println!("{k} {v:.6}");
            }
        }
        Command::OptimizeGoal { scenario, sigma } => {
            let r = cmd_optimize_goal(&scenario, out, sigma)?;
            println!("stretch reduction {:.1}% drift {:.2e} iterations {}", 100.0 * r.stretch_reduction, r.ee_drift, r.iterations);
        }
        Command::ExportPlot { input } => {
            for f in cmd_export_plot(&input, out)? {
                println!("{}", f.display());
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
