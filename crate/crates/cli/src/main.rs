use std::path::PathBuf;
use std::process::ExitCode;

use cdrloc::eval::EvalReport;
use cdrloc::pipeline::{self, EstimateOptions, PipelineConfig, PipelineError};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cdrloc", version, about = "Localize phone trajectories from call detail records")]
struct Cli {
    /// JSON configuration file; unset fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set skf.q_move=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Simulator seed (shorthand for `--set sim.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the per-user stages; 0 uses all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Estimate with the bare enclosing circles, ignoring learned extensions.
    #[arg(long, global = true)]
    no_opt: bool,
    /// Write filtered rather than smoothed positions and labels.
    #[arg(long, global = true)]
    filtered: bool,
    /// Snap STAY estimates to the nearest building.
    #[arg(long, global = true)]
    match_stay_buildings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world, ground truth, CDR and calibration fixes.
    Simulate,
    /// Learn coverage radius extensions from calibration fixes.
    Optimize,
    /// Run the switching Kalman filter and smoother over every user.
    Estimate,
    /// Snap estimates to the road network.
    Match,
    /// Score all four pipeline variants against ground truth.
    Evaluate,
    /// simulate, optimize, estimate, match and evaluate in one go.
    RunAll,
}

impl Cli {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("sim.seed={seed}"));
        }
        if let Some(jobs) = self.jobs {
            overrides.push(format!("jobs={jobs}"));
        }
        if self.match_stay_buildings {
            overrides.push("matcher.match_stay_buildings=true".into());
        }
        pipeline::load_config(self.config.as_deref(), &overrides)
    }

    fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions {
            no_opt: self.no_opt,
            filtered: self.filtered,
        }
    }
}

fn print_report(report: &EvalReport) {
    println!("{:<10} {:>12} {:>12}", "variant", "stay rmse m", "move rmse m");
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
    for row in &report.rmse {
        println!("{:<10} {:>12} {:>12}", row.variant.as_str(), cell(row.stay_m), cell(row.move_m));
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = cli.config()?;
    match cli.command {
        Command::Simulate => {
            let s = pipeline::cmd_simulate(&config)?;
            println!(
                "{} cells, {} roads, {} users, {} CDR records, {} truth fixes, {} observations",
                s.cells, s.roads, s.users, s.cdr_records, s.truth_fixes, s.observations
            );
        }
        Command::Optimize => {
            let r = pipeline::cmd_optimize(&config)?;
            println!(
                "penalty {:.3} -> {:.3}, covered {:.3} -> {:.3}",
                r.initial_penalty, r.final_penalty, r.covered_fraction_before, r.covered_fraction_after
            );
        }
        Command::Estimate => {
            let n = pipeline::cmd_estimate(&config, cli.estimate_options())?;
            println!("{n} estimates");
        }
        Command::Match => {
            let m = pipeline::cmd_match(&config)?;
            println!("{} points processed", m.len());
        }
        Command::Evaluate => print_report(&pipeline::cmd_evaluate(&config)?),
        Command::RunAll => print_report(&pipeline::run_all(&config, cli.estimate_options())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
