//! Command-line driver: warm-up, training, corridor building, closed-loop
//! synthesis, evaluation against the exact Dubins oracle, and SVG plots.
//!
//! Exit status is 0 on success, 2 when the configuration or arguments are
//! invalid, and 3 when a run fails.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttr_core::sysdyn::State;
use ttr_core::Error;

use commands::{parse_state, PlotInput, TrainOptions};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "ttr", version, about = "Conservative time-to-reach corridors from a recurrent inverse-dynamics network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; the Dubins defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration entry, e.g. `--set training.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate and save both warm-up datasets.
    Warmup(ConfigArgs),
    /// Warm up and run the dynamic training loop.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a snapshot written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many dynamic iterations are done.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Trace a sample dataset into a value corridor.
    Corridor {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset CSV; repeatable. Defaults to `dataset.csv` in the output
        /// directory, plus `d2.csv` when `corridor.include_warmup` is set.
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
    },
    /// Drive the system from start states with the corridor's value gradient.
    Synthesize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corridor: Option<PathBuf>,
        /// Start state `px,py,theta`; repeatable. Defaults to x_bar.
        #[arg(long = "from", value_parser = parse_state_arg, allow_hyphen_values = true)]
        starts: Vec<State>,
    },
    /// Compare corridor values with the optimal times.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corridor: Option<PathBuf>,
        /// State `px,py,theta`; repeatable. Defaults to x_bar.
        #[arg(long = "state", value_parser = parse_state_arg, allow_hyphen_values = true)]
        states: Vec<State>,
    },
    /// Exact minimum time between two Dubins states.
    Oracle {
        #[arg(long, value_parser = parse_state_arg, allow_hyphen_values = true)]
        from: State,
        #[arg(long, value_parser = parse_state_arg, allow_hyphen_values = true, default_value = "0,0,0")]
        to: State,
        /// Also run the grid search with this goal tolerance.
        #[arg(long)]
        brute_tol: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        brute_grid: f64,
    },
    /// Render a corridor and/or trajectories as SVG.
    Plot {
        #[arg(long)]
        corridor: Option<PathBuf>,
        #[arg(long = "trajectory")]
        trajectories: Vec<PathBuf>,
        /// Draw optimal-time contours at this heading.
        #[arg(long, allow_hyphen_values = true)]
        contours: Option<f64>,
        #[arg(long, short, default_value = "plot.svg")]
        out: PathBuf,
    },
}

fn parse_state_arg(s: &str) -> Result<State, String> {
    parse_state(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Warmup(c) => commands::warmup(&c.load()?).map(|_| true),
        Command::Train {
            cfg,
            resume,
            stop_after,
            quiet,
        } => commands::train(
            &cfg.load()?,
            &TrainOptions {
                resume,
                stop_after,
                quiet,
            },
        )
        .map(|_| true),
        Command::Corridor { cfg, mut datasets } => {
            let cfg = cfg.load()?;
            if datasets.is_empty() {
                datasets.push(cfg.output_dir.join("dataset.csv"));
                if cfg.corridor.include_warmup {
                    datasets.push(cfg.output_dir.join("d2.csv"));
                }
            }
            commands::corridor(&cfg, &datasets).map(|_| true)
        }
        Command::Synthesize { cfg, corridor, starts } => {
            let cfg = cfg.load()?;
            let corridor = corridor.unwrap_or_else(|| cfg.output_dir.join("corridor.csv"));
            commands::synthesize(&cfg, &corridor, &starts)
        }
        Command::Evaluate { cfg, corridor, states } => {
            let cfg = cfg.load()?;
            let corridor = corridor.unwrap_or_else(|| cfg.output_dir.join("corridor.csv"));
            commands::evaluate(&cfg, &corridor, &states).map(|_| true)
        }
        Command::Oracle {
            from,
            to,
            brute_tol,
            brute_grid,
        } => commands::oracle(&from, &to, brute_tol.map(|t| (t, brute_grid))).map(|_| true),
        Command::Plot {
            corridor,
            trajectories,
            contours,
            out,
        } => commands::plot(&PlotInput {
            corridor,
            trajectories,
            contours,
            out,
        })
        .map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // a rollout that did not reach the target is a runtime failure
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) | Error::Parse(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
