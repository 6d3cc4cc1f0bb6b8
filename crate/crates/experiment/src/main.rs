use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rhcbf_experiment::config::ExperimentConfig;
use rhcbf_experiment::{pipeline, plot, report, sweep, ExpError};

#[derive(Debug, Parser)]
#[command(name = "rhcbf", about = "Learn, verify and deploy robust hybrid barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Accept artifacts produced by a different config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the expert and sample the boundary ring.
    Collect,
    /// Train the configured barrier variants.
    Train,
    /// Check the trained barriers; exits with 2 if any is not certified.
    Verify,
    /// Count steps over the initial-condition grid for each controller.
    Sweep,
    /// Render the sweep grids as SVG.
    Plot,
    /// Summarise all stages.
    Report,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ExpError> for Failure {
    fn from(e: ExpError) -> Self {
        match e {
            ExpError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let path = cli.config.ok_or_else(|| Failure::Usage("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    let force = cli.force;
    match cli.command {
        Command::Collect => {
            let b = pipeline::cmd_collect(&cfg)?;
            let st = &b.manifest.stats;
            println!(
                "collected {} flow and {} jump samples ({} of {} runs dropped), {} ring samples",
                st.flow_samples, st.jump_samples, st.dropped_runs, st.runs, b.manifest.ring_count
            );
        }
        Command::Train => {
            for s in pipeline::cmd_train(&cfg, force)? {
                let v = s.best_violation;
                println!(
                    "{}: best epoch {} of {}, violations safe {:.4} ring {:.4} flow {:.4} jump {:.4}",
                    s.variant.name(),
                    s.best_epoch,
                    s.epochs,
                    v[0],
                    v[1],
                    v[2],
                    v[3]
                );
            }
        }
        Command::Verify => {
            let (reports, certified) = pipeline::cmd_verify(&cfg, force)?;
            for (v, r) in cfg.train.variants.iter().zip(&reports) {
                println!("{}:\n{}", v.name(), r.summary());
            }
            return Ok(certified);
        }
        Command::Sweep => {
            let result = sweep::cmd_sweep(&cfg, force)?;
            print!("{}", sweep::aggregate_csv(&result));
        }
        Command::Plot => {
            for f in plot::cmd_plot(&cfg, force)? {
                println!("{f}");
            }
        }
        Command::Report => print!("{}", report::cmd_report(&cfg)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
