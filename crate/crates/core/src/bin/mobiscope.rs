use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mobiscope::config::PipelineConfig;
use mobiscope::pipeline::{Runner, Stage};
use mobiscope::{Error, Result};

#[derive(Parser)]
#[command(name = "mobiscope", version, about = "GPS pings to an event-study evaluation of a spatial intervention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "mobiscope.conf")]
    config: PathBuf,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse pings and apply the device-quality filter.
    Ingest,
    /// Detect stays and match them to POIs.
    Stays,
    /// Infer monthly homes and keep trips outside the home.
    Homes,
    /// POI visitor profiles and device-month exposure.
    Profiles,
    /// Device records and the hexagon-month panel.
    Panel,
    /// Fit the event study for every configured outcome.
    Fit,
    /// Run every stage in order.
    All,
    /// Write a synthetic scenario to the configured input paths.
    Simulate,
    /// Print the per-month table of a fit.
    Report {
        /// Outcome to report (default: first configured outcome).
        #[arg(long)]
        outcome: Option<String>,
    },
    /// Write a default configuration file.
    Init,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    if let Command::Init = cli.command {
        if cli.config.exists() && !cli.force {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                cli.config.display()
            )));
        }
        std::fs::write(&cli.config, PipelineConfig::default_text())?;
        eprintln!("wrote {}", cli.config.display());
        return Ok(());
    }
    let mut config = PipelineConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.set("sim.seed", &seed.to_string())?;
    }
    let mut runner = Runner::new(config);
    runner.force = cli.force;
    match cli.command {
        Command::Ingest => runner.run_stage(Stage::Ingest).map(drop),
        Command::Stays => runner.run_stage(Stage::Stays).map(drop),
        Command::Homes => runner.run_stage(Stage::Homes).map(drop),
        Command::Profiles => runner.run_stage(Stage::Profiles).map(drop),
        Command::Panel => runner.run_stage(Stage::Panel).map(drop),
        Command::Fit => runner.run_stage(Stage::Fit).map(drop),
        Command::All => runner.run_all().map(drop),
        Command::Simulate => runner.simulate(),
        Command::Report { outcome } => {
            print!("{}", runner.report(outcome.as_deref())?);
            Ok(())
        }
        Command::Init => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
