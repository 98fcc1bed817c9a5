//! One driver pipeline as a bus client of a running supervisor.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Parser;
use racesup_core::bus::{Bus, NodeRegistration};
use racesup_core::pipelines::{runner, PipelineConfig};
use racesup_core::sim::TrackModel;

#[derive(Parser)]
#[command(name = "racesup-pipeline", version, about = "Run one driver pipeline")]
struct Cli {
    /// Pipeline id; must match the configuration.
    #[arg(long)]
    id: String,
    #[arg(long)]
    bus_endpoint: String,
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("racesup-pipeline: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(&cli.config)?;
    anyhow::ensure!(cfg.id == cli.id, "config is for {:?}, not {:?}", cfg.id, cli.id);
    let track = TrackModel::from_csv_file(cfg.track.as_ref()).with_context(|| format!("track {}", cfg.track))?;
    let (bus, node) = Bus::connect(&cli.bus_endpoint, NodeRegistration::slave(cli.id.clone()))
        .with_context(|| format!("connecting to {}", cli.bus_endpoint))?;
    let stop = AtomicBool::new(false);
    runner::run(&node, cfg, Arc::new(track), &stop)?;
    bus.shutdown();
    Ok(())
}
