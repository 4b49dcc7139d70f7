// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::sync::Arc;

use addictfree_core::clock::{SystemClock, VirtualClock};
use addictfree_core::diversion::read_poi_csv;
use addictfree_core::domain::UserId;
use addictfree_core::simulator::{generate, Scenario};
use addictfree_core::stats::{month_csv, YearMonth};
use addictfree_service::api;
use addictfree_service::app::App;
use addictfree_service::config::{ServiceConfig, CONFIG_ENV};
use addictfree_service::simulate::{replay, ReplayOptions};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

/// Addiction-recovery support service.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Configuration file; defaults apply when absent.
    #[arg(long, env = CONFIG_ENV, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service and scheduler until interrupted.
    Serve,
    /// Load points of interest from a CSV file into the store.
    ImportPois { csv: PathBuf },
    /// Replay a scenario file through the service on a virtual clock.
    Simulate {
        scenario: PathBuf,
        /// Print the generated records as JSON instead of ingesting them.
        #[arg(long)]
        json: bool,
        /// Skip the hourly scheduler during the replay.
        #[arg(long)]
        no_ticks: bool,
        /// Store to write into instead of the configured one.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train and store a fresh model for one user.
    TrainUser { user_id: String },
    /// Print a user's month (YYYY-MM) as CSV.
    ExportMonth { user_id: String, month: YearMonth },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&config.log_level).unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Serve => {
            if config.operator_token.is_empty() {
                bail!("operator_token must be set to serve; without it no users can be created");
            }
            let app = Arc::new(App::open(config, Arc::new(SystemClock))?);
            let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
            runtime.block_on(api::serve(app))?;
        }
        Command::ImportPois { csv } => {
            let file = std::fs::File::open(&csv).with_context(|| format!("opening {}", csv.display()))?;
            let pois = read_poi_csv(file).with_context(|| format!("reading {}", csv.display()))?;
            let app = App::open(config, Arc::new(SystemClock))?;
            let n = app.import_pois(pois)?;
            app.shutdown()?;
            println!("imported {n} points of interest");
        }
        Command::Simulate {
            scenario,
            json,
            no_ticks,
            store,
        } => {
            let text = std::fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let scenario = Scenario::from_toml_str(&text)?;
            if json {
                let out = generate(&scenario)?;
                println!("{}", serde_json::to_string_pretty(&out)?);
                return Ok(());
            }
            let mut config = config;
            if let Some(store) = store {
                config.store_path = store;
            }
            let clock = Arc::new(VirtualClock::new(scenario.start));
            let app = App::open(config, clock.clone())?;
            let report = replay(&app, &clock, &scenario, ReplayOptions { ticks: !no_ticks })?;
            app.shutdown()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::TrainUser { user_id } => {
            let app = App::open(config, Arc::new(SystemClock))?;
            let meta = app.train_user(&UserId::new(user_id))?;
            app.shutdown()?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
        }
        Command::ExportMonth { user_id, month } => {
            let app = App::open(config, Arc::new(SystemClock))?;
            let series = app.monthly(&UserId::new(user_id), Some(month))?;
            print!("{}", month_csv(&series));
        }
    }
    Ok(())
}
