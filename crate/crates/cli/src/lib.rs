//! Command line and HTTP service for lensflow.

pub mod args;
pub mod commands;
pub mod config;
pub mod request;
pub mod service;

use std::io::Write;

use args::{Cli, Command};
use config::{FileConfig, Overrides, ServiceConfig};

/// A configuration problem the user must fix on the command line; exits 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn resolve_config(cli: &Cli) -> anyhow::Result<ServiceConfig> {
    let file = match &cli.global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut over = Overrides {
        model: cli.global.model.clone(),
        ..Overrides::default()
    };
    match &cli.command {
        Command::Serve(s) => {
            over.port = s.port;
            over.host = s.host.clone();
            over.static_dir = s.static_dir.clone();
        }
        Command::Experiment(a) => over.corpus = a.corpus.clone(),
        Command::LnReport(a) => over.corpus = a.corpus.clone(),
        Command::RegNeurons(a) => over.corpus = a.corpus.clone(),
        _ => {}
    }
    ServiceConfig::resolve(over, file)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let config = resolve_config(&cli)?;
    let bundle = commands::load_bundle(&config)?;
    match &cli.command {
        Command::Info => commands::info(&bundle, out),
        Command::Trace(a) => commands::trace(&bundle, a, out),
        Command::Graph(a) => commands::graph(&bundle, &config, a, out),
        Command::Experiment(a) => commands::experiment(&bundle, &config, a, out),
        Command::LnReport(a) => commands::ln_report(&bundle, &config, a, out),
        Command::RegNeurons(a) => commands::reg_neurons(&bundle, &config, a, out),
        Command::Serve(_) => tokio::runtime::Runtime::new()?.block_on(service::serve(config, bundle)),
    }
}
