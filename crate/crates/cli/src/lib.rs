//! Pipeline orchestration (`mint` binary) and the HTTP audit service.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod layout;
pub mod service;

use std::fs;

use serde_json::Value;

use cli::{Cli, Command};
use config::PipelineConfig;
use error::CliError;
use layout::{require, Layout};

/// Defaults, then the config file (or the one a previous stage left in
/// `--out`), then `--seed`.
pub fn resolve_config(cli: &Cli, layout: &Layout) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if layout.resolved_config().exists() => PipelineConfig::load(&layout.resolved_config())?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolve_seeds();
    Ok(cfg)
}

/// Runs one subcommand. `Ok(Some(v))` is a JSON summary, `Ok(None)` means the
/// command already wrote its output.
pub fn run(cli: Cli) -> Result<Option<Value>, CliError> {
    let layout = Layout::new(&cli.out);
    let mut cfg = resolve_config(&cli, &layout)?;
    fs::create_dir_all(layout.root())?;
    let summary = match &cli.command {
        Command::GenData(a) => commands::gen_data(&mut cfg, a, &layout)?,
        Command::TrainAudited(a) => commands::train_audited_cmd(&mut cfg, a, &layout)?,
        Command::Extract(a) => commands::extract(&mut cfg, a, &layout)?,
        Command::TrainMint(a) => commands::train_mint_cmd(&mut cfg, a, &layout)?,
        Command::Evaluate(a) => commands::evaluate(&mut cfg, a, &layout)?,
        Command::Report(a) => {
            print!("{}", commands::report(a, &layout)?);
            return Ok(None);
        }
        Command::Serve(a) => {
            let registry_path = a.registry.clone().unwrap_or_else(|| layout.registry());
            require(&registry_path)?;
            let registry = mint_core::audit::AuditRegistry::load(&registry_path)?;
            let serve = &mut cfg.serve;
            if let Some(b) = &a.bind {
                serve.bind = b.clone();
            }
            if let Some(n) = a.max_concurrent {
                serve.max_concurrent = n;
            }
            if a.retain_uploads.is_some() {
                serve.retain_uploads = a.retain_uploads.clone();
            }
            let config = service::ServiceConfig {
                max_concurrent: serve.max_concurrent,
                max_upload_bytes: serve.max_upload_bytes,
                retain_uploads: serve.retain_uploads.clone(),
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(service::serve(registry, config, &serve.bind))?;
            return Ok(None);
        }
    };
    Ok(Some(summary))
}
