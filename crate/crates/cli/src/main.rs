//! `latent-audit`: concept discovery, importance, removal and fairness
//! audits over embedding matrices.
//!
//! Exit status is 0 on success, 2 when flags or inputs fail validation
//! (nothing is written) and 1 when a computation fails.

mod cli;
mod commands;
mod config;
mod manifest;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, Parser};

use crate::cli::{Cli, Cmd};
use crate::commands::Invocation;
use crate::manifest::{InputDigest, RunManifest};

/// A validation failure: bad flags, bad config or unusable inputs.
#[derive(Debug)]
pub struct Invalid(pub String);

impl From<latent_audit::Error> for Invalid {
    fn from(e: latent_audit::Error) -> Self {
        Invalid(e.to_string())
    }
}

enum Failure {
    Invalid(Invalid),
    Runtime(anyhow::Error),
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Invalid(e)
    }
}

fn prepare_out(out: &Path) -> Result<(), Invalid> {
    if out.exists() && !out.is_dir() {
        return Err(Invalid(format!("--out {} exists and is not a directory", out.display())));
    }
    Ok(())
}

/// Validates, runs and records one invocation.
fn run(inv: &Invocation, out: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    prepare_out(out)?;
    let loaded = inv.load()?;
    let inputs = inv.inputs().iter().map(|p| InputDigest::of(p)).collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(anyhow::anyhow!("cannot create {}: {e}", out.display())))?;
    let seeds = inv.execute(loaded, out).map_err(Failure::Runtime)?;
    let manifest = RunManifest {
        command: inv.name().into(),
        config: inv.clone(),
        seeds,
        inputs,
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    manifest.save(out).map_err(Failure::Runtime)
}

fn replay(manifest: &Path, out: &Path) -> Result<(), Failure> {
    let m = RunManifest::load(manifest)?;
    if m.version != env!("CARGO_PKG_VERSION") {
        eprintln!("warning: manifest was written by version {}, this is {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    for input in &m.inputs {
        input.verify()?;
    }
    run(&m.config, out)
}

fn usage(subcommand: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match cmd.find_subcommand_mut(subcommand) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let name = cli.command.name();
    let result = match cli.command {
        Cmd::Replay(args) => replay(&args.manifest, &args.out),
        cmd => match cmd.resolve(cli.config.as_deref()) {
            Ok((inv, out)) => run(&inv, &out),
            Err(e) => Err(e.into()),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(Invalid(msg))) => {
            eprintln!("error: {msg}\n\n{}", usage(name));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
