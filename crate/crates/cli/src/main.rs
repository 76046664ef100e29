mod args;
mod commands;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Parser;
use serde::Serialize;

use args::{Cli, Command};

/// What a run did and how it was configured; written as `run.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    fn write(&self, out: &Path) -> anyhow::Result<()> {
        let path = out.join("run.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn config_of(cmd: &Command) -> serde_json::Result<serde_json::Value> {
    match cmd {
        Command::Synth(a) => serde_json::to_value(a),
        Command::Pitch(a) => serde_json::to_value(a),
        Command::Tokenize(a) => serde_json::to_value(a),
        Command::Sample(a) => serde_json::to_value(a),
        Command::Train(a) => serde_json::to_value(a),
        Command::Infer(a) => serde_json::to_value(a),
        Command::RankTrain(a) => serde_json::to_value(a),
        Command::Index(a) => serde_json::to_value(a),
        Command::Query(a) => serde_json::to_value(a),
        Command::Eval(a) => serde_json::to_value(a),
        Command::LengthStudy(a) => serde_json::to_value(a),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if g.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(g.jobs)
            .build_global()
            .context("configuring the thread pool")?;
    }
    std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    let artifacts = commands::dispatch(&cli.command, g)?;
    RunManifest {
        subcommand: cli.command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: g.seed,
        config: serde_json::json!({
            "global": serde_json::to_value(g)?,
            "command": config_of(&cli.command)?,
        }),
        artifacts,
    }
    .write(&g.out)
}

/// The error chain on one line, leaving out causes a message already quotes.
fn report(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !last.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {}", report(&e));
        std::process::exit(1);
    }
}
