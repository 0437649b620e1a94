use bvsmp::experiment::{ConfigError, ExperimentConfig};
use clap::{Parser, Subcommand};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bvsmp", version, about = "Run and validate corridor-control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random stream, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, overriding the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Report every problem with a config without running it.
    Validate { config: PathBuf },
}

fn fail(code: u8, kind: &str, field: Option<&str>, message: &str) -> ExitCode {
    let err = json!({ "error": { "kind": kind, "field": field, "message": message } });
    eprintln!("{err}");
    ExitCode::from(code)
}

fn config_failure(e: &ConfigError) -> ExitCode {
    fail(2, "config", e.field.as_deref(), &e.message)
}

fn load(path: &Path, cli: &Cli) -> Result<(ExperimentConfig, String), ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        fail(
            2,
            "config",
            None,
            &format!("cannot read {}: {e}", path.display()),
        )
    })?;
    let mut config = ExperimentConfig::parse(&text).map_err(|e| config_failure(&e))?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(t) = cli.threads {
        config.threads = Some(t);
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    Ok((config, text))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Validate { config } => {
            let (config, _) = match load(config, &cli) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let diagnostics = config.validate();
            println!("{}", json!({ "diagnostics": diagnostics }));
            if diagnostics.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Command::Run { config } => {
            let (config, text) = match load(config, &cli) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(d) = config.validate().into_iter().next() {
                return fail(2, "config", Some(&d.field), &d.message);
            }
            let out = config.out.clone().unwrap_or_else(|| PathBuf::from("out").join(config.kind.as_str()));
            match bvsmp::experiment::run(&config, &text, &out) {
                Ok(outcome) => match outcome.error {
                    None => {
                        println!("{}", json!({ "status": "ok", "out": out, "outputs": outcome.manifest.outputs }));
                        ExitCode::SUCCESS
                    }
                    Some(e) => fail(1, "runtime", None, &e.to_string()),
                },
                Err(e) => fail(1, "runtime", None, &e.to_string()),
            }
        }
    }
}
