mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::{json, Value};

use sace_core::{Error, ErrorClass};

use config::{Command, RunConfig};
use run::{Context, Outcome};

/// Survivor average causal effects for multi-arm trials with truncation by death.
#[derive(Debug, Parser)]
#[command(name = "sace", version)]
struct Cli {
    /// What to run.
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, env = "SACE_CONFIG")]
    config: PathBuf,
    /// Worker thread cap (defaults to all cores).
    #[arg(long, env = "SACE_THREADS")]
    threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, env = "SACE_SEED")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, env = "SACE_OUT")]
    out: Option<PathBuf>,
}

const DEFAULT_SEED: u64 = 1;

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Validation => 1,
        ErrorClass::Numerical => 2,
        ErrorClass::Infeasible => 3,
    }
}

fn manifest(cli: &Cli, config: Option<&RunConfig>, seed: u64, result: &Result<Outcome, Error>) -> Value {
    let mut m = json!({
        "tool": "sace",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command,
        "config_path": cli.config,
        "seed": seed,
        "threads": cli.threads,
        "config": config,
    });
    match result {
        Ok(out) => {
            m["status"] = json!("ok");
            m["exit_code"] = json!(0);
            m["reason"] = Value::Null;
            m["outputs"] = json!(out.outputs);
            m["warnings"] = json!(out.warnings);
            if !out.details.is_null() {
                m["details"] = out.details.clone();
            }
        }
        Err(e) => {
            m["status"] = json!("error");
            m["exit_code"] = json!(exit_code(e));
            m["reason"] = json!(e.reason());
            m["message"] = json!(e.to_string());
        }
    }
    m["timestamp"] = json!(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
    m
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    let config = load_config(&cli.config);
    let base = cli.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let (cfg, seed, out_dir, result) = match config {
        Err(e) => (None, cli.seed.unwrap_or(DEFAULT_SEED), cli.out.clone(), Err(e)),
        Ok(cfg) => {
            let seed = cli.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
            let out = cli.out.clone().unwrap_or_else(|| base.join(&cfg.output.dir));
            let result = match cfg.command {
                Some(c) if c != cli.command => Err(Error::Validation(format!(
                    "config is for '{}' but '{}' was requested",
                    json!(c).as_str().unwrap_or_default(),
                    json!(cli.command).as_str().unwrap_or_default()
                ))),
                _ => run::execute(cli.command, &Context { config: &cfg, base: base.clone(), out: out.clone(), seed }),
            };
            (Some(cfg), seed, Some(out), result)
        }
    };

    let code = match &result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e)
        }
    };
    if let Some(dir) = out_dir {
        let m = manifest(&cli, cfg.as_ref(), seed, &result);
        let written = std::fs::create_dir_all(&dir)
            .and_then(|_| std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m).unwrap_or_default() + "\n"));
        if let Err(e) = written {
            eprintln!("error: cannot write manifest: {e}");
        }
    }
    ExitCode::from(code)
}
