//! The `ora` command line: a thin dispatcher over the pipeline library.
//!
//! Usage: `ora <subcommand> [--config <path>] [--set key=value]...`
//! Configuration comes only from the config file and `--set` overrides;
//! environment variables are never read. Usage and configuration errors
//! exit 2, runtime failures exit 1, and every failure prints a single
//! `error: ...` line on stderr.

use std::path::PathBuf;

use ora_core::config::RunConfig;
use ora_core::pipeline;
use ora_core::Error;

const USAGE: &str = "usage: ora <synth|build-vocab|fit-bins|pretrain|embed|probe|evaluate|report|params> \
[--config <path>] [--set key=value]...";

pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            2
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err}");
            match err {
                // bad configs and missing inputs are caller mistakes
                Error::Config(_) => 2,
                Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            }
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn dispatch(args: &[String]) -> Result<String, CliError> {
    let mut iter = args.iter();
    let command = iter
        .next()
        .ok_or_else(|| CliError::Usage(USAGE.to_string()))?
        .as_str();

    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    while let Some(flag) = iter.next() {
        match flag.as_str() {
            "--config" => {
                let value = iter
                    .next()
                    .ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
                config_path = Some(PathBuf::from(value));
            }
            "--set" => {
                let value = iter
                    .next()
                    .ok_or_else(|| CliError::Usage("--set needs key=value".into()))?;
                let (k, v) = value
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--set wants key=value, got {value:?}")))?;
                overrides.push((k.to_string(), v.to_string()));
            }
            other => {
                return Err(CliError::Usage(format!("unknown flag {other:?}; {USAGE}")));
            }
        }
    }

    let cfg = RunConfig::from_sources(config_path.as_deref(), &overrides).map_err(|e| match e {
        Error::Config(msg) => CliError::Usage(msg),
        other => CliError::Runtime(other),
    })?;

    let summary = match command {
        "synth" => pipeline::cmd_synth(&cfg)?,
        "build-vocab" => pipeline::cmd_build_vocab(&cfg)?,
        "fit-bins" => pipeline::cmd_fit_bins(&cfg)?,
        "pretrain" => pipeline::cmd_pretrain(&cfg)?,
        "embed" => pipeline::cmd_embed(&cfg)?,
        "probe" => pipeline::cmd_probe(&cfg)?,
        "evaluate" => pipeline::cmd_evaluate(&cfg)?,
        "report" => pipeline::cmd_report(&cfg)?,
        "params" => pipeline::cmd_params(&cfg)?,
        other => {
            return Err(CliError::Usage(format!("unknown subcommand {other:?}; {USAGE}")));
        }
    };
    Ok(summary)
}
