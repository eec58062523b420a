//! Command-line front end: `latte <synth|tokenize|train|eval|analyze|report|all> [flags]`.
//!
//! A flat `key = value` file given by `--config` supplies defaults; flags with
//! the same names win.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use config::{load_config_args, RunConfig, WorldKind};
pub use manifest::{sha256_file, Manifest, StepRecord};

pub use commands::STUDIES;

#[derive(Debug, Parser)]
#[command(name = "latte", version, about = "Semantic-ID recommendation with latent-token decoding forests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world (features, interactions, ground truth).
    Synth(RunConfig),
    /// Quantize item features into semantic IDs.
    Tokenize(RunConfig),
    /// Train the scorer.
    Train(RunConfig),
    /// Leave-one-out Recall/NDCG.
    Eval(RunConfig),
    /// Run one or more named studies.
    Analyze(RunConfig),
    /// Bundle study outputs and compare metrics across runs.
    Report(RunConfig),
    /// synth, tokenize, train, eval, analyze and report in one run directory.
    All(RunConfig),
}

/// Splices `--config` file entries right after the subcommand name so that
/// explicit flags, which come later, override them.
fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let text: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let file = text.iter().enumerate().find_map(|(i, a)| match a.strip_prefix("--config") {
        Some("") => text.get(i + 1).cloned(),
        Some(rest) => rest.strip_prefix('=').map(str::to_string),
        None => None,
    });
    let Some(file) = file else {
        return Ok(args);
    };
    let from_file = load_config_args(std::path::Path::new(&file)).map_err(|e| e.to_string())?;
    let sub = text.iter().skip(1).position(|a| !a.starts_with('-')).map_or(args.len(), |p| p + 2);
    let mut out = args[..sub].to_vec();
    out.extend(from_file);
    out.extend_from_slice(&args[sub..]);
    Ok(out)
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("LATTE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("invalid configuration value for LATTE_THREADS: {v:?} is not a count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args = match expand_args(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    let (name, cfg) = match cli.command {
        Command::Synth(c) => ("synth", c),
        Command::Tokenize(c) => ("tokenize", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Analyze(c) => ("analyze", c),
        Command::Report(c) => ("report", c),
        Command::All(c) => ("all", c),
    };
    print!("{}", cfg.resolved_text(name));
    match commands::dispatch(name, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
