//! `gazesr`: dataset generation, degradation, SR pretext training, gaze
//! training, LOSO experiments, probes and report rendering.
//!
//! Exit codes: 0 on success, 1 on a configuration or input problem (one line
//! on stderr), 2 on an internal failure (stderr names a traceback file).

mod commands;
mod config;

use std::backtrace::Backtrace;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "gazesr", version, about = "Super-resolution assisted gaze estimation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate the synthetic dataset into the output directory.
    Synth,
    /// Write degraded low-resolution copies of the dataset and their recipes.
    Degrade,
    /// Pretext-train the SR backbone on unlabeled synthetic faces.
    TrainSr,
    /// Train one gaze model with a held-out subject.
    TrainGaze,
    /// Leave-one-subject-out evaluation of `[pipeline]`.
    Loso,
    /// SR against interpolation on clean and degraded inputs.
    Table1,
    /// SR against interpolation at several input resolutions.
    Table3,
    /// Label-fraction study including SuperVision.
    Table5,
    /// Gaze-preservation probe of a restoration method.
    Probe,
    /// Render markdown, CSV and PNG summaries of the reports in the output directory.
    Report,
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<gazesr::Error> for CliError {
    fn from(e: gazesr::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(format!("{e}\n{e:?}"))
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("io error: {e}"))
    }
}

static PANIC_TRACE: Mutex<Option<String>> = Mutex::new(None);

fn one_line(msg: &str) -> String {
    msg.split('\n').map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn write_traceback(out: Option<&std::path::Path>, body: &str) -> PathBuf {
    let dir = out.filter(|d| std::fs::create_dir_all(d).is_ok()).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("gazesr-traceback-{}.txt", std::process::id()));
    if std::fs::write(&path, body).is_err() {
        eprintln!("{body}");
    }
    path
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()).trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    std::panic::set_hook(Box::new(|info| {
        let trace = format!("panic: {info}\n\n{}", Backtrace::force_capture());
        *PANIC_TRACE.lock().unwrap_or_else(|p| p.into_inner()) = Some(trace);
    }));
    let out_hint = cli.out.clone();
    match std::panic::catch_unwind(|| commands::run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::User(msg))) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Ok(Err(CliError::Internal(msg))) => {
            let body = format!("{msg}\n\n{}", Backtrace::force_capture());
            let path = write_traceback(out_hint.as_deref(), &body);
            eprintln!("internal error: {}; traceback written to {}", one_line(&msg).chars().take(200).collect::<String>(), path.display());
            ExitCode::from(2)
        }
        Err(_) => {
            let body = PANIC_TRACE.lock().unwrap_or_else(|p| p.into_inner()).take().unwrap_or_else(|| "panic".into());
            let path = write_traceback(out_hint.as_deref(), &body);
            eprintln!("internal error: panic; traceback written to {}", path.display());
            ExitCode::from(2)
        }
    }
}

