//! The `lumisr` command line: scan generation, training, rendering,
//! evaluation sweeps and the relight service.

pub mod args;
pub mod commands;
pub mod experiments;
pub mod output;

use std::ffi::OsString;

use clap::Parser;
use serde_json::json;

pub const THREADS_ENV: &str = "LUMISR_THREADS";

/// Failure of one invocation; printed as a single JSON line.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }

    /// `{"error": kind, "message": text}` on one line.
    pub fn to_line(&self) -> String {
        json!({ "error": self.kind, "message": self.message.replace('\n', " ") }).to_string()
    }
}

impl From<lumisr_core::Error> for CliError {
    fn from(e: lumisr_core::Error) -> Self {
        use lumisr_core::Error as E;
        let kind = match &e {
            E::Io { .. } => "io",
            E::Malformed { .. } => "input",
            E::InvalidArgument(_) | E::IndexOutOfRange { .. } | E::UnknownPreset(_) => "usage",
            _ => "compute",
        };
        Self::new(kind, e.to_string())
    }
}

impl From<lumisr_neural::NeuralError> for CliError {
    fn from(e: lumisr_neural::NeuralError) -> Self {
        use lumisr_neural::NeuralError as E;
        let kind = match e {
            E::Core(inner) => return Self::from(inner),
            E::Io { .. } => "io",
            E::Format(_) => "input",
            E::Config(_) => "usage",
            _ => "compute",
        };
        Self::new(kind, e.to_string())
    }
}

impl From<lumisr_service::RequestError> for CliError {
    fn from(e: lumisr_service::RequestError) -> Self {
        use lumisr_service::RequestError as E;
        let kind = match &e {
            E::Malformed(_) | E::Invalid(_) => "usage",
            E::Render(_) => "compute",
        };
        Self::new(kind, e.to_string())
    }
}

/// Caps rayon's global pool when `LUMISR_THREADS` is set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV}={raw} is not a positive integer")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match args::Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return Err(CliError::usage(first.to_string()));
        }
    };
    init_threads()?;
    let raw: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    commands::dispatch(cli.command, raw)
}
