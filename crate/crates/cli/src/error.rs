use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Config parse or validation failure, anchored to a line when one is known.
    #[error("{}: {message}", location(path, *line))]
    Config {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} gradient check(s) exceeded tolerance")]
    GradCheckFailed(usize),
    #[error(transparent)]
    Core(#[from] mgru_core::Error),
}

fn location(path: &std::path::Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{l}", path.display()),
        None => path.display().to_string(),
    }
}

impl CliError {
    /// 1 for validation and parse errors, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradCheckFailed(_) | CliError::Core(mgru_core::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}
