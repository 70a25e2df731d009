use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] moemix::Error),

    #[error("{0}")]
    Usage(String),

    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for problems with the user's input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use moemix::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(
                E::Config(_)
                | E::MissingExpert { .. }
                | E::ShapeMismatch { .. }
                | E::EmptyInput(_)
                | E::TokenOutOfVocab { .. }
                | E::KOutOfRange { .. }
                | E::ModeMismatch { .. }
                | E::InvalidFilter(_),
            ) => 2,
            _ => 1,
        }
    }

    /// One line per problem; configuration errors list every diagnostic.
    pub fn report(&self) -> Vec<String> {
        match self {
            CliError::Engine(moemix::Error::Config(diags)) => {
                let mut lines = vec!["invalid configuration:".to_string()];
                lines.extend(diags.iter().map(|d| format!("  {d}")));
                lines
            }
            CliError::Engine(moemix::Error::ModeMismatch { actual, .. }) if actual == "bts" => vec![
                self.to_string(),
                "hint: bts models expose gate values through `moemix stitch-trace`".into(),
            ],
            other => vec![other.to_string()],
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
