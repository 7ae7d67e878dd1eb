use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pigpvae::Error),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} experiment cells failed; see table.json")]
    Cells { failed: usize, total: usize },
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Cells { .. } => "experiment",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// `category: message` on one line, for stderr.
    pub fn line(&self) -> String {
        let text = self.to_string();
        // core messages repeat their category as "<kind> error: …"
        let msg = match self {
            CliError::Core(_) => text.split_once(" error: ").map_or(text.as_str(), |(_, m)| m),
            _ => text.as_str(),
        };
        format!("{}: {}", self.category(), msg.replace(['\n', '\r'], " "))
    }
}
