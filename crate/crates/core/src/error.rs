use std::path::PathBuf;

/// A configuration rejected by validation. Carries every problem found,
/// not just the first.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid configuration:\n  - {}", .problems.join("\n  - "))]
pub struct ConfigError {
    problems: Vec<String>,
}

impl ConfigError {
    pub fn new(problem: impl Into<String>) -> Self {
        Self { problems: vec![problem.into()] }
    }

    pub fn from_list(problems: Vec<String>) -> Result<(), ConfigError> {
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    pub fn problems(&self) -> &[String] {
        &self.problems
    }

    pub(crate) fn prefixed(self, prefix: &str) -> Vec<String> {
        self.problems.into_iter().map(|p| format!("{prefix}: {p}")).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),

    #[error(transparent)]
    Velocity(#[from] crate::velocity::VelocityError),

    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format { path: path.into(), message: message.to_string() }
    }

    /// Rejected input: bad settings, malformed files, infeasible velocity
    /// parameters. I/O failures and internal faults are not.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Velocity(_) => true,
            Error::Trace(e) => !matches!(e, crate::trace::TraceError::Io { .. }),
            Error::Io { .. } | Error::Metrics(_) => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
