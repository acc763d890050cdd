use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<CliError>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0} run(s) failed; see report.json")]
    Failed(usize),

    #[error(transparent)]
    Core(#[from] maskforge::Error),
}

impl CliError {
    pub(crate) fn config(field: &str, msg: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(path: impl AsRef<Path>, source: serde_json::Error) -> Self {
        CliError::Json {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        CliError::InFile {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }
}
