use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error type shared across the pipeline. The `category` maps onto the
/// CLI exit codes: usage -> 2, data -> 3, numeric -> 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Numeric(String),

    #[error("correlation undefined for constant profile{}", fmt_groups(.0))]
    UndefinedCorrelation(Vec<u8>),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_groups(groups: &[u8]) -> String {
    if groups.is_empty() {
        String::new()
    } else {
        format!(" (groups {groups:?})")
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Numeric(_) | Error::UndefinedCorrelation(_) | Error::UndefinedMetric(_) => {
                "numeric"
            }
            _ => "data",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "numeric" => 4,
            _ => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_exit_codes() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(Error::Validation("x".into()).exit_code(), 3);
        assert_eq!(
            Error::Parse {
                line: 1,
                msg: "x".into()
            }
            .exit_code(),
            3
        );
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
        assert_eq!(Error::UndefinedCorrelation(vec![3]).exit_code(), 4);
        assert_eq!(Error::UndefinedMetric("x".into()).exit_code(), 4);
    }

    #[test]
    fn undefined_correlation_names_groups() {
        let msg = Error::UndefinedCorrelation(vec![7, 9]).to_string();
        assert!(msg.contains('7') && msg.contains('9'));
    }
}
