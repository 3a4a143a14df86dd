use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A mixture component lost (almost) all posterior mass during EM.
    #[error("degenerate component {component}: total posterior weight {weight:e}")]
    DegenerateComponent { component: usize, weight: f64 },

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("{}", format_validation(.row, .column, .message))]
    Validation {
        row: Option<usize>,
        column: Option<String>,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_validation(row: &Option<usize>, column: &Option<String>, message: &str) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!("validation error at row {r}, column '{c}': {message}"),
        (Some(r), None) => format!("validation error at row {r}: {message}"),
        (None, Some(c)) => format!("validation error in column '{c}': {message}"),
        (None, None) => format!("validation error: {message}"),
    }
}

impl Error {
    /// Wraps an I/O error with the offending path.
    pub(crate) fn at_path(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn cell(row: usize, column: &str, msg: impl Into<String>) -> Self {
        Error::Validation {
            row: Some(row),
            column: Some(column.to_string()),
            message: msg.into(),
        }
    }

    /// Machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Domain(_) | Error::Dimension(_) | Error::Validation { .. } | Error::Config(_) => {
                "validation"
            }
            Error::DegenerateComponent { .. } | Error::Optimization(_) | Error::Convergence(_) => {
                "convergence"
            }
            Error::Io(_) => "io",
            Error::Csv(e) if e.is_io_error() => "io",
            Error::Csv(_) => "validation",
            Error::Json(e) if e.is_io() => "io",
            Error::Json(_) => "validation",
        }
    }

    /// Process exit code: 2 validation, 3 convergence failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "validation" => 2,
            "convergence" => 3,
            _ => 4,
        }
    }
}
