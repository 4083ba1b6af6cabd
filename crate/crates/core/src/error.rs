use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {what} (must be < {bound})")]
    Range {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Two levels of a spectrum that is required to be non-degenerate sit
    /// closer than the configured threshold.
    #[error("degenerate spectrum: gap {gap:e} below threshold {threshold:e}")]
    Degenerate { gap: f64, threshold: f64 },

    #[error("total dimension {dim} exceeds the configured cap {cap}")]
    Resource { dim: usize, cap: usize },

    #[error("energy window [{lo}, {hi}] contains no levels{}", .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    EmptyWindow {
        lo: f64,
        hi: f64,
        context: Option<String>,
    },

    /// Mean-energy matching has no solution: the target lies outside the
    /// open interval spanned by the Hamiltonian's extreme eigenvalues.
    #[error("cannot fit inverse temperature: target energy {target} outside ({min}, {max})")]
    Unfittable { target: f64, min: f64, max: f64 },

    #[error("fixed point not reached after {iterations} iterations (last residual {last:e})")]
    Convergence {
        iterations: usize,
        last: f64,
        residuals: Vec<f64>,
    },

    #[error("unsupported interaction form: {0}")]
    UnsupportedForm(String),

    #[error("config error{}: {msg}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("spectrum cache: {0}")]
    Cache(String),

    /// An error raised while evaluating one experiment point.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            msg: msg.into(),
        }
    }

    /// Whether the error belongs to the configuration class (as opposed to
    /// a numerical failure). The CLI maps this onto its exit codes.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Context { source, .. } => source.is_config(),
            e => matches!(e, Error::Config { .. } | Error::Validation(_) | Error::Resource { .. }),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error below any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
