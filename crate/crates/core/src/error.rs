use thiserror::Error;

/// Errors surfaced by the simulation and optimization pipeline.
///
/// Positions and magnitudes are reported in `f64` regardless of the scalar
/// the computation ran in.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {details}")]
    InvalidInput { what: &'static str, details: String },

    #[error("user position is {distance:.6e} m from element {element}, below the {limit:.6e} m guard")]
    DegenerateDistance {
        element: usize,
        distance: f64,
        limit: f64,
    },

    #[error("{matrix} is not positive definite (pivot {pivot:.6e} at index {index})")]
    NotPositiveDefinite {
        matrix: &'static str,
        pivot: f64,
        index: usize,
    },

    #[error("Fisher information is singular at position ({0:.4}, {1:.4}, {2:.4}) m", position[0], position[1], position[2])]
    SingularInformation { position: [f64; 3] },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("every position in the batch had singular Fisher information")]
    EmptyBatch,

    #[error("training diverged: loss {current:.6e} exceeds 1e3 x initial loss {initial:.6e} at epoch {epoch}")]
    Diverged {
        initial: f64,
        current: f64,
        epoch: usize,
    },

    #[error("bisection failed to bracket the schedule multiplier (lo {lo:.6e}, hi {hi:.6e})")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with run context (round index, iteration, ...).
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<V> = std::result::Result<V, Error>;
