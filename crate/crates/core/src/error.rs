use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("no propagation path found in residual")]
    NoPath,

    #[error("no line-of-sight component available")]
    NoLos,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("Levenberg-Marquardt did not converge after {iterations} iterations (best rms {best_rms:.3e} rad)")]
    NotConverged {
        iterations: usize,
        best: [f64; 5],
        best_rms: f64,
    },

    #[error("low-confidence antenna offset estimate on antenna {antenna} (resultant length {resultant:.3e})")]
    LowConfidence { antenna: usize, resultant: f64 },

    #[error("incomplete sample: {0}")]
    IncompleteSample(String),

    #[error("SVR solver did not converge within {0} iterations")]
    SolverDiverged(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("stage `{stage}` failed{}: {source}", sample.map(|s| format!(" on sample {s}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        sample: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_stage(self, stage: &'static str, sample: Option<usize>) -> Self {
        Error::Stage {
            stage,
            sample,
            source: Box::new(self),
        }
    }
}
