use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid sample at index {index}: {value}")]
    InvalidSample { index: usize, value: f64 },

    #[error("invalid mixture specification: {0}")]
    InvalidSpec(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("samples are degenerate (variance {variance:e}); cannot separate {components} components")]
    DegenerateData { variance: f64, components: usize },

    #[error("mixture component {component} lost all responsibility mass")]
    EmptyComponent { component: usize },

    #[error("design matrix is ill-conditioned (condition number {condition:e} exceeds {cap:e})")]
    IllConditioned { condition: f64, cap: f64 },

    #[error("total least squares solution does not exist (last right singular vector entry {0:e})")]
    NonGenericTls(f64),

    #[error("smallest singular values are repeated ({0:e} and {1:e})")]
    DegenerateSvd(f64, f64),

    #[error("constrained problem is infeasible: {0}")]
    Infeasible(String),

    #[error("net noise variance of component {component} is not positive ({value:e})")]
    DegenerateVariance { component: usize, value: f64 },

    #[error("Jacobian is singular at iteration {iteration}")]
    SingularJacobian { iteration: usize },

    #[error("degenerate admittance: (Y1 - Y3)^2 + (2 Y4)^2 = {0:e}")]
    DegenerateAdmittance(f64),

    #[error("degenerate impedance: r^2 + x^2 = {0:e}")]
    DegenerateImpedance(f64),

    #[error("true value is zero; relative error undefined")]
    ZeroTruth,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no model order produced a usable fit")]
    NoFeasibleOrder,

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
