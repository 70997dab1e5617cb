use thiserror::Error;

use crate::model::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label '{0}'")]
    UnknownLabel(String),

    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("covariance is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("matrix block over [{0}] is singular even after jitter")]
    Singular(String),

    #[error("negative noise variance {0}")]
    NegativeVariance(f64),

    #[error("unsupported rule precision {0} (expected 3, 5 or 7)")]
    UnsupportedPrecision(u32),

    #[error("invalid kappa: d + kappa = {0} must be positive")]
    InvalidKappa(f64),

    #[error("cubature rule construction failed: {0}")]
    RuleConstruction(String),

    #[error("function returned a non-finite value at cubature point {point} ({values:?})")]
    NonFinite { point: usize, values: Vec<f64> },

    #[error("covariance repair could not bracket the multiplier: {0}")]
    RepairBracket(String),

    #[error("cycle among slice-(t+1) variables: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("invalid model: {}", format_diagnostics(.0))]
    InvalidModel(Vec<Diagnostic>),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    FixedPointDiverged { iterations: usize, residual: f64 },

    #[error("while propagating '{var}': {source}")]
    Node {
        var: String,
        #[source]
        source: Box<Error>,
    },

    #[error("at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite Jacobian entry d{output}/d{input}")]
    NonFiniteJacobian { output: String, input: String },

    #[error("all particle weights vanished; log-space weights are already in use, so the evidence is inconsistent with every particle")]
    WeightsUnderflow,

    #[error("least-squares design is rank deficient (rank {rank} < {params})")]
    RankDeficient { rank: usize, params: usize },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn at_node(self, var: impl Into<String>) -> Self {
        Error::Node {
            var: var.into(),
            source: Box::new(self),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// Step index of the innermost `Step` wrapper, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::Step { step, .. } => Some(*step),
            Error::Node { source, .. } => source.step(),
            _ => None,
        }
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}
