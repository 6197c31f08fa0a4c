use thiserror::Error;

#[derive(Debug, Error)]
pub enum OqatError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid quantization parameters: {0}")]
    Quant(String),

    #[error("architecture outside search space: field `{field}`: {detail}")]
    ArchOutOfSpace { field: String, detail: String },

    #[error("invalid search space: {0}")]
    Space(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bit inheritance bound violated on layer `{layer}`: L1 {l1} > bound {bound}")]
    BoundViolation { layer: String, l1: f64, bound: f64 },

    #[error("empty FLOPs bucket [{lo}, {hi}) after {attempts} draws")]
    EmptyBucket { lo: f64, hi: f64, attempts: usize },

    #[error("no candidate within +-10% of budget {budget}; nearest feasible budget is {nearest}")]
    InfeasibleBudget { budget: f64, nearest: f64 },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = OqatError> = std::result::Result<T, E>;
