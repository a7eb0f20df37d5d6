//! Cross-layer shared-basis compression of transformer weight matrices.
//!
//! Weight matrices of the same type across a run of consecutive layers are
//! concatenated, scaled by a Cholesky factor of the calibration Gram matrix,
//! and factorized by truncated SVD into one shared basis plus per-layer
//! coefficients. A minimal GPT-2-style runtime evaluates the result.

pub mod calibration;
pub mod container;
pub mod decomposition;
pub mod linalg;
pub mod pipeline;
pub mod planner;
pub mod runtime;
pub mod synthetic;
pub mod tokens;

pub use calibration::{
    accumulate_gram, calibrate, merge_grams, whitening_factor, CalibrationConfig, GramSet,
    GramStats, WhiteningFactor,
};
pub use container::{Container, ContainerError, MatrixType, ModelManifest, Tensor, TensorData};
pub use decomposition::{
    factorize_group, rank_for_budget, reconstruct, truncation_loss, BasisFactorization,
    CompressionRatioSpec,
};
pub use linalg::{LinalgError, Matrix};
pub use pipeline::{account_params, compress_model, CompressionReport, GramSource, ParamCounts};
pub use planner::{
    build_plan, pairwise_loss_matrix, type_shareability, CompressionPlan, PairwiseLossMatrix,
    RankMode, SequentialMode, SharePolicy,
};
pub use runtime::{bench, forward_logits, perplexity, EvalConfig, Gpt2Model};
pub use tokens::TokenStream;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{site}: Gram matrix not positive definite after {retries} jitter retries (last shift {last_jitter:.3e})")]
    PdUnattainable {
        site: String,
        retries: usize,
        last_jitter: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("runtime: {0}")]
    Runtime(String),
    #[error("plan: {0}")]
    Plan(String),
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::PdUnattainable { .. } => ErrorClass::Numerical,
            Error::Linalg(e) => match e {
                LinalgError::ShapeMismatch(_) | LinalgError::RankOutOfRange { .. } => {
                    ErrorClass::Data
                }
                _ => ErrorClass::Numerical,
            },
            Error::Container(_) | Error::Runtime(_) | Error::Plan(_) => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
