//! Minimal dense-network stack with hand-written backpropagation.
//!
//! Three learned components live here:
//!
//! - [`DenseNet`] — plain fully-connected layers (ReLU or identity), the
//!   shared building block;
//! - [`MatchNet`] — the two-eye gaze matcher: a weight-shared eye branch
//!   applied to each eye's features, a small depth branch, and a fusion
//!   head that regresses a normalized panel point;
//! - [`Embedder`] — an embedding net trained with a triplet hinge loss for
//!   identity matching.
//!
//! Everything is `f64`, seeded, and bit-reproducible: the same seed always
//! yields the same initial weights, the same batch order, and therefore the
//! same trained parameters. [`gradcheck`] validates every analytic gradient
//! against central finite differences.

mod dense;
mod embedder;
mod gradcheck;
mod matcher;

pub use dense::{Activation, DenseLayer, DenseNet, NetGrads};
pub use embedder::{triplet_loss, triplet_loss_with_grads, Embedder, TripletProbe};
pub use gradcheck::{grad_check, DifferentiableLoss, GRAD_CHECK_STEP, KINK_TOL};
pub use matcher::{
    matchnet_from_json, matchnet_to_json, train_matchnet, DatasetStats, EyeFeature, MatchFeatures,
    MatchNet, MatchNetArch, MatchTrainContext, MatcherMseProbe, NormStats, TrainHyper,
    TrainOutcome, EYE_FEATURE_DIM,
};

use thiserror::Error;

/// Errors from network construction, training, and checking.
#[derive(Debug, Error)]
pub enum NetsError {
    /// Layer or feature dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A feature's standard deviation is zero, so it cannot be z-scored.
    #[error("degenerate statistics: feature {index} has zero standard deviation")]
    DegenerateStats { index: usize },
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    /// A forward pass produced a non-finite value.
    #[error("non-finite network output")]
    NonFinite,
    /// A gradient-check probe landed within tolerance of an activation kink.
    #[error("gradient probe within {tol} of a non-differentiable point (margin {margin:.2e})")]
    NonDifferentiablePoint { margin: f64, tol: f64 },
    /// Too little data to compute statistics or train.
    #[error("not enough samples: {0}")]
    TooFewSamples(String),
    /// Serialized model data could not be parsed or has the wrong version.
    #[error("invalid model data: {0}")]
    InvalidModel(String),
}
