//! Fine-grained ensemble of base classifiers fused through a learnable
//! class-by-classifier confidence matrix.
//!
//! Each base learner contributes a one-hot vote. Class `j` scores the sum of
//! the confidences `theta[j][l]` of the learners `l` that voted for `j`; the
//! scores pass through a softmax and the fused prediction is their argmax.
//! The confidence matrix is fitted by mini-batch gradient descent on
//! cross-entropy minus a weighted, logsumexp-smoothed probability margin.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: confidence matrix, prediction stack, scores, softmax.
//! * [`loss`]: margins, composite loss, closed-form gradient, finite-difference
//!   oracle and the gradient / Lipschitz bounds.
//! * [`optimizer`]: seeded initialization and the mini-batch trainer.
//! * [`forest`]: bootstrap CART trees producing the prediction stack.
//! * [`data`]: CSV ingestion, label encoding, train/test split, two moons.
//! * [`eval`]: accuracy, margin diagnostics and decision-boundary grids.
//! * [`cli`]: the command-line front end and the persisted model format.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod forest;
pub mod loss;
pub mod optimizer;
pub mod tensor;

pub use error::{Error, Result};
pub use loss::{HyperParams, LossBreakdown};
pub use tensor::{ConfidenceMatrix, PredictionStack, ProbVector};
