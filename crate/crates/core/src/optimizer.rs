//! Mini-batch gradient descent on the confidence matrix.

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{self, HyperParams};
use crate::tensor::{ConfidenceMatrix, PredictionStack};

/// Half-width of the uniform jitter around the all-ones initialization.
pub const INIT_JITTER: f64 = 0.01;

// Distinct stream ids keep initialization and batch shuffling independent of
// each other and of the forest bootstrap streams drawn from the same seed.
const INIT_STREAM: u64 = 1 << 40;
const SHUFFLE_STREAM: u64 = (1 << 40) + 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Confidence matrix near all-ones (the plurality-vote special case).
pub fn init_theta(classes: usize, learners: usize, seed: u64) -> Result<ConfidenceMatrix> {
    let mut rng = stream_rng(seed, INIT_STREAM);
    let jitter = Uniform::new_inclusive(-INIT_JITTER, INIT_JITTER).expect("valid uniform range");
    let values = (0..classes * learners)
        .map(|_| 1.0 + jitter.sample(&mut rng))
        .collect();
    ConfidenceMatrix::from_row_major(classes, learners, values)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Full-set mean loss after each epoch.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub theta: ConfidenceMatrix,
}

/// Fits the confidence matrix from a random start.
pub fn train(stack: &PredictionStack, labels: &[usize], hp: &HyperParams) -> Result<TrainReport> {
    let theta = init_theta(stack.classes(), stack.learners(), hp.seed)?;
    train_from(theta, stack, labels, hp)
}

/// Fits the confidence matrix starting from `theta`.
///
/// Each epoch walks a seeded permutation of the samples in batches of
/// `hp.batch` (the last one may be short), stepping
/// `theta -= lr * batch_grad`. Training stops when the full-set mean loss
/// moves by less than `hp.tol` between epochs or after `hp.epochs` epochs.
pub fn train_from(
    mut theta: ConfidenceMatrix,
    stack: &PredictionStack,
    labels: &[usize],
    hp: &HyperParams,
) -> Result<TrainReport> {
    hp.validate()?;
    if stack.is_empty() {
        return Err(Error::invalid("cannot train on an empty prediction stack"));
    }
    if labels.len() != stack.samples() {
        return Err(Error::invalid(format!(
            "{} labels for {} samples",
            labels.len(),
            stack.samples()
        )));
    }
    if theta.classes() != stack.classes() || theta.learners() != stack.learners() {
        return Err(Error::invalid(format!(
            "confidence matrix is {}x{}, stack has {} classes and {} classifiers",
            theta.classes(),
            theta.learners(),
            stack.classes(),
            stack.learners()
        )));
    }

    let full_loss = |theta: &ConfidenceMatrix, epoch: usize| -> Result<f64> {
        let total = loss::mean_loss(theta, stack, labels, hp)?.total;
        if total.is_finite() {
            Ok(total)
        } else {
            Err(Error::NonFinite(format!(
                "training loss {total} after epoch {epoch}"
            )))
        }
    };

    let initial_loss = full_loss(&theta, 0)?;
    let mut rng = stream_rng(hp.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..stack.samples()).collect();
    let mut loss_curve = Vec::with_capacity(hp.epochs);
    let mut previous = initial_loss;
    let mut converged = false;

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(hp.batch).enumerate() {
            let grad = loss::batch_grad(&theta, stack, labels, batch, hp).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("epoch {epoch} batch {b}: {msg}"))
                }
                other => other,
            })?;
            theta.descend(grad.as_slice(), hp.lr);
        }
        if let Some(pos) = theta.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "confidence entry {pos} diverged in epoch {epoch}"
            )));
        }
        let current = full_loss(&theta, epoch)?;
        loss_curve.push(current);
        if (previous - current).abs() < hp.tol {
            converged = true;
            break;
        }
        previous = current;
    }

    let final_loss = loss_curve.last().copied().unwrap_or(initial_loss);
    Ok(TrainReport {
        epochs_run: loss_curve.len(),
        loss_curve,
        initial_loss,
        final_loss,
        converged,
        theta,
    })
}
