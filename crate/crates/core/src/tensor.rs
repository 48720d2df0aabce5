//! Confidence matrix, per-sample base-learner votes and the fused prediction.
//!
//! A sample's base-learner output is conceptually a `k x c` matrix whose row
//! `l` is the one-hot prediction of learner `l`. Since every row holds exactly
//! one 1, the matrix is stored as the `k` predicted class indices; the one-hot
//! view is recovered with [`PredictionStack::one_hot_rows`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learnable `c x k` confidence matrix, row = class, column = base learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ConfidenceMatrix {
    classes: usize,
    learners: usize,
    values: Vec<f64>,
}

impl ConfidenceMatrix {
    /// Builds a matrix from row-major values.
    pub fn from_row_major(classes: usize, learners: usize, values: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!(
                "class count must be >= 2, got {classes}"
            )));
        }
        if learners < 1 {
            return Err(Error::invalid("classifier count must be >= 1"));
        }
        if values.len() != classes * learners {
            return Err(Error::invalid(format!(
                "expected {} values for a {classes}x{learners} matrix, got {}",
                classes * learners,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite confidence at ({}, {})",
                pos / learners,
                pos % learners
            )));
        }
        Ok(Self {
            classes,
            learners,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.len();
        let learners = rows.first().map_or(0, Vec::len);
        if let Some(j) = rows.iter().position(|r| r.len() != learners) {
            return Err(Error::invalid(format!(
                "ragged confidence matrix at row {j}"
            )));
        }
        Self::from_row_major(classes, learners, rows.concat())
    }

    pub fn filled(classes: usize, learners: usize, value: f64) -> Result<Self> {
        Self::from_row_major(classes, learners, vec![value; classes * learners])
    }

    pub fn zeros(classes: usize, learners: usize) -> Result<Self> {
        Self::filled(classes, learners, 0.0)
    }

    /// Uniform confidence: the fused prediction reduces to a plurality vote.
    pub fn ones(classes: usize, learners: usize) -> Result<Self> {
        Self::filled(classes, learners, 1.0)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn learners(&self) -> usize {
        self.learners
    }

    #[inline]
    pub fn get(&self, class: usize, learner: usize) -> f64 {
        self.values[class * self.learners + learner]
    }

    #[inline]
    pub fn set(&mut self, class: usize, learner: usize, value: f64) {
        self.values[class * self.learners + learner] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.learners)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// `self - step * grad`, entry-wise.
    pub fn descend(&mut self, grad: &[f64], step: f64) {
        debug_assert_eq!(grad.len(), self.values.len());
        for (v, g) in self.values.iter_mut().zip(grad) {
            *v -= step * g;
        }
    }

    pub fn frobenius_distance(&self, other: &ConfidenceMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<Vec<f64>>> for ConfidenceMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<ConfidenceMatrix> for Vec<Vec<f64>> {
    fn from(m: ConfidenceMatrix) -> Self {
        m.rows()
    }
}

/// Base-learner votes for `n` samples from `k` learners over `c` classes.
///
/// Stored sample-major: `votes[i * k + l]` is the class learner `l` predicts
/// for sample `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionStack {
    samples: usize,
    learners: usize,
    classes: usize,
    votes: Vec<usize>,
}

impl PredictionStack {
    pub fn from_votes(
        samples: usize,
        learners: usize,
        classes: usize,
        votes: Vec<usize>,
    ) -> Result<Self> {
        if learners < 1 {
            return Err(Error::invalid("classifier count must be >= 1"));
        }
        if classes < 2 {
            return Err(Error::invalid(format!(
                "class count must be >= 2, got {classes}"
            )));
        }
        if votes.len() != samples * learners {
            return Err(Error::invalid(format!(
                "expected {} votes for {samples} samples x {learners} classifiers, got {}",
                samples * learners,
                votes.len()
            )));
        }
        if let Some(pos) = votes.iter().position(|&v| v >= classes) {
            return Err(Error::invalid(format!(
                "sample {} classifier {}: class {} out of range 0..{classes}",
                pos / learners,
                pos % learners,
                votes[pos]
            )));
        }
        Ok(Self {
            samples,
            learners,
            classes,
            votes,
        })
    }

    /// Builds a stack from dense `k x c` 0/1 matrices, one per sample.
    pub fn from_one_hot(classes: usize, matrices: &[Vec<Vec<f64>>]) -> Result<Self> {
        let learners = matrices.first().map_or(0, Vec::len);
        let mut votes = Vec::with_capacity(matrices.len() * learners);
        for (i, g) in matrices.iter().enumerate() {
            if g.len() != learners {
                return Err(Error::invalid(format!(
                    "sample {i}: expected {learners} rows, got {}",
                    g.len()
                )));
            }
            for (l, row) in g.iter().enumerate() {
                votes.push(
                    one_hot_index(row, classes)
                        .map_err(|e| Error::invalid(format!("sample {i} classifier {l}: {e}")))?,
                );
            }
        }
        Self::from_votes(matrices.len(), learners, classes, votes)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn learners(&self) -> usize {
        self.learners
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    /// Votes of every learner for sample `i`.
    #[inline]
    pub fn sample(&self, i: usize) -> &[usize] {
        &self.votes[i * self.learners..(i + 1) * self.learners]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.votes.chunks(self.learners.max(1)).take(self.samples)
    }

    /// Dense one-hot `k x c` view of sample `i`.
    pub fn one_hot_rows(&self, i: usize) -> Vec<Vec<f64>> {
        self.sample(i)
            .iter()
            .map(|&p| {
                let mut row = vec![0.0; self.classes];
                row[p] = 1.0;
                row
            })
            .collect()
    }

    /// Sub-stack of the given sample indices, in the order given.
    pub fn select(&self, indices: &[usize]) -> Self {
        let votes = indices
            .iter()
            .flat_map(|&i| self.sample(i).iter().copied())
            .collect();
        Self {
            samples: indices.len(),
            learners: self.learners,
            classes: self.classes,
            votes,
        }
    }
}

fn one_hot_index(row: &[f64], classes: usize) -> std::result::Result<usize, String> {
    if row.len() != classes {
        return Err(format!("expected {classes} columns, got {}", row.len()));
    }
    let mut hot = None;
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err("more than one 1 in one-hot row".into());
            }
            hot = Some(j);
        } else if v != 0.0 {
            return Err(format!("entry {v} is neither 0 nor 1"));
        }
    }
    hot.ok_or_else(|| "no 1 in one-hot row".into())
}

/// Class probabilities; entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

fn check_votes(theta: &ConfidenceMatrix, votes: &[usize]) -> Result<()> {
    if votes.len() != theta.learners() {
        return Err(Error::invalid(format!(
            "prediction matrix has {} classifier rows, confidence matrix has {} columns",
            votes.len(),
            theta.learners()
        )));
    }
    if let Some(l) = votes.iter().position(|&p| p >= theta.classes()) {
        return Err(Error::invalid(format!(
            "classifier {l} predicts class {} but the confidence matrix has {} classes",
            votes[l],
            theta.classes()
        )));
    }
    Ok(())
}

/// Per-class scores: `z[j]` sums `theta[j][l]` over the learners `l` that
/// voted for class `j`.
pub fn class_scores(theta: &ConfidenceMatrix, votes: &[usize]) -> Result<Vec<f64>> {
    check_votes(theta, votes)?;
    let mut z = vec![0.0; theta.classes()];
    for (l, &p) in votes.iter().enumerate() {
        z[p] += theta.get(p, l);
    }
    Ok(z)
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("softmax input {v} is not finite")));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(ProbVector(out))
}

/// Fused class probabilities for one sample.
pub fn fused_probs(theta: &ConfidenceMatrix, votes: &[usize]) -> Result<ProbVector> {
    softmax(&class_scores(theta, votes)?)
}

/// Fused prediction; ties go to the lowest class index.
pub fn ensemble_predict(theta: &ConfidenceMatrix, votes: &[usize]) -> Result<usize> {
    // softmax is monotone, so the argmax of the raw scores is the same and
    // avoids ties manufactured by exp underflow.
    Ok(argmax(&class_scores(theta, votes)?))
}

pub fn predict_all(theta: &ConfidenceMatrix, stack: &PredictionStack) -> Result<Vec<usize>> {
    stack.iter().map(|g| ensemble_predict(theta, g)).collect()
}

pub fn one_hot(label: usize, classes: usize) -> Result<Vec<f64>> {
    if label >= classes {
        return Err(Error::invalid(format!(
            "label {label} out of range 0..{classes}"
        )));
    }
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Ok(v)
}
