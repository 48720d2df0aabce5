//! Margin-maximizing loss over fused probabilities and its gradient.
//!
//! For one sample with true class `m` and fused probabilities `s`:
//!
//! ```text
//! l1 = -ln s[m]                                   cross-entropy
//! l2 = -gamma * s[m]
//! l3 =  gamma * (1/alpha) * ln(1 + sum_{j != m} exp(alpha * s[j]))
//! L  = l1 + l2 + l3 = ce - gamma * (s[m] - smooth_max2(s, m))
//! ```
//!
//! `l3 / gamma` is a logsumexp over `s` with the true entry zeroed, a smooth
//! upper bound on the runner-up probability that is tight within
//! `ln(c) / alpha`. Batches are aggregated by their mean.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConfidenceMatrix, PredictionStack, ProbVector};

/// Lower clamp for the argument of `ln s[m]`.
pub const PROB_FLOOR: f64 = 1e-300;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Logsumexp sharpness.
    pub alpha: f64,
    /// Weight of the smoothed margin.
    pub gamma: f64,
    /// Gradient-descent step size.
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stop when the full-set mean loss changes by less than this between epochs.
    pub tol: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            gamma: 5.0,
            lr: 0.1,
            batch: 64,
            epochs: 500,
            tol: 1e-7,
            seed: 1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch < 1 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid(format!(
                "tolerance must be >= 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Components of one loss evaluation (per sample, or a batch mean).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    /// Cross-entropy of the true class.
    pub ce: f64,
    /// `s[m] - smooth_max2(s, m)`.
    pub margin_smooth: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    /// Set when `s[m]` underflowed and the log argument was clamped to [`PROB_FLOOR`].
    pub floored: bool,
}

/// Second-largest entry, counting multiplicity.
pub fn max2_exact(s: &ProbVector) -> Result<f64> {
    if s.len() < 2 {
        return Err(Error::invalid("second maximum needs at least two classes"));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in s.as_slice() {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(second)
}

/// Largest probability among the classes other than `m`.
pub fn max_other(s: &ProbVector, m: usize) -> f64 {
    s.as_slice()
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != m)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn check_class(m: usize, c: usize) -> Result<()> {
    if m >= c {
        return Err(Error::invalid(format!(
            "true class {m} out of range 0..{c}"
        )));
    }
    Ok(())
}

/// Shifted exponentials of the logsumexp in `l3`.
///
/// Returns `(w, shift)` with `w[j] = exp(alpha * s[j] - shift)` for `j != m`,
/// `w[m] = exp(-shift)` (the zeroed true entry) and
/// `shift = max(0, alpha * max_{j != m} s[j])`.
fn runner_up_weights(s: &[f64], m: usize, alpha: f64) -> (Vec<f64>, f64) {
    let shift = s
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != m)
        .map(|(_, &v)| alpha * v)
        .fold(0.0, f64::max);
    let w = s
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if j == m {
                (-shift).exp()
            } else {
                (alpha * v - shift).exp()
            }
        })
        .collect();
    (w, shift)
}

/// `(1/alpha) * ln(1 + sum_{j != m} exp(alpha * s[j]))`.
pub fn smooth_max2(s: &ProbVector, m: usize, alpha: f64) -> Result<f64> {
    check_class(m, s.len())?;
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    let (w, shift) = runner_up_weights(s.as_slice(), m, alpha);
    Ok((shift + w.iter().sum::<f64>().ln()) / alpha)
}

/// Loss of one sample given its fused probabilities.
pub fn loss_from_probs(s: &ProbVector, m: usize, hp: &HyperParams) -> Result<LossBreakdown> {
    check_class(m, s.len())?;
    let sm = s[m];
    let floored = sm < PROB_FLOOR;
    let ce = -sm.max(PROB_FLOOR).ln();
    let smax = smooth_max2(s, m, hp.alpha)?;
    let l1 = ce;
    let l2 = -hp.gamma * sm;
    let l3 = hp.gamma * smax;
    Ok(LossBreakdown {
        ce,
        margin_smooth: sm - smax,
        l1,
        l2,
        l3,
        total: l1 + l2 + l3,
        floored,
    })
}

pub fn sample_loss(
    theta: &ConfidenceMatrix,
    votes: &[usize],
    m: usize,
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    loss_from_probs(&tensor::fused_probs(theta, votes)?, m, hp)
}

fn check_batch(stack: &PredictionStack, labels: &[usize], batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if labels.len() != stack.samples() {
        return Err(Error::invalid(format!(
            "{} labels for {} samples",
            labels.len(),
            stack.samples()
        )));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= stack.samples()) {
        return Err(Error::invalid(format!(
            "batch index {i} out of range 0..{}",
            stack.samples()
        )));
    }
    Ok(())
}

/// Field-wise mean of the per-sample losses of `batch` (indices into `stack`).
pub fn batch_loss(
    theta: &ConfidenceMatrix,
    stack: &PredictionStack,
    labels: &[usize],
    batch: &[usize],
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    check_batch(stack, labels, batch)?;
    let mut acc = LossBreakdown::default();
    for &i in batch {
        let b = sample_loss(theta, stack.sample(i), labels[i], hp)?;
        acc.ce += b.ce;
        acc.margin_smooth += b.margin_smooth;
        acc.l1 += b.l1;
        acc.l2 += b.l2;
        acc.l3 += b.l3;
        acc.floored |= b.floored;
    }
    let n = batch.len() as f64;
    acc.ce /= n;
    acc.margin_smooth /= n;
    acc.l1 /= n;
    acc.l2 /= n;
    acc.l3 /= n;
    acc.total = acc.l1 + acc.l2 + acc.l3;
    Ok(acc)
}

/// Mean loss over every sample of the stack.
pub fn mean_loss(
    theta: &ConfidenceMatrix,
    stack: &PredictionStack,
    labels: &[usize],
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    let all: Vec<usize> = (0..stack.samples()).collect();
    batch_loss(theta, stack, labels, &all, hp)
}

/// Gradient with respect to the confidence matrix, same `c x k` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMatrix {
    classes: usize,
    learners: usize,
    values: Vec<f64>,
}

impl GradMatrix {
    pub fn zeros(classes: usize, learners: usize) -> Self {
        Self {
            classes,
            learners,
            values: vec![0.0; classes * learners],
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.learners)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Closed-form per-sample gradient.
///
/// With `p = votes[l]`, `g[l][k] = [p == k]` and the softmax derivative
/// `ds_j/dtheta_kl = s_j (delta_kj - s_k) g[l][k]`:
///
/// ```text
/// dl1/dtheta_kl = -(delta_km - s_k) g[l][k]
/// dl2/dtheta_kl = -gamma s_m (delta_km - s_k) g[l][k]
/// dl3/dtheta_kl =  gamma sum_{j != m} e^{alpha s_j} s_j (delta_kj - s_k) g[l][k]
///                  / (1 + sum_{j != m} e^{alpha s_j})
/// ```
///
/// Every term carries `g[l][k]`, so column `l` is non-zero only in row `p`;
/// the class factor multiplying it is computed once per row.
pub fn sample_grad(
    theta: &ConfidenceMatrix,
    votes: &[usize],
    m: usize,
    hp: &HyperParams,
) -> Result<GradMatrix> {
    let c = theta.classes();
    check_class(m, c)?;
    let s = tensor::fused_probs(theta, votes)?;
    let factor = score_gradient(s.as_slice(), m, hp);
    let mut grad = GradMatrix::zeros(c, theta.learners());
    for (l, &p) in votes.iter().enumerate() {
        grad.values[p * grad.learners + l] = factor[p];
    }
    if let Some(v) = grad.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {v}")));
    }
    Ok(grad)
}

/// `dL/dz_k` for each class `k`, where `z` are the class scores.
fn score_gradient(s: &[f64], m: usize, hp: &HyperParams) -> Vec<f64> {
    let (w, _) = runner_up_weights(s, m, hp.alpha);
    // Both numerator and denominator carry the same exp(-shift) factor.
    let denom: f64 = w.iter().sum();
    let sm = s[m];
    (0..s.len())
        .map(|k| {
            let dm = if k == m { 1.0 } else { 0.0 };
            let d1 = -(dm - s[k]);
            let d2 = hp.gamma * sm * d1;
            let num: f64 = (0..s.len())
                .filter(|&j| j != m)
                .map(|j| {
                    let dkj = if k == j { 1.0 } else { 0.0 };
                    w[j] * s[j] * (dkj - s[k])
                })
                .sum();
            d1 + d2 + hp.gamma * num / denom
        })
        .collect()
}

/// Mean of [`sample_grad`] over `batch`, reduced in index order.
pub fn batch_grad(
    theta: &ConfidenceMatrix,
    stack: &PredictionStack,
    labels: &[usize],
    batch: &[usize],
    hp: &HyperParams,
) -> Result<GradMatrix> {
    check_batch(stack, labels, batch)?;
    let c = theta.classes();
    let mut grad = GradMatrix::zeros(c, theta.learners());
    for &i in batch {
        let votes = stack.sample(i);
        let s = tensor::fused_probs(theta, votes)?;
        let factor = score_gradient(s.as_slice(), labels[i], hp);
        for (l, &p) in votes.iter().enumerate() {
            grad.values[p * grad.learners + l] += factor[p];
        }
    }
    let n = batch.len() as f64;
    for v in &mut grad.values {
        *v /= n;
    }
    if let Some(pos) = grad.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "batch gradient entry ({}, {})",
            pos / grad.learners,
            pos % grad.learners
        )));
    }
    Ok(grad)
}

/// Central finite differences of `loss` around `theta`, one entry at a time.
pub fn finite_diff_grad<F>(loss: F, theta: &ConfidenceMatrix, h: f64) -> Result<GradMatrix>
where
    F: Fn(&ConfidenceMatrix) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let (c, k) = (theta.classes(), theta.learners());
    let mut grad = GradMatrix::zeros(c, k);
    let mut probe = theta.clone();
    for row in 0..c {
        for col in 0..k {
            let orig = theta.get(row, col);
            probe.set(row, col, orig + h);
            let plus = loss(&probe)?;
            probe.set(row, col, orig - h);
            let minus = loss(&probe)?;
            probe.set(row, col, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at probe of entry ({row}, {col}): {plus} / {minus}"
                )));
            }
            grad.values[row * k + col] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Per-entry gradient bound `1 + gamma + (gamma / c) e^alpha`.
pub fn grad_entry_bound(hp: &HyperParams, classes: usize) -> f64 {
    1.0 + hp.gamma + hp.gamma / classes as f64 * hp.alpha.exp()
}

/// Lipschitz constant `sqrt(c k) * grad_entry_bound`.
pub fn lipschitz_bound(classes: usize, learners: usize, hp: &HyperParams) -> f64 {
    ((classes * learners) as f64).sqrt() * grad_entry_bound(hp, classes)
}

/// Entry-wise error between an analytic and a reference gradient.
///
/// `|a - b| / max(|a|, |b|, atol / rtol)`: at most `rtol` exactly when the
/// difference is within `rtol` relatively or within about `atol` absolutely.
pub fn gradient_error(analytic: &GradMatrix, reference: &GradMatrix, rtol: f64, atol: f64) -> f64 {
    let floor = atol / rtol;
    analytic
        .values
        .iter()
        .zip(&reference.values)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Acceptance thresholds for [`gradient_error`].
pub const GRADCHECK_RTOL: f64 = 1e-6;
pub const GRADCHECK_ATOL: f64 = 1e-8;

/// One randomized analytic-vs-finite-difference comparison.
///
/// Draws confidences from `U(-2, 2)`, a random vote per learner and a random
/// true class; returns the [`gradient_error`] of the pair.
pub fn gradient_check_trial<R: Rng>(
    rng: &mut R,
    classes: usize,
    learners: usize,
    hp: &HyperParams,
) -> Result<f64> {
    let values = (0..classes * learners)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let theta = ConfidenceMatrix::from_row_major(classes, learners, values)?;
    let votes: Vec<usize> = (0..learners)
        .map(|_| rng.random_range(0..classes))
        .collect();
    let m = rng.random_range(0..classes);
    let analytic = sample_grad(&theta, &votes, m, hp)?;
    let numeric = finite_diff_grad(
        |t| sample_loss(t, &votes, m, hp).map(|b| b.total),
        &theta,
        FD_STEP,
    )?;
    Ok(gradient_error(
        &analytic,
        &numeric,
        GRADCHECK_RTOL,
        GRADCHECK_ATOL,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hp(gamma: f64, alpha: f64) -> HyperParams {
        HyperParams {
            gamma,
            alpha,
            ..HyperParams::default()
        }
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    /// Direct evaluation of the logsumexp term without shifting.
    fn smooth_direct(s: &[f64], m: usize, alpha: f64) -> f64 {
        let sum: f64 = s
            .iter()
            .enumerate()
            .map(|(j, &v)| if j == m { 1.0 } else { (alpha * v).exp() })
            .sum();
        sum.ln() / alpha
    }

    #[test]
    fn second_maximum() {
        assert_eq!(max2_exact(&pv(&[0.7, 0.2, 0.1])).unwrap(), 0.2);
        assert_eq!(max2_exact(&pv(&[0.5, 0.5])).unwrap(), 0.5);
        let eps = 1e-3;
        assert_eq!(max2_exact(&pv(&[1.0 - 2.0 * eps, eps, eps])).unwrap(), eps);
        assert!(max2_exact(&pv(&[1.0])).is_err());
    }

    #[test]
    fn smooth_max2_values() {
        let v = smooth_max2(&pv(&[0.7, 0.2, 0.1]), 0, 10.0).unwrap();
        assert!((v - smooth_direct(&[0.7, 0.2, 0.1], 0, 10.0)).abs() < 1e-15);
        assert!((v - 0.240_760_596_444_438).abs() < 1e-12, "{v}");
        let v = smooth_max2(&pv(&[1.0, 0.0, 0.0]), 0, 10.0).unwrap();
        assert!((v - 3f64.ln() / 10.0).abs() < 1e-15);
        assert!((v - 0.109861).abs() < 1e-6);
        let v = smooth_max2(&pv(&[0.25; 4]), 3, 10.0).unwrap();
        assert!((v - (3.0 * 2.5f64.exp() + 1.0).ln() / 10.0).abs() < 1e-15);
        assert!((v - 0.362560).abs() < 1e-6, "{v}");
        assert!(smooth_max2(&pv(&[0.5, 0.5]), 2, 10.0).is_err());
    }

    #[test]
    fn smooth_max2_survives_large_alpha() {
        let v = smooth_max2(&pv(&[0.1, 0.9]), 0, 1e4).unwrap();
        assert!(v.is_finite());
        assert!(v >= 0.9 && v <= 0.9 + 2f64.ln() / 1e4);
    }

    #[test]
    fn loss_terms_by_hand() {
        let b = loss_from_probs(&pv(&[0.7, 0.2, 0.1]), 0, &hp(5.0, 10.0)).unwrap();
        let l3 = 5.0 * (2f64.exp() + 1f64.exp() + 1.0).ln() / 10.0;
        assert!((b.l1 + 0.7f64.ln()).abs() < 1e-15);
        assert!((b.l1 - 0.356675).abs() < 1e-6);
        assert_eq!(b.l2, -3.5);
        assert!((b.l3 - l3).abs() < 1e-14);
        assert!((b.l3 - 1.203_802_982_222_19).abs() < 1e-12);
        assert!((b.total + 1.939_522_073_839_077).abs() < 1e-12);
        assert!(!b.floored);

        let third = 1.0 / 3.0;
        for m in 0..3 {
            let b = loss_from_probs(&pv(&[third; 3]), m, &hp(5.0, 10.0)).unwrap();
            let expected = 3f64.ln() - 5.0 / 3.0 + 0.5 * (1.0 + 2.0 * (10.0f64 / 3.0).exp()).ln();
            assert!((b.total - expected).abs() < 1e-12);
            assert!(
                (b.total - 1.454_025_771_028_993).abs() < 1e-12,
                "{}",
                b.total
            );
        }

        let b = loss_from_probs(&pv(&[0.7, 0.2, 0.1]), 1, &hp(0.0, 10.0)).unwrap();
        assert_eq!(b.total, b.ce);
        assert!((b.ce + 0.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn underflowed_true_class_is_flagged() {
        let b = loss_from_probs(&pv(&[1.0, 0.0]), 1, &hp(5.0, 10.0)).unwrap();
        assert!(b.floored);
        assert!((b.ce - -PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(b.total.is_finite());
    }

    #[test]
    fn sample_loss_cases() {
        let h = hp(5.0, 10.0);
        let zero = ConfidenceMatrix::zeros(3, 4).unwrap();
        let b = sample_loss(&zero, &[0, 2, 1, 1], 2, &h).unwrap();
        assert!((b.total - 1.454_025_771_028_993).abs() < 1e-12);

        let zero = ConfidenceMatrix::zeros(2, 1).unwrap();
        let b = sample_loss(&zero, &[0], 0, &h).unwrap();
        let expected = 2f64.ln() - 2.5 + 0.5 * (5f64.exp() + 1.0).ln();
        assert!((b.total - expected).abs() < 1e-14);
        assert!((b.total - 0.696_504_854_804_504).abs() < 1e-12);

        // True class strictly wins the vote score: scaling drives ce to zero.
        let base =
            ConfidenceMatrix::from_rows(&[vec![1.0, 1.0, 0.5], vec![0.3, 0.2, 0.9]]).unwrap();
        let votes = [0, 0, 1];
        let mut last = f64::INFINITY;
        for t in [1.0, 10.0, 100.0, 1000.0] {
            let scaled = ConfidenceMatrix::from_row_major(
                2,
                3,
                base.as_slice().iter().map(|v| v * t).collect(),
            )
            .unwrap();
            let ce = sample_loss(&scaled, &votes, 0, &h).unwrap().ce;
            assert!(ce <= last);
            last = ce;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn batch_mean_semantics() {
        let h = hp(5.0, 10.0);
        let theta = ConfidenceMatrix::from_rows(&[vec![0.3, -1.0], vec![1.2, 0.4], vec![0.0, 2.0]])
            .unwrap();
        let stack = PredictionStack::from_votes(3, 2, 3, vec![0, 1, 0, 1, 2, 2]).unwrap();
        let labels = [0, 1, 2];
        let single = batch_loss(&theta, &stack, &labels, &[1], &h).unwrap();
        let direct = sample_loss(&theta, stack.sample(1), 1, &h).unwrap();
        assert_eq!(single.total, direct.total);
        let twice = batch_loss(&theta, &stack, &labels, &[1, 1], &h).unwrap();
        assert!((twice.total - direct.total).abs() < 1e-15);
        let a = sample_loss(&theta, stack.sample(0), 0, &h).unwrap().total;
        let b = sample_loss(&theta, stack.sample(2), 2, &h).unwrap().total;
        let pair = batch_loss(&theta, &stack, &labels, &[0, 2], &h).unwrap();
        assert!((pair.total - (a + b) / 2.0).abs() < 1e-14);
        assert!(batch_loss(&theta, &stack, &labels, &[], &h).is_err());
        assert!(batch_grad(&theta, &stack, &labels, &[], &h).is_err());

        let g1 = batch_grad(&theta, &stack, &labels, &[2], &h).unwrap();
        let g2 = sample_grad(&theta, stack.sample(2), 2, &h).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn hand_derived_gradient() {
        let h = hp(5.0, 10.0);
        let zero = ConfidenceMatrix::zeros(2, 1).unwrap();
        let g = sample_grad(&zero, &[0], 0, &h).unwrap();
        let e5 = 5f64.exp();
        let expected = -0.5 - 1.25 + 5.0 * (-0.25 * e5) / (e5 + 1.0);
        assert!((g.get(0, 0) - expected).abs() < 1e-14);
        assert!(
            (g.get(0, 0) + 2.991_633_936_344_644).abs() < 1e-12,
            "{}",
            g.get(0, 0)
        );
        assert_eq!(g.get(1, 0), 0.0);

        let fd = finite_diff_grad(
            |t| sample_loss(t, &[0], 0, &h).map(|b| b.total),
            &zero,
            FD_STEP,
        )
        .unwrap();
        assert!((fd.get(0, 0) + 2.991_633_936_344_644).abs() < 1e-6);
        assert!(fd.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_known_functions() {
        let theta =
            ConfidenceMatrix::from_rows(&[vec![1.5, -0.5, 2.0], vec![0.25, 3.0, -1.0]]).unwrap();
        let fd = finite_diff_grad(|_| Ok(4.2), &theta, FD_STEP).unwrap();
        assert!(fd.as_slice().iter().all(|&v| v == 0.0));
        let fd = finite_diff_grad(
            |t| Ok(t.as_slice().iter().map(|v| v * v).sum::<f64>() / 2.0),
            &theta,
            FD_STEP,
        )
        .unwrap();
        for (a, b) in fd.as_slice().iter().zip(theta.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        let err = finite_diff_grad(
            |t| Ok(if t.get(1, 2) > -1.0 { f64::NAN } else { 0.0 }),
            &theta,
            FD_STEP,
        )
        .unwrap_err();
        assert!(err.to_string().contains("(1, 2)"), "{err}");
        assert!(finite_diff_grad(|_| Ok(0.0), &theta, 0.0).is_err());
    }

    #[test]
    fn bound_formulas() {
        assert_eq!(grad_entry_bound(&hp(0.0, 10.0), 3), 1.0);
        let b = grad_entry_bound(&hp(5.0, 10.0), 3);
        assert!((b - (6.0 + 5.0 / 3.0 * 10f64.exp())).abs() < 1e-9);
        assert!((b - 36716.78).abs() < 0.01, "{b}");
        assert_eq!(grad_entry_bound(&hp(1.0, 0.0), 2), 2.5);
        assert_eq!(lipschitz_bound(4, 9, &hp(0.0, 10.0)), 6.0);
        let l = lipschitz_bound(3, 10, &hp(5.0, 10.0));
        assert!((l - 30f64.sqrt() * b).abs() < 1e-6);
        assert!((l / 2.011e5 - 1.0).abs() < 1e-3, "{l}");
        assert!((lipschitz_bound(2, 2, &hp(1.0, 0.0)) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(HyperParams::default().validate().is_ok());
        assert!(HyperParams {
            alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(HyperParams {
            gamma: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(HyperParams {
            batch: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(HyperParams {
            lr: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, c).prop_map(move |v| {
            let sum: f64 = v.iter().sum();
            let mut out: Vec<f64> = v.iter().map(|x| x / sum).collect();
            // push the rounding residue into the last entry
            let head: f64 = out[..c - 1].iter().sum();
            out[c - 1] = 1.0 - head;
            out
        })
    }

    fn grad_instance() -> impl Strategy<Value = (ConfidenceMatrix, Vec<usize>, usize, f64)> {
        (2usize..7, 1usize..13).prop_flat_map(|(c, k)| {
            (
                prop::collection::vec(-2.0f64..2.0, c * k),
                prop::collection::vec(0..c, k),
                0..c,
                prop::sample::select(vec![5.0, 25.0]),
            )
                .prop_map(move |(vals, votes, m, gamma)| {
                    (
                        ConfidenceMatrix::from_row_major(c, k, vals).unwrap(),
                        votes,
                        m,
                        gamma,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn breakdown_is_consistent(s in (2usize..7).prop_flat_map(simplex), m in 0usize..6, gamma in 0.0f64..30.0) {
            let m = m % s.len();
            let h = hp(gamma, 10.0);
            let b = loss_from_probs(&pv(&s), m, &h).unwrap();
            prop_assert!(b.ce >= 0.0);
            prop_assert!((b.total - (b.l1 + b.l2 + b.l3)).abs() <= 1e-12);
            prop_assert!((b.total - (b.ce - gamma * b.margin_smooth)).abs() <= 1e-12 * (1.0 + b.total.abs()));
        }

        #[test]
        fn analytic_gradient_matches_finite_differences((theta, votes, m, gamma) in grad_instance()) {
            let h = hp(gamma, 10.0);
            let g = sample_grad(&theta, &votes, m, &h).unwrap();
            let fd = finite_diff_grad(|t| sample_loss(t, &votes, m, &h).map(|b| b.total), &theta, FD_STEP).unwrap();
            let err = gradient_error(&g, &fd, 1e-6, 1e-8);
            prop_assert!(err <= 1e-6, "error {err}");
        }

        #[test]
        fn gradient_is_column_sparse((theta, votes, m, gamma) in grad_instance()) {
            let g = sample_grad(&theta, &votes, m, &hp(gamma, 10.0)).unwrap();
            for (l, &p) in votes.iter().enumerate() {
                for row in 0..theta.classes() {
                    if row != m && row != p {
                        prop_assert_eq!(g.get(row, l), 0.0);
                    }
                }
            }
        }
    }
}
