//! Accuracy, margin diagnostics and decision-boundary grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::ForestModel;
use crate::loss::{self, HyperParams};
use crate::tensor::{self, ConfidenceMatrix, PredictionStack};

/// Percentage of `preds` equal to `labels`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_pct: f64,
    pub n: usize,
    /// Accuracy within each true class, `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean of `s[m] - max_{j != m} s[j]`.
    pub margin_mean: f64,
    pub margin_min: f64,
    /// Mean of `s[m] - smooth_max2(s, m)`.
    pub margin_smooth_mean: f64,
    pub frac_negative_margin: f64,
    /// Fraction of samples whose fused argmax is the true class.
    pub assumption_rate: f64,
}

pub fn margin_report(
    theta: &ConfidenceMatrix,
    stack: &PredictionStack,
    labels: &[usize],
    hp: &HyperParams,
) -> Result<EvalReport> {
    if labels.len() != stack.samples() {
        return Err(Error::invalid(format!(
            "{} labels for {} samples",
            labels.len(),
            stack.samples()
        )));
    }
    if stack.is_empty() {
        return Err(Error::invalid("cannot report on an empty set"));
    }
    let c = theta.classes();
    let n = stack.samples();
    let mut per_class = vec![(0usize, 0usize); c];
    let (mut correct, mut holds) = (0usize, 0usize);
    let (mut margin_sum, mut margin_min, mut smooth_sum) = (0.0, f64::INFINITY, 0.0);
    let mut negative = 0usize;
    for (votes, &m) in stack.iter().zip(labels) {
        if m >= c {
            return Err(Error::invalid(format!("label {m} out of range 0..{c}")));
        }
        let s = tensor::fused_probs(theta, votes)?;
        let pred = tensor::ensemble_predict(theta, votes)?;
        let margin = s[m] - loss::max_other(&s, m);
        let smooth = s[m] - loss::smooth_max2(&s, m, hp.alpha)?;
        margin_sum += margin;
        margin_min = margin_min.min(margin);
        smooth_sum += smooth;
        if margin < 0.0 {
            negative += 1;
        }
        if s.argmax() == m {
            holds += 1;
        }
        per_class[m].1 += 1;
        if pred == m {
            correct += 1;
            per_class[m].0 += 1;
        }
    }
    let nf = n as f64;
    Ok(EvalReport {
        accuracy_pct: 100.0 * correct as f64 / nf,
        n,
        per_class_accuracy: per_class
            .iter()
            .map(|&(ok, total)| (total > 0).then(|| 100.0 * ok as f64 / total as f64))
            .collect(),
        margin_mean: margin_sum / nf,
        margin_min,
        margin_smooth_mean: smooth_sum / nf,
        frac_negative_margin: negative as f64 / nf,
        assumption_rate: holds as f64 / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

fn lattice(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    let step = (hi - lo) / (resolution - 1) as f64;
    (0..resolution)
        .map(|i| {
            if i + 1 == resolution {
                hi
            } else {
                lo + step * i as f64
            }
        })
        .collect()
}

/// Fused predictions on a `resolution x resolution` lattice covering both
/// ranges inclusively, row-major with `y` as the outer index.
pub fn boundary_grid(
    theta: &ConfidenceMatrix,
    forest: &ForestModel,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if forest.feature_count != 2 {
        return Err(Error::invalid(format!(
            "decision boundary needs a 2-feature model, got {} features",
            forest.feature_count
        )));
    }
    if resolution < 2 {
        return Err(Error::invalid("grid resolution must be >= 2"));
    }
    for (lo, hi) in [x_range, y_range] {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("invalid grid range [{lo}, {hi}]")));
        }
    }
    let xs = lattice(x_range.0, x_range.1, resolution);
    let ys = lattice(y_range.0, y_range.1, resolution);
    let mut out = Vec::with_capacity(resolution * resolution);
    for &y in &ys {
        for &x in &xs {
            let votes = forest.predict_votes(&[x, y])?;
            let class = tensor::ensemble_predict(theta, &votes)?;
            out.push(GridPoint { x, y, class });
        }
    }
    Ok(out)
}

/// Writes `x,y,class` rows, naming classes through `label_dict`.
pub fn write_grid_csv<W: std::io::Write>(
    points: &[GridPoint],
    label_dict: &[String],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "class"])?;
    for p in points {
        let name = label_dict
            .get(p.class)
            .cloned()
            .unwrap_or_else(|| p.class.to_string());
        w.write_record([p.x.to_string(), p.y.to_string(), name])?;
    }
    w.flush().map_err(|e| Error::io("<grid output>", e))?;
    Ok(())
}
