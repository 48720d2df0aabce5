//! Bootstrap CART decision trees used as the base learners.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PredictionStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        class: usize,
    },
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub root: Node,
}

impl TreeModel {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { class } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }
}

/// How many features each split may consider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubsample {
    /// `ceil(sqrt(d))` features, drawn afresh at every split.
    Sqrt,
    All,
}

impl FeatureSubsample {
    fn count(self, d: usize) -> usize {
        match self {
            FeatureSubsample::Sqrt => ((d as f64).sqrt().ceil() as usize).clamp(1, d.max(1)),
            FeatureSubsample::All => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub feature_subsample: FeatureSubsample,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: Some(8),
            min_leaf: 1,
            feature_subsample: FeatureSubsample::Sqrt,
        }
    }
}

fn check_training_set(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::invalid("cannot train a tree on zero samples"));
    }
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features[0].len();
    if let Some(i) = features.iter().position(|x| x.len() != d) {
        return Err(Error::invalid(format!(
            "row {i} has {} features, expected {d}",
            features[i].len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range 0..{classes}"
        )));
    }
    Ok(d)
}

/// Grows one CART tree with Gini impurity.
pub fn train_tree<R: Rng>(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    params: &TreeParams,
    rng: &mut R,
) -> Result<TreeModel> {
    let d = check_training_set(features, labels, classes)?;
    let mut builder = Builder {
        features,
        labels,
        classes,
        d,
        params,
        rng,
    };
    let mut rows: Vec<usize> = (0..features.len()).collect();
    let root = builder.grow(&mut rows, 0);
    Ok(TreeModel { root })
}

struct Builder<'a, R> {
    features: &'a [Vec<f64>],
    labels: &'a [usize],
    classes: usize,
    d: usize,
    params: &'a TreeParams,
    rng: &'a mut R,
}

struct Split {
    feature: usize,
    threshold: f64,
    /// Weighted Gini of the two children, scaled by the node size.
    impurity: f64,
}

fn gini_sum(counts: &[usize], total: usize) -> f64 {
    // total * gini = total - sum(count^2) / total
    if total == 0 {
        return 0.0;
    }
    let sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    total as f64 - sq / total as f64
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (j, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = j;
        }
    }
    best
}

impl<R: Rng> Builder<'_, R> {
    fn counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &i in rows {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize) -> Node {
        let counts = self.counts(rows);
        let leaf = Node::Leaf {
            class: majority(&counts),
        };
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let at_cap = self.params.max_depth.is_some_and(|m| depth >= m);
        let min_leaf = self.params.min_leaf.max(1);
        if pure || at_cap || rows.len() < 2 * min_leaf {
            return leaf;
        }
        let Some(split) = self.best_split(rows, &counts, min_leaf) else {
            return leaf;
        };
        let (feature, threshold) = (split.feature, split.threshold);
        let mut left_rows: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| self.features[i][feature] <= threshold)
            .collect();
        let mut right_rows: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| self.features[i][feature] > threshold)
            .collect();
        let left = self.grow(&mut left_rows, depth + 1);
        let right = self.grow(&mut right_rows, depth + 1);
        Node::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Best split over a random feature subset; keeps drawing further
    /// features while none of those seen so far admits a valid split.
    fn best_split(
        &mut self,
        rows: &mut [usize],
        counts: &[usize],
        min_leaf: usize,
    ) -> Option<Split> {
        let mut order: Vec<usize> = (0..self.d).collect();
        order.shuffle(self.rng);
        let wanted = self.params.feature_subsample.count(self.d);
        let mut best: Option<Split> = None;
        for (tried, &feature) in order.iter().enumerate() {
            if tried >= wanted && best.is_some() {
                break;
            }
            if let Some(candidate) = self.best_threshold(rows, counts, feature, min_leaf) {
                if best
                    .as_ref()
                    .is_none_or(|b| candidate.impurity < b.impurity)
                {
                    best = Some(candidate);
                }
            }
        }
        best
    }

    fn best_threshold(
        &self,
        rows: &mut [usize],
        counts: &[usize],
        feature: usize,
        min_leaf: usize,
    ) -> Option<Split> {
        let x = |i: usize| self.features[i][feature];
        rows.sort_by(|&a, &b| x(a).total_cmp(&x(b)));
        let n = rows.len();
        let mut left = vec![0usize; self.classes];
        let mut right = counts.to_vec();
        let mut best: Option<Split> = None;
        for pos in 1..n {
            let moved = self.labels[rows[pos - 1]];
            left[moved] += 1;
            right[moved] -= 1;
            let (lo, hi) = (x(rows[pos - 1]), x(rows[pos]));
            if lo == hi || pos < min_leaf || n - pos < min_leaf {
                continue;
            }
            let impurity = gini_sum(&left, pos) + gini_sum(&right, n - pos);
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                let mut threshold = lo + (hi - lo) / 2.0;
                // midpoint can round up to `hi` for adjacent floats
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Split {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub classes: usize,
    pub feature_count: usize,
    pub seed: u64,
    pub params: TreeParams,
}

/// Generator for tree `tree` of a forest seeded with `seed`.
pub fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

/// `n` row indices drawn with replacement from tree `tree`'s generator.
pub fn bootstrap_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// `k` trees, each grown on its own bootstrap resample.
pub fn train_forest(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    k: usize,
    params: &TreeParams,
    seed: u64,
) -> Result<ForestModel> {
    if k < 1 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let d = check_training_set(features, labels, classes)?;
    let n = features.len();
    let trees = (0..k)
        .map(|t| {
            let mut rng = tree_rng(seed, t);
            let rows = bootstrap_indices(n, &mut rng);
            let xs: Vec<Vec<f64>> = rows.iter().map(|&i| features[i].clone()).collect();
            let ys: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            train_tree(&xs, &ys, classes, params, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel {
        trees,
        classes,
        feature_count: d,
        seed,
        params: *params,
    })
}

impl ForestModel {
    pub fn learners(&self) -> usize {
        self.trees.len()
    }

    pub fn predict_votes(&self, x: &[f64]) -> Result<Vec<usize>> {
        if x.len() != self.feature_count {
            return Err(Error::invalid(format!(
                "sample has {} features, forest expects {}",
                x.len(),
                self.feature_count
            )));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).collect())
    }
}

/// One-hot votes of every tree on every row.
pub fn predict_stack(forest: &ForestModel, features: &[Vec<f64>]) -> Result<PredictionStack> {
    let mut votes = Vec::with_capacity(features.len() * forest.learners());
    for (i, x) in features.iter().enumerate() {
        let row = forest
            .predict_votes(x)
            .map_err(|e| Error::invalid(format!("row {i}: {e}")))?;
        votes.extend(row);
    }
    PredictionStack::from_votes(features.len(), forest.learners(), forest.classes, votes)
}

pub fn import_stack(path: impl AsRef<Path>, label_dict: &[String]) -> Result<PredictionStack> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_stack(file, label_dict).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses a prediction CSV: one row per sample, one column per classifier,
/// cells are original class labels. A `clf_0,...` header is optional.
pub fn read_stack<R: std::io::Read>(input: R, label_dict: &[String]) -> Result<PredictionStack> {
    let index: HashMap<&str, usize> = label_dict
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut width = None;
    let mut votes = Vec::new();
    let mut samples = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(r as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if r == 0 && rec.get(0) == Some("clf_0") {
            width = Some(rec.len());
            continue;
        }
        let k = *width.get_or_insert(rec.len());
        if rec.len() != k {
            return Err(Error::invalid(format!(
                "row {line}: expected {k} classifier columns, found {}",
                rec.len()
            )));
        }
        for cell in rec.iter() {
            let class = index.get(cell).ok_or_else(|| {
                Error::invalid(format!(
                    "row {line}: label {cell:?} not in the label dictionary"
                ))
            })?;
            votes.push(*class);
        }
        samples += 1;
    }
    if samples == 0 {
        return Err(Error::invalid("prediction file has no rows"));
    }
    PredictionStack::from_votes(samples, width.unwrap_or(0), label_dict.len(), votes)
}
