//! Dataset loading, label encoding, seeded splits and the two-moons generator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Numeric features with labels encoded as `0..c`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `label_dict[i]` is the original label encoded as `i`.
    pub label_dict: Vec<String>,
    /// Column names when the file had a header.
    pub feature_names: Option<Vec<String>>,
}

impl EncodedDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn c(&self) -> usize {
        self.label_dict.len()
    }

    pub fn decode(&self, label: usize) -> Option<&str> {
        self.label_dict.get(label).map(String::as_str)
    }

    pub fn encode(&self, label: &str) -> Option<usize> {
        self.label_dict.iter().position(|l| l == label)
    }

    /// Rows at `indices`, sharing this dataset's label dictionary.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_dict: self.label_dict.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Writes the dataset as CSV with a header and the decoded label last.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = match &self.feature_names {
            Some(names) => names.clone(),
            None => (0..self.d()).map(|j| format!("x{j}")).collect(),
        };
        header.push("label".into());
        w.write_record(&header)?;
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let mut rec: Vec<String> = x.iter().map(f64::to_string).collect();
            rec.push(self.label_dict[y].clone());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LabelColumn {
    #[default]
    Last,
    /// Header name; requires a header row.
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "last" {
            LabelColumn::Last
        } else {
            LabelColumn::Name(s.to_string())
        })
    }
}

/// Sorted unique labels: numerically when every label parses as a number,
/// lexicographically otherwise.
pub fn sorted_label_dict<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut uniq: Vec<String> = labels.into_iter().map(str::to_string).collect();
    uniq.sort();
    uniq.dedup();
    let numeric: Option<Vec<f64>> = uniq.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(f64, String)> = values.into_iter().zip(uniq).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        uniq = paired.into_iter().map(|(_, l)| l).collect();
    }
    uniq
}

pub fn load_csv(path: impl AsRef<Path>, label_col: &LabelColumn) -> Result<EncodedDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_col).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses a dataset CSV.
///
/// The first row is a header when any of its feature cells is not numeric.
/// Row numbers in errors are 1-based file lines.
pub fn read_csv<R: Read>(input: R, label_col: &LabelColumn) -> Result<EncodedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let line = rec
            .position()
            .map_or(records.len() as u64 + 1, |p| p.line());
        records.push((line, rec));
    }
    let Some((_, first)) = records.first() else {
        return Err(Error::invalid("empty file"));
    };
    let width = first.len();
    if width < 2 {
        return Err(Error::invalid(
            "need at least one feature column and a label column",
        ));
    }

    let label_idx_for_header = |header: &csv::StringRecord| -> Result<usize> {
        match label_col {
            LabelColumn::Last => Ok(width - 1),
            LabelColumn::Name(name) => header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::invalid(format!("no column named {name:?} in header"))),
        }
    };
    let provisional = match label_col {
        LabelColumn::Last => width - 1,
        LabelColumn::Name(_) => usize::MAX,
    };
    let has_header = matches!(label_col, LabelColumn::Name(_))
        || first
            .iter()
            .enumerate()
            .any(|(j, cell)| j != provisional && cell.parse::<f64>().is_err());

    let (label_idx, names, body) = if has_header {
        let header = &records[0].1;
        let idx = label_idx_for_header(header)?;
        let names = header
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != idx)
            .map(|(_, h)| h.to_string())
            .collect();
        (idx, Some(names), &records[1..])
    } else {
        (width - 1, None, &records[..])
    };
    if body.is_empty() {
        return Err(Error::invalid("no data rows"));
    }

    let mut features = Vec::with_capacity(body.len());
    let mut raw_labels = Vec::with_capacity(body.len());
    for (line, rec) in body {
        if rec.len() != width {
            return Err(Error::invalid(format!(
                "row {line}: expected {width} columns, found {}",
                rec.len()
            )));
        }
        let mut x = Vec::with_capacity(width - 1);
        for (j, cell) in rec.iter().enumerate() {
            if j == label_idx {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::invalid(format!(
                    "row {line}, column {}: non-numeric value {cell:?}",
                    j + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "row {line}, column {}: non-finite value {cell:?}",
                    j + 1
                )));
            }
            x.push(v);
        }
        features.push(x);
        raw_labels.push(rec[label_idx].to_string());
    }

    let label_dict = sorted_label_dict(raw_labels.iter().map(String::as_str));
    if label_dict.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two classes, found {}",
            label_dict.len()
        )));
    }
    let index: HashMap<&str, usize> = label_dict
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let labels = raw_labels.iter().map(|l| index[l.as_str()]).collect();
    Ok(EncodedDataset {
        features,
        labels,
        label_dict,
        feature_names: names,
    })
}

/// Test-set size `round_half_up(test_frac * n)`.
pub fn test_count(n: usize, test_frac: f64) -> usize {
    (test_frac * n as f64 + 0.5).floor() as usize
}

/// Seeded random partition into `(train, test)`.
pub fn train_test_split(
    ds: &EncodedDataset,
    test_frac: f64,
    seed: u64,
) -> Result<(EncodedDataset, EncodedDataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must be in (0, 1), got {test_frac}"
        )));
    }
    let n = ds.n();
    let n_test = test_count(n, test_frac);
    if n_test == 0 || n_test >= n {
        return Err(Error::invalid(format!(
            "splitting {n} rows at {test_frac} leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = order.split_at(n_test);
    Ok((ds.subset(train), ds.subset(test)))
}

/// Default Gaussian noise for [`gen_moons`].
pub const DEFAULT_MOONS_NOISE: f64 = 0.15;

/// Two interleaving half circles, `n / 2` points each.
///
/// Class 0 lies on `(cos t, sin t)`, class 1 on `(1 - cos t, 0.5 - sin t)`,
/// `t ~ U[0, pi]`, plus isotropic Gaussian noise.
pub fn gen_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<EncodedDataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "moons needs an even n >= 2, got {n}"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise must be >= 0, got {noise_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = Uniform::new_inclusive(0.0, PI).expect("valid range");
    let half = n / 2;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for _ in 0..half {
            let t: f64 = angle.sample(&mut rng);
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let ex: f64 = StandardNormal.sample(&mut rng);
            let ey: f64 = StandardNormal.sample(&mut rng);
            features.push(vec![x + noise_sigma * ex, y + noise_sigma * ey]);
            labels.push(class);
        }
    }
    Ok(EncodedDataset {
        features,
        labels,
        label_dict: vec!["0".into(), "1".into()],
        feature_names: Some(vec!["x".into(), "y".into()]),
    })
}
