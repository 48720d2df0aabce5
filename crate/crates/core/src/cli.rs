//! Command-line front end and the persisted model format.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error,
//! 3 verification failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, EncodedDataset, LabelColumn};
use crate::error::{Error, Result};
use crate::eval;
use crate::forest::{self, FeatureSubsample, ForestModel, TreeParams};
use crate::loss::{self, HyperParams};
use crate::optimizer;
use crate::tensor::{self, ConfidenceMatrix, PredictionStack};

pub const MODEL_VERSION: &str = "margin-ensemble/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Everything needed to reproduce predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    /// Absent when the confidences were fitted over imported predictions.
    pub forest: Option<ForestModel>,
    /// `c x k`, row = class.
    pub theta: ConfidenceMatrix,
    pub label_dict: Vec<String>,
    pub hyperparameters: HyperParams,
    pub seed: u64,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelFile = serde_json::from_str(text)?;
        if model.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model version {:?}, expected {MODEL_VERSION:?}",
                model.version
            )));
        }
        if model.theta.classes() != model.label_dict.len() {
            return Err(Error::invalid(format!(
                "confidence matrix has {} classes, label dictionary has {}",
                model.theta.classes(),
                model.label_dict.len()
            )));
        }
        if let Some(f) = &model.forest {
            if f.learners() != model.theta.learners() || f.classes != model.theta.classes() {
                return Err(Error::invalid(
                    "forest shape does not match the confidence matrix",
                ));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "margin-ensemble",
    version,
    about = "Confidence-matrix ensemble of decision trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train base trees and the confidence matrix.
    Train(TrainArgs),
    /// Write the decoded prediction of every row.
    Predict(PredictArgs),
    /// Print accuracy and margin diagnostics as JSON.
    Eval(EvalArgs),
    /// Seeded train/test split.
    Split(SplitArgs),
    /// Generate the two-moons toy dataset.
    Moons(MoonsArgs),
    /// Compare the analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Export the fused decision boundary of a 2-feature model on a grid.
    Boundary(BoundaryArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// `last` or a header column name.
    #[arg(long = "label-col", default_value = "last")]
    label_col: LabelColumn,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    trees: usize,
    #[arg(long = "max-depth", default_value_t = 8)]
    max_depth: usize,
    #[arg(long = "min-leaf", default_value_t = 1)]
    min_leaf: usize,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value_t = 5.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Fit the confidences over these predictions instead of training trees.
    #[arg(long)]
    stack: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Predictions to fuse, for models trained with `train --stack`.
    #[arg(long)]
    stack: Option<PathBuf>,
    #[arg(long, default_value = "preds.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    stack: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "test-frac", default_value_t = 0.2)]
    test_frac: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "out-train")]
    out_train: PathBuf,
    #[arg(long = "out-test")]
    out_test: PathBuf,
}

#[derive(Debug, Args)]
struct MoonsArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = data::DEFAULT_MOONS_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    c: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 5.0)]
    gamma: f64,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BoundaryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    xmin: f64,
    #[arg(long, allow_negative_numbers = true)]
    xmax: f64,
    #[arg(long, allow_negative_numbers = true)]
    ymin: f64,
    #[arg(long, allow_negative_numbers = true)]
    ymax: f64,
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    #[arg(long, default_value = "grid.csv")]
    out: PathBuf,
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => evaluate(a),
        Command::Split(a) => split(a),
        Command::Moons(a) => moons(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Boundary(a) => boundary(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

#[derive(Serialize)]
struct TrainSummary {
    samples: usize,
    classes: usize,
    learners: usize,
    epochs_run: usize,
    converged: bool,
    initial_loss: f64,
    final_loss: f64,
    train_accuracy_pct: f64,
}

fn train(a: TrainArgs) -> Result<i32> {
    let ds = data::load_csv(&a.data.data, &a.data.label_col)?;
    let hp = HyperParams {
        alpha: a.alpha,
        gamma: a.gamma,
        lr: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        tol: a.tol,
        seed: a.seed,
    };
    hp.validate()?;
    let (forest, stack) = match &a.stack {
        Some(path) => {
            let stack = forest::import_stack(path, &ds.label_dict)?;
            if stack.samples() != ds.n() {
                return Err(Error::invalid(format!(
                    "prediction file has {} rows, dataset has {}",
                    stack.samples(),
                    ds.n()
                )));
            }
            (None, stack)
        }
        None => {
            let params = TreeParams {
                max_depth: Some(a.max_depth),
                min_leaf: a.min_leaf,
                feature_subsample: FeatureSubsample::Sqrt,
            };
            let forest =
                forest::train_forest(&ds.features, &ds.labels, ds.c(), a.trees, &params, a.seed)?;
            let stack = forest::predict_stack(&forest, &ds.features)?;
            (Some(forest), stack)
        }
    };
    let report = optimizer::train(&stack, &ds.labels, &hp)?;
    let preds = tensor::predict_all(&report.theta, &stack)?;
    let summary = TrainSummary {
        samples: ds.n(),
        classes: ds.c(),
        learners: stack.learners(),
        epochs_run: report.epochs_run,
        converged: report.converged,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        train_accuracy_pct: eval::accuracy(&preds, &ds.labels)?,
    };
    let model = ModelFile {
        version: MODEL_VERSION.to_string(),
        forest,
        theta: report.theta,
        label_dict: ds.label_dict,
        hyperparameters: hp,
        seed: a.seed,
    };
    model.save(&a.out)?;
    print_json(&summary)?;
    Ok(EXIT_OK)
}

/// Dataset labels re-encoded through the model's dictionary.
fn labels_for_model(ds: &EncodedDataset, model: &ModelFile) -> Result<Vec<usize>> {
    ds.labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let name = &ds.label_dict[y];
            model
                .label_dict
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| {
                    Error::invalid(format!("row {i}: label {name:?} unknown to the model"))
                })
        })
        .collect()
}

fn model_stack(
    model: &ModelFile,
    ds: &EncodedDataset,
    stack: Option<&Path>,
) -> Result<PredictionStack> {
    let stack = match (stack, &model.forest) {
        (Some(path), _) => forest::import_stack(path, &model.label_dict)?,
        (None, Some(forest)) => forest::predict_stack(forest, &ds.features)?,
        (None, None) => {
            return Err(Error::invalid(
                "model has no trees; pass --stack with the base-classifier predictions",
            ))
        }
    };
    if stack.samples() != ds.n() {
        return Err(Error::invalid(format!(
            "{} prediction rows for {} data rows",
            stack.samples(),
            ds.n()
        )));
    }
    if stack.learners() != model.theta.learners() {
        return Err(Error::invalid(format!(
            "{} classifiers in the predictions, model expects {}",
            stack.learners(),
            model.theta.learners()
        )));
    }
    Ok(stack)
}

fn predict(a: PredictArgs) -> Result<i32> {
    let model = ModelFile::load(&a.model)?;
    let ds = data::load_csv(&a.data.data, &a.data.label_col)?;
    let stack = model_stack(&model, &ds, a.stack.as_deref())?;
    let preds = tensor::predict_all(&model.theta, &stack)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pred"])?;
    for p in preds {
        w.write_record([&model.label_dict[p]])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(&a.out, e.into_error()))?;
    write_file(&a.out, &bytes)?;
    Ok(EXIT_OK)
}

fn evaluate(a: EvalArgs) -> Result<i32> {
    let model = ModelFile::load(&a.model)?;
    let ds = data::load_csv(&a.data.data, &a.data.label_col)?;
    let labels = labels_for_model(&ds, &model)?;
    let stack = model_stack(&model, &ds, a.stack.as_deref())?;
    let report = eval::margin_report(&model.theta, &stack, &labels, &model.hyperparameters)?;
    print_json(&report)?;
    Ok(EXIT_OK)
}

fn split(a: SplitArgs) -> Result<i32> {
    let ds = data::load_csv(&a.data.data, &a.data.label_col)?;
    let (train, test) = data::train_test_split(&ds, a.test_frac, a.seed)?;
    train.save_csv(&a.out_train)?;
    test.save_csv(&a.out_test)?;
    eprintln!("train {} rows, test {} rows", train.n(), test.n());
    Ok(EXIT_OK)
}

fn moons(a: MoonsArgs) -> Result<i32> {
    data::gen_moons(a.n, a.noise, a.seed)?.save_csv(&a.out)?;
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.c < 2 || a.k < 1 || a.trials < 1 {
        return Err(Error::invalid(
            "gradcheck needs c >= 2, k >= 1 and trials >= 1",
        ));
    }
    let hp = HyperParams {
        alpha: a.alpha,
        gamma: a.gamma,
        ..HyperParams::default()
    };
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst = 0.0f64;
    for _ in 0..a.trials {
        let err = loss::gradient_check_trial(&mut rng, a.c, a.k, &hp)?;
        worst = worst.max(err);
    }
    println!("max relative error {worst:e} over {} trials", a.trials);
    Ok(if worst <= loss::GRADCHECK_RTOL {
        EXIT_OK
    } else {
        EXIT_VERIFY
    })
}

fn boundary(a: BoundaryArgs) -> Result<i32> {
    let model = ModelFile::load(&a.model)?;
    let forest = model
        .forest
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no trees to evaluate on a grid"))?;
    let grid = eval::boundary_grid(
        &model.theta,
        forest,
        (a.xmin, a.xmax),
        (a.ymin, a.ymax),
        a.resolution,
    )?;
    let mut bytes = Vec::new();
    eval::write_grid_csv(&grid, &model.label_dict, &mut bytes)?;
    write_file(&a.out, &bytes)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{Node, TreeModel};

    #[test]
    fn model_json_round_trip_is_exact() {
        let theta = ConfidenceMatrix::from_rows(&[
            vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-310],
            vec![std::f64::consts::PI, 1e300, -0.0],
        ])
        .unwrap();
        let model = ModelFile {
            version: MODEL_VERSION.into(),
            forest: Some(ForestModel {
                trees: vec![
                    TreeModel {
                        root: Node::Split {
                            feature: 1,
                            threshold: 0.30000000000000004,
                            left: Box::new(Node::Leaf { class: 0 }),
                            right: Box::new(Node::Leaf { class: 1 }),
                        },
                    };
                    3
                ],
                classes: 2,
                feature_count: 2,
                seed: u64::MAX,
                params: TreeParams::default(),
            }),
            theta,
            label_dict: vec!["neg".into(), "pos".into()],
            hyperparameters: HyperParams {
                tol: 1e-7,
                lr: 0.1,
                ..Default::default()
            },
            seed: 1,
        };
        let text = model.to_json().unwrap();
        let back = ModelFile::from_json(&text).unwrap();
        assert_eq!(back, model);
        for (a, b) in back.theta.as_slice().iter().zip(model.theta.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_foreign_versions() {
        let text = r#"{"version":"other","forest":null,"theta":[[1.0],[1.0]],"label_dict":["a","b"],
            "hyperparameters":{"alpha":10.0,"gamma":5.0,"lr":0.1,"batch":64,"epochs":500,"tol":1e-7,"seed":1},"seed":1}"#;
        assert!(ModelFile::from_json(text).is_err());
        let ok = text.replace("\"other\"", &format!("{MODEL_VERSION:?}"));
        assert!(ModelFile::from_json(&ok).is_ok());
        let bad_shape = ok.replace("[[1.0],[1.0]]", "[[1.0],[1.0],[1.0]]");
        assert!(ModelFile::from_json(&bad_shape).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["margin-ensemble", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["margin-ensemble", "moons", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["margin-ensemble"]), EXIT_USAGE);
    }
}
