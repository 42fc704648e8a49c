//! Training loop and evaluation for the model.
//!
//! One run is fully determined by (config, seed, data): initialization,
//! batch order and dropout masks come from fixed named streams, epochs
//! run to the configured count, and the parameters of the best
//! validation epoch are the ones evaluated on the test split.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::AdError;
use crate::metrics::{Confusion, MetricError};
use crate::model::{
    multicurve_matrix, BatchTargets, DfmimConfig, DfmimModel, ModelError, Task,
};
use crate::nn::{Adam, Mode};
use crate::rng::{stream, Domain};
use crate::sim::SimDataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyData(&'static str),
    #[error("dataset mismatch: {0}")]
    DataMismatch(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        /// Progress up to the failing batch.
        report: Box<TrainReport>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Inputs with scalar targets; `y_clean` carries noiseless responses
/// when the generator knows them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSet {
    pub xs: Vec<Tensor>,
    pub y: Vec<f64>,
    pub y_clean: Option<Vec<f64>>,
}

impl RegressionSet {
    pub fn from_sim(ds: &SimDataset) -> Self {
        Self {
            xs: ds.x.iter().map(multicurve_matrix).collect(),
            y: ds.y.clone(),
            y_clean: Some(ds.y_clean.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    fn check(&self, name: &'static str) -> Result<(), TrainError> {
        if self.xs.is_empty() {
            return Err(TrainError::EmptyData(name));
        }
        if self.y.len() != self.xs.len() {
            return Err(TrainError::DataMismatch(alloc::format!(
                "{name}: {} inputs vs {} targets",
                self.xs.len(),
                self.y.len()
            )));
        }
        if let Some(c) = &self.y_clean {
            if c.len() != self.xs.len() {
                return Err(TrainError::DataMismatch(alloc::format!(
                    "{name}: {} inputs vs {} clean targets",
                    self.xs.len(),
                    c.len()
                )));
            }
        }
        Ok(())
    }
}

/// Inputs with class labels in `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSet {
    pub xs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ClassificationSet {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    fn check(&self, name: &'static str, n_classes: usize) -> Result<(), TrainError> {
        if self.xs.is_empty() {
            return Err(TrainError::EmptyData(name));
        }
        if self.labels.len() != self.xs.len() {
            return Err(TrainError::DataMismatch(alloc::format!(
                "{name}: {} inputs vs {} labels",
                self.xs.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_classes) {
            return Err(TrainError::DataMismatch(alloc::format!(
                "{name}: label {bad} out of range for C={n_classes}"
            )));
        }
        Ok(())
    }
}

/// How the best validation epoch was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    MinValLoss,
    MaxValUa,
}

impl SelectionRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionRule::MinValLoss => "min validation loss",
            SelectionRule::MaxValUa => "max validation UA",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss (task loss + basis penalty).
    pub train_loss: f64,
    /// Validation MSE (regression) or validation UA (classification).
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTestReport {
    pub rmse_vs_noisy: f64,
    pub rmse_vs_clean: Option<f64>,
    /// Same metrics for the constant train-mean predictor.
    pub baseline_rmse_vs_noisy: f64,
    pub baseline_rmse_vs_clean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTestReport {
    pub wa: f64,
    pub ua: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub selection: SelectionRule,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs`; None when no epoch ran.
    pub best_epoch: Option<usize>,
    pub regression: Option<RegressionTestReport>,
    pub classification: Option<ClassificationTestReport>,
    /// Filled by callers that can measure time; never written to
    /// reproducible artifacts.
    pub wall_clock_secs: f64,
}

enum DataRef<'a> {
    Reg {
        train: &'a RegressionSet,
        val: &'a RegressionSet,
        test: &'a RegressionSet,
    },
    Cls {
        train: &'a ClassificationSet,
        val: &'a ClassificationSet,
        test: &'a ClassificationSet,
    },
}

/// Deterministic Fisher-Yates permutation of 0..n.
fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Per-column mean and std over every row of every sample; a column
/// with no spread keeps std 1 so the transform stays well defined.
fn feature_stats(xs: &[Tensor], p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; p];
    let mut count = 0usize;
    for x in xs {
        for i in 0..x.rows() {
            for j in 0..p {
                mean[j] += x.at(i, j);
            }
        }
        count += x.rows();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; p];
    for x in xs {
        for i in 0..x.rows() {
            for j in 0..p {
                let d = x.at(i, j) - mean[j];
                var[j] += d * d;
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = libm::sqrt(v / count as f64);
            if s > 1e-8 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn mean_std(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    (mean, if std > 1e-8 { std } else { 1.0 })
}

/// Mean squared error of eval-mode outputs against standardized
/// targets; the validation selection quantity for regression.
fn val_mse(model: &DfmimModel, set: &RegressionSet) -> Result<f64, TrainError> {
    let bs = model.config().batch_size.max(1);
    let mut ss = 0.0;
    let mut i = 0usize;
    while i < set.xs.len() {
        let end = (i + bs).min(set.xs.len());
        let refs: Vec<&Tensor> = set.xs[i..end].iter().collect();
        let fwd = model.forward_batch(&refs, false, &mut Mode::Eval)?;
        for (k, &out) in fwd.tape.value(fwd.output).data().iter().enumerate() {
            let t = model.standardize_target(set.y[i + k]);
            ss += (out - t) * (out - t);
        }
        i = end;
    }
    Ok(ss / set.xs.len() as f64)
}

fn val_ua(model: &DfmimModel, set: &ClassificationSet) -> Result<f64, TrainError> {
    let preds = model.predict_classes(&set.xs)?;
    let c = Confusion::from_pairs(&set.labels, &preds, model.config().c)?;
    Ok(c.ua()?)
}

/// Both RMSE variants of a trained regression model over a dataset.
pub fn evaluate_regression(
    model: &DfmimModel,
    set: &RegressionSet,
) -> Result<(f64, Option<f64>), TrainError> {
    if model.config().task != Task::Regression {
        return Err(TrainError::Model(ModelError::TaskMismatch(
            "evaluate_regression needs a regression model".into(),
        )));
    }
    set.check("eval")?;
    let preds = model.predict_scalars(&set.xs)?;
    let vs_noisy = crate::metrics::rmse(&preds, &set.y)?;
    let vs_clean = match &set.y_clean {
        Some(c) => Some(crate::metrics::rmse(&preds, c)?),
        None => None,
    };
    Ok((vs_noisy, vs_clean))
}

/// WA, UA and the confusion matrix of a classification model.
pub fn evaluate_classification(
    model: &DfmimModel,
    set: &ClassificationSet,
) -> Result<(f64, f64, Confusion), TrainError> {
    if model.config().task != Task::Classification {
        return Err(TrainError::Model(ModelError::TaskMismatch(
            "evaluate_classification needs a classification model".into(),
        )));
    }
    set.check("eval", model.config().c)?;
    let preds = model.predict_classes(&set.xs)?;
    let confusion = Confusion::from_pairs(&set.labels, &preds, model.config().c)?;
    let wa = confusion.wa()?;
    let ua = confusion.ua()?;
    Ok((wa, ua, confusion))
}

/// RMSE of the constant predictor `mean` over a dataset.
pub fn mean_predictor_rmse(
    mean: f64,
    set: &RegressionSet,
) -> Result<(f64, Option<f64>), TrainError> {
    set.check("baseline")?;
    let preds = vec![mean; set.len()];
    let vs_noisy = crate::metrics::rmse(&preds, &set.y)?;
    let vs_clean = match &set.y_clean {
        Some(c) => Some(crate::metrics::rmse(&preds, c)?),
        None => None,
    };
    Ok((vs_noisy, vs_clean))
}

/// Trains a regression model and evaluates it on the test split.
pub fn train_regression(
    cfg: &DfmimConfig,
    train: &RegressionSet,
    val: &RegressionSet,
    test: &RegressionSet,
) -> Result<(DfmimModel, TrainReport), TrainError> {
    if cfg.task != Task::Regression {
        return Err(TrainError::Model(ModelError::TaskMismatch(
            "train_regression needs task = regression".into(),
        )));
    }
    train.check("train")?;
    val.check("val")?;
    test.check("test")?;
    train_impl(cfg, DataRef::Reg { train, val, test })
}

/// Trains a classification model and evaluates it on the test split.
pub fn train_classification(
    cfg: &DfmimConfig,
    train: &ClassificationSet,
    val: &ClassificationSet,
    test: &ClassificationSet,
) -> Result<(DfmimModel, TrainReport), TrainError> {
    if cfg.task != Task::Classification {
        return Err(TrainError::Model(ModelError::TaskMismatch(
            "train_classification needs task = classification".into(),
        )));
    }
    train.check("train", cfg.c)?;
    val.check("val", cfg.c)?;
    test.check("test", cfg.c)?;
    train_impl(cfg, DataRef::Cls { train, val, test })
}

fn train_impl(cfg: &DfmimConfig, data: DataRef) -> Result<(DfmimModel, TrainReport), TrainError> {
    let mut model = DfmimModel::init(cfg.clone())?;
    let (train_xs, n): (&[Tensor], usize) = match &data {
        DataRef::Reg { train, .. } => (&train.xs, train.len()),
        DataRef::Cls { train, .. } => (&train.xs, train.len()),
    };
    if cfg.normalize_features {
        let (mean, std) = feature_stats(train_xs, cfg.p);
        model.set_norm_stats(mean, std)?;
    }
    if cfg.standardize_targets {
        if let DataRef::Reg { train, .. } = &data {
            let (m, s) = mean_std(&train.y);
            model.set_target_stats(m, s)?;
        }
    }
    let selection = match cfg.task {
        Task::Regression => SelectionRule::MinValLoss,
        Task::Classification => SelectionRule::MaxValUa,
    };

    let mut adam = Adam::new(cfg.lr, model.params());
    let mut shuffle_rng = stream(cfg.seed, Domain::Shuffle, 0);
    let mut dropout_rng = stream(cfg.seed, Domain::Dropout, 0);
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(n, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &train_xs[i]).collect();
            let targets = match &data {
                DataRef::Reg { train, .. } => BatchTargets::Values(
                    batch
                        .iter()
                        .map(|&i| model.standardize_target(train.y[i]))
                        .collect(),
                ),
                DataRef::Cls { train, .. } => {
                    BatchTargets::Labels(batch.iter().map(|&i| train.labels[i]).collect())
                }
            };
            let mut mode = Mode::Train {
                dropout: cfg.dropout,
                rng: &mut dropout_rng,
            };
            let mut fwd = model.forward_batch(&xs, true, &mut mode)?;
            let loss = model.loss_on(&mut fwd, &targets)?;
            let loss_v = fwd.tape.scalar_value(loss);
            if !loss_v.is_finite() {
                let report = TrainReport {
                    seed: cfg.seed,
                    selection,
                    epochs: records,
                    best_epoch: best.as_ref().map(|(_, e, _)| *e),
                    regression: None,
                    classification: None,
                    wall_clock_secs: 0.0,
                };
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    report: Box::new(report),
                });
            }
            loss_sum += loss_v * batch.len() as f64;
            let mut grads = fwd.tape.backward(loss)?;
            let gvec: Vec<Option<Tensor>> = fwd
                .placed
                .param_ids
                .iter()
                .map(|&id| grads.take(id))
                .collect();
            adam.step(model.params_mut(), &gvec)?;
        }
        let train_loss = loss_sum / n as f64;
        let val_metric = match &data {
            DataRef::Reg { val, .. } => val_mse(&model, val)?,
            DataRef::Cls { val, .. } => val_ua(&model, val)?,
        };
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        let improved = match (&best, selection) {
            (None, _) => true,
            (Some((b, _, _)), SelectionRule::MinValLoss) => val_metric < *b,
            (Some((b, _, _)), SelectionRule::MaxValUa) => val_metric > *b,
        };
        if improved {
            best = Some((val_metric, epoch, model.params().to_vec()));
        }
    }

    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, params)) = best {
        model.params_mut().clone_from_slice(&params);
    }

    let (regression, classification) = match &data {
        DataRef::Reg { train, test, .. } => {
            let (vs_noisy, vs_clean) = evaluate_regression(&model, test)?;
            let train_mean = train.y.iter().sum::<f64>() / train.len() as f64;
            let (b_noisy, b_clean) = mean_predictor_rmse(train_mean, test)?;
            (
                Some(RegressionTestReport {
                    rmse_vs_noisy: vs_noisy,
                    rmse_vs_clean: vs_clean,
                    baseline_rmse_vs_noisy: b_noisy,
                    baseline_rmse_vs_clean: b_clean,
                }),
                None,
            )
        }
        DataRef::Cls { test, .. } => {
            let (wa, ua, confusion) = evaluate_classification(&model, test)?;
            (None, Some(ClassificationTestReport { wa, ua, confusion }))
        }
    };

    let report = TrainReport {
        seed: cfg.seed,
        selection,
        epochs: records,
        best_epoch,
        regression,
        classification,
        wall_clock_secs: 0.0,
    };
    Ok((model, report))
}
