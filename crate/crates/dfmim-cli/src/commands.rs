//! Subcommand implementations, shared by `main` and the integration
//! tests. Each command validates its inputs, does the work through
//! `dfmim-core`, prints a report to stdout, and writes byte-stable
//! artifacts under `--out`. Wall-clock times go to the console only, so
//! artifacts from equal seeds compare equal.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use dfmim_core::check::{grad_check, gradcheck_suite};
use dfmim_core::dsp::{chunk_mfcc, dct2_ortho, dct3_ortho, extract_chunks};
use dfmim_core::metrics::Confusion;
use dfmim_core::model::Task;
use dfmim_core::rng::derive_seed;
use dfmim_core::sim::{
    covariance_matrix, make_scenario_dataset, GpSpec, Scenario, SimDataset,
};
use dfmim_core::train::{
    evaluate_classification, evaluate_regression, train_classification, train_regression,
    ClassificationSet, RegressionSet, TrainReport,
};
use dfmim_core::{DfmimConfig, DfmimModel, Grid, Tensor};
use serde::Serialize;

use crate::audio::load_wav;
use crate::checkpoint::{load_model, save_model};
use crate::config::AppConfig;
use crate::dataset::{load_dataset, save_dataset};
use crate::features::{save_record, ChunkRecord, FeatureIndex, IndexEntry};
use crate::manifest::{FoldPlan, Manifest};
use crate::report::{float, Report};

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

/// Failure class decides the process exit code: bad invocations exit 2,
/// failures during the work exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl Globals {
    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    fn load_config(&self) -> anyhow::Result<AppConfig> {
        let cfg = AppConfig::load(self.config.as_deref(), self.seed)?;
        Ok(cfg)
    }

    fn require_out(&self, command: &str) -> Result<PathBuf, CliError> {
        self.out
            .clone()
            .ok_or_else(|| CliError::Usage(format!("{command} requires --out")))
    }

    fn echo_config(&self, cfg: &AppConfig) {
        if !self.quiet {
            print!("{}", cfg.echo());
        }
    }
}

fn parse_scenario(s: &str) -> Result<Scenario, CliError> {
    Scenario::from_str(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Benchmark RMSEs for the three scenarios, printed next to results for
/// orientation; they are not a pass/fail gate.
pub fn reference_rmse(scenario: Scenario) -> f64 {
    match scenario {
        Scenario::S1 => 0.085,
        Scenario::S2 => 0.074,
        Scenario::S3 => 0.031,
    }
}

// ---------------------------------------------------------------- simulate

pub fn simulate(g: &Globals, scenario: &str, n: usize) -> Result<(), CliError> {
    let scenario = parse_scenario(scenario)?;
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let out = g.require_out("simulate")?;
    let cfg = g.load_config()?;
    let data = make_scenario_dataset(scenario, n, cfg.seed)
        .map_err(|e| anyhow!(e).context("generating dataset"))?;
    save_dataset(&data, &out).map_err(anyhow::Error::from)?;
    g.say(&format!(
        "scenario={} n={} seed={} grid=30 channels=4 out={}",
        scenario.name(),
        n,
        cfg.seed,
        out.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------- train-sim

/// Split seeds are derived, not reused: the same base seed must not
/// hand train and test identical draws.
fn sim_splits(cfg: &AppConfig, scenario: Scenario) -> anyhow::Result<(SimDataset, SimDataset, SimDataset)> {
    let make = |n: usize, salt: u64| {
        make_scenario_dataset(scenario, n, derive_seed(cfg.seed, salt))
            .map_err(|e| anyhow!(e).context("generating dataset"))
    };
    Ok((
        make(cfg.sim_sizes.n_train, 1)?,
        make(cfg.sim_sizes.n_val, 2)?,
        make(cfg.sim_sizes.n_test, 3)?,
    ))
}

#[derive(Serialize)]
struct EpochJson {
    epoch: usize,
    train_loss: f64,
    val_metric: f64,
}

#[derive(Serialize)]
struct SimRunJson {
    command: &'static str,
    scenario: String,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    epochs_configured: usize,
    best_epoch: Option<usize>,
    selection: String,
    rmse_vs_noisy: f64,
    rmse_vs_clean: Option<f64>,
    baseline_rmse_vs_noisy: f64,
    baseline_rmse_vs_clean: Option<f64>,
    reduction_vs_noisy: f64,
    reduction_vs_clean: Option<f64>,
    reference_rmse: f64,
    epochs: Vec<EpochJson>,
}

fn epochs_json(report: &TrainReport) -> Vec<EpochJson> {
    report
        .epochs
        .iter()
        .map(|e| EpochJson {
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_metric: e.val_metric,
        })
        .collect()
}

/// Builds the report for a finished simulation run. Shared with
/// `eval-sim` tests through the JSON block shape.
fn sim_report(cfg: &AppConfig, scenario: Scenario, report: &TrainReport) -> Report {
    let reg = report
        .regression
        .as_ref()
        .expect("regression training fills the regression report");
    let reduction_vs_noisy = 1.0 - reg.rmse_vs_noisy / reg.baseline_rmse_vs_noisy;
    let reduction_vs_clean = match (reg.rmse_vs_clean, reg.baseline_rmse_vs_clean) {
        (Some(m), Some(b)) => Some(1.0 - m / b),
        _ => None,
    };
    let mut r = Report::new();
    r.kv("command", "train-sim")
        .kv("scenario", scenario.name())
        .kv("seed", cfg.seed)
        .kv("n_train", cfg.sim_sizes.n_train)
        .kv("n_val", cfg.sim_sizes.n_val)
        .kv("n_test", cfg.sim_sizes.n_test)
        .kv("epochs_configured", cfg.sim.epochs)
        .kv(
            "best_epoch",
            report
                .best_epoch
                .map(|e| e.to_string())
                .unwrap_or_else(|| "none".into()),
        )
        .kv("selection", report.selection.as_str())
        .kv_f64("rmse_vs_noisy", reg.rmse_vs_noisy)
        .kv(
            "rmse_vs_clean",
            reg.rmse_vs_clean.map(float).unwrap_or_else(|| "none".into()),
        )
        .kv_f64("baseline_rmse_vs_noisy", reg.baseline_rmse_vs_noisy)
        .kv(
            "baseline_rmse_vs_clean",
            reg.baseline_rmse_vs_clean
                .map(float)
                .unwrap_or_else(|| "none".into()),
        )
        .kv_f64("reduction_vs_noisy", reduction_vs_noisy)
        .kv(
            "reduction_vs_clean",
            reduction_vs_clean.map(float).unwrap_or_else(|| "none".into()),
        )
        .kv_f64("reference_rmse", reference_rmse(scenario));
    r.json(&SimRunJson {
        command: "train-sim",
        scenario: scenario.name().to_string(),
        seed: cfg.seed,
        n_train: cfg.sim_sizes.n_train,
        n_val: cfg.sim_sizes.n_val,
        n_test: cfg.sim_sizes.n_test,
        epochs_configured: cfg.sim.epochs,
        best_epoch: report.best_epoch,
        selection: report.selection.as_str().to_string(),
        rmse_vs_noisy: reg.rmse_vs_noisy,
        rmse_vs_clean: reg.rmse_vs_clean,
        baseline_rmse_vs_noisy: reg.baseline_rmse_vs_noisy,
        baseline_rmse_vs_clean: reg.baseline_rmse_vs_clean,
        reduction_vs_noisy,
        reduction_vs_clean,
        reference_rmse: reference_rmse(scenario),
        epochs: epochs_json(report),
    });
    r
}

pub fn train_sim(g: &Globals, scenario: &str) -> Result<(), CliError> {
    let scenario = parse_scenario(scenario)?;
    let out = g.require_out("train-sim")?;
    let cfg = g.load_config()?;
    g.echo_config(&cfg);
    ensure_dir(&out)?;

    let started = Instant::now();
    let (train, val, test) = sim_splits(&cfg, scenario)?;
    let train_set = RegressionSet::from_sim(&train);
    let val_set = RegressionSet::from_sim(&val);
    let test_set = RegressionSet::from_sim(&test);
    let (model, train_report) = train_regression(&cfg.sim, &train_set, &val_set, &test_set)
        .map_err(|e| anyhow!(e).context("training"))?;

    let report = sim_report(&cfg, scenario, &train_report);
    let ckpt_path = out.join(format!("sim-{}.dfmx", scenario.name()));
    save_model(&model, &ckpt_path).map_err(anyhow::Error::from)?;
    let report_path = out.join(format!("sim-{}-report.txt", scenario.name()));
    report.write(&report_path).with_context(|| format!("writing {}", report_path.display()))?;

    g.say(&report.render());
    g.say(&format!(
        "wall_clock_secs={:.1} checkpoint={} report={}",
        started.elapsed().as_secs_f64(),
        ckpt_path.display(),
        report_path.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------- eval-sim

#[derive(Serialize)]
struct EvalSimJson {
    command: &'static str,
    scenario: String,
    n: usize,
    rmse_vs_noisy: f64,
    rmse_vs_clean: Option<f64>,
}

pub fn eval_sim(g: &Globals, checkpoint: &Path, data: &Path) -> Result<(), CliError> {
    let model = load_model(checkpoint).map_err(anyhow::Error::from)?;
    if model.config().task != Task::Regression {
        return Err(CliError::Runtime(anyhow!(
            "checkpoint {} holds a classification model; eval-sim needs a regression model",
            checkpoint.display()
        )));
    }
    let dataset = load_dataset(data).map_err(anyhow::Error::from)?;
    let set = RegressionSet::from_sim(&dataset);
    let (vs_noisy, vs_clean) =
        evaluate_regression(&model, &set).map_err(|e| anyhow!(e).context("evaluating"))?;

    let mut report = Report::new();
    report
        .kv("command", "eval-sim")
        .kv("scenario", dataset.scenario.name())
        .kv("n", set.len())
        .kv_f64("rmse_vs_noisy", vs_noisy)
        .kv(
            "rmse_vs_clean",
            vs_clean.map(float).unwrap_or_else(|| "none".into()),
        );
    report.json(&EvalSimJson {
        command: "eval-sim",
        scenario: dataset.scenario.name().to_string(),
        n: set.len(),
        rmse_vs_noisy: vs_noisy,
        rmse_vs_clean: vs_clean,
    });
    if let Some(out) = &g.out {
        report.write(out).with_context(|| format!("writing {}", out.display()))?;
    }
    g.say(&report.render());
    Ok(())
}

// ---------------------------------------------------------------- extract

#[derive(Serialize)]
struct ExtractJson {
    command: &'static str,
    utterances: usize,
    chunks: usize,
    resampled: usize,
    chunk_len: usize,
    n_mfcc: usize,
}

pub fn extract(g: &Globals, manifest_path: &Path) -> Result<(), CliError> {
    let out = g.require_out("extract")?;
    let cfg = g.load_config()?;
    g.echo_config(&cfg);
    ensure_dir(&out)?;

    let manifest = Manifest::read(manifest_path).map_err(anyhow::Error::from)?;
    if manifest.is_empty() {
        return Err(CliError::Runtime(anyhow!("manifest lists no utterances")));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut entries = Vec::with_capacity(manifest.len());
    let mut total_chunks = 0usize;
    let mut resampled = 0usize;
    for (i, row) in manifest.rows().iter().enumerate() {
        let wav_path = if row.path.is_absolute() {
            row.path.clone()
        } else {
            base.join(&row.path)
        };
        let signal = load_wav(&wav_path).map_err(anyhow::Error::from)?;
        let features = extract_chunks(&signal, &cfg.features)
            .map_err(|e| anyhow!(e).context(format!("extracting {}", wav_path.display())))?;
        if features.resampled_from.is_some() {
            resampled += 1;
        }
        let record = ChunkRecord::new(features.chunks.chunks).map_err(anyhow::Error::from)?;
        let file = format!("utt{i:04}.dffc");
        save_record(&record, &out.join(&file)).map_err(anyhow::Error::from)?;
        total_chunks += record.chunks.len();
        entries.push(IndexEntry {
            file,
            speaker: row.speaker.clone(),
            session: row.session.clone(),
            label: row.label.clone(),
            n_chunks: record.chunks.len(),
            source: row.path.display().to_string(),
        });
    }
    let index = FeatureIndex { entries };
    index.write(&out).map_err(anyhow::Error::from)?;

    let mut report = Report::new();
    report
        .kv("command", "extract")
        .kv("utterances", manifest.len())
        .kv("chunks", total_chunks)
        .kv("resampled", resampled)
        .kv("chunk_len", cfg.features.chunk_len)
        .kv("n_mfcc", cfg.features.n_mfcc);
    report.json(&ExtractJson {
        command: "extract",
        utterances: manifest.len(),
        chunks: total_chunks,
        resampled,
        chunk_len: cfg.features.chunk_len,
        n_mfcc: cfg.features.n_mfcc,
    });
    report
        .write(&out.join("extract-report.txt"))
        .context("writing extract report")?;
    g.say(&report.render());
    Ok(())
}

// ---------------------------------------------------------------- train-ser

/// Feature records grouped with their resolved class indices.
struct SerData {
    entries: Vec<IndexEntry>,
    records: Vec<ChunkRecord>,
    classes: Vec<String>,
    class_of: Vec<usize>,
}

fn merged_label<'a>(cfg: &'a AppConfig, raw: &'a str) -> &'a str {
    cfg.label_map.get(raw).map(String::as_str).unwrap_or(raw)
}

fn load_ser_data(cfg: &AppConfig, features_dir: &Path) -> anyhow::Result<SerData> {
    let index = FeatureIndex::read(features_dir).map_err(anyhow::Error::from)?;
    if index.entries.is_empty() {
        bail!("feature index lists no utterances");
    }
    let records = index.load_records(features_dir).map_err(anyhow::Error::from)?;

    let classes: Vec<String> = match &cfg.classes {
        Some(c) => c.clone(),
        None => {
            let mut set: Vec<String> = index
                .entries
                .iter()
                .map(|e| merged_label(cfg, &e.label).to_string())
                .collect();
            set.sort();
            set.dedup();
            set
        }
    };
    if classes.len() < 2 {
        bail!("need at least 2 classes, got {:?}", classes);
    }
    let class_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let class_of = index
        .entries
        .iter()
        .map(|e| {
            let merged = merged_label(cfg, &e.label);
            class_index
                .get(merged)
                .copied()
                .ok_or_else(|| anyhow!("label {merged:?} is not in the class set {classes:?}"))
        })
        .collect::<anyhow::Result<Vec<usize>>>()?;

    for (entry, record) in index.entries.iter().zip(&records) {
        let want = [cfg.ser.n_grid, cfg.ser.p];
        let got = [record.chunk_len(), record.n_mfcc()];
        if got != want {
            bail!(
                "{}: chunks are {}x{}, the model expects {}x{}",
                entry.file,
                got[0],
                got[1],
                want[0],
                want[1]
            );
        }
    }

    Ok(SerData {
        entries: index.entries,
        records,
        classes,
        class_of,
    })
}

/// Chunks of every utterance whose speaker passes `keep`, labeled with
/// the utterance's class.
fn chunk_set(data: &SerData, keep: impl Fn(&str) -> bool) -> ClassificationSet {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for ((entry, record), &class) in data.entries.iter().zip(&data.records).zip(&data.class_of) {
        if keep(&entry.speaker) {
            for chunk in &record.chunks {
                xs.push(chunk.clone());
                labels.push(class);
            }
        }
    }
    ClassificationSet { xs, labels }
}

struct FoldOutcome {
    wa: f64,
    ua: f64,
    confusion: Confusion,
    best_epoch: Option<usize>,
    model: DfmimModel,
    test_chunks: usize,
}

fn run_fold(
    cfg: &DfmimConfig,
    data: &SerData,
    fold: &crate::manifest::Fold,
    seed: u64,
) -> anyhow::Result<FoldOutcome> {
    let train = chunk_set(data, |s| fold.train.iter().any(|t| t.as_str() == s));
    let val = chunk_set(data, |s| s == fold.val.as_str());
    let test = chunk_set(data, |s| s == fold.test.as_str());
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = seed;
    let (model, report) = train_classification(&fold_cfg, &train, &val, &test)
        .map_err(|e| anyhow!(e).context(format!("fold testing on {}", fold.test)))?;
    let cls = report
        .classification
        .expect("classification training fills the classification report");
    Ok(FoldOutcome {
        wa: cls.wa,
        ua: cls.ua,
        confusion: cls.confusion,
        best_epoch: report.best_epoch,
        model,
        test_chunks: test.len(),
    })
}

#[derive(Serialize)]
struct FoldJson {
    fold: usize,
    test: String,
    val: String,
    test_chunks: usize,
    wa: f64,
    ua: f64,
    best_epoch: Option<usize>,
}

#[derive(Serialize)]
struct SerRunJson {
    command: &'static str,
    seed: u64,
    classes: Vec<String>,
    folds: Vec<FoldJson>,
    mean_wa: f64,
    mean_ua: f64,
    confusion: Vec<Vec<usize>>,
}

pub fn train_ser(
    g: &Globals,
    features_dir: &Path,
    max_folds: usize,
    save_models: bool,
) -> Result<(), CliError> {
    let out = g.require_out("train-ser")?;
    let cfg = g.load_config()?;
    g.echo_config(&cfg);
    ensure_dir(&out)?;

    let started = Instant::now();
    let data = load_ser_data(&cfg, features_dir)?;
    let speakers: std::collections::BTreeSet<String> =
        data.entries.iter().map(|e| e.speaker.clone()).collect();
    let plan = FoldPlan::build(&speakers).map_err(anyhow::Error::from)?;
    let folds: Vec<_> = match max_folds {
        0 => plan.folds().to_vec(),
        n => plan.folds().iter().take(n).cloned().collect(),
    };

    let mut ser_cfg = cfg.ser.clone();
    ser_cfg.c = data.classes.len();

    // One thread per fold within a wave; fold seeds depend only on the
    // fold index, so scheduling cannot change results.
    let wave_width = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .max(1);
    let mut outcomes: Vec<Option<anyhow::Result<FoldOutcome>>> =
        (0..folds.len()).map(|_| None).collect();
    let indexed: Vec<(usize, &crate::manifest::Fold)> = folds.iter().enumerate().collect();
    for wave in indexed.chunks(wave_width) {
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&(i, fold)| {
                    let ser_cfg = &ser_cfg;
                    let data = &data;
                    let seed = derive_seed(cfg.seed, i as u64);
                    scope.spawn(move || (i, run_fold(ser_cfg, data, fold, seed)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect::<Vec<_>>()
        });
        for (i, result) in results {
            outcomes[i] = Some(result);
        }
    }
    let outcomes: Vec<FoldOutcome> = outcomes
        .into_iter()
        .map(|o| o.expect("every fold was scheduled"))
        .collect::<Result<_, _>>()?;

    // Means are the plain sum in fold order over the printed values, so
    // re-deriving them from the report reproduces the same doubles.
    let mean_wa = outcomes.iter().map(|o| o.wa).sum::<f64>() / outcomes.len() as f64;
    let mean_ua = outcomes.iter().map(|o| o.ua).sum::<f64>() / outcomes.len() as f64;
    let n_classes = data.classes.len();
    let mut counts = vec![vec![0usize; n_classes]; n_classes];
    for o in &outcomes {
        for (i, row) in o.confusion.counts().iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                counts[i][j] += count;
            }
        }
    }
    let total = Confusion::from_counts(counts).map_err(anyhow::Error::from)?;

    let mut report = Report::new();
    report
        .kv("command", "train-ser")
        .kv("seed", cfg.seed)
        .kv("classes", data.classes.join(","))
        .kv("folds", outcomes.len());
    let mut folds_json = Vec::new();
    for (i, (fold, o)) in folds.iter().zip(&outcomes).enumerate() {
        report
            .kv(&format!("fold{i}.test"), &fold.test)
            .kv(&format!("fold{i}.val"), &fold.val)
            .kv(&format!("fold{i}.test_chunks"), o.test_chunks)
            .kv_f64(&format!("fold{i}.wa"), o.wa)
            .kv_f64(&format!("fold{i}.ua"), o.ua);
        folds_json.push(FoldJson {
            fold: i,
            test: fold.test.clone(),
            val: fold.val.clone(),
            test_chunks: o.test_chunks,
            wa: o.wa,
            ua: o.ua,
            best_epoch: o.best_epoch,
        });
    }
    report.kv_f64("mean_wa", mean_wa).kv_f64("mean_ua", mean_ua);
    report.confusion(&data.classes, &total);
    report.json(&SerRunJson {
        command: "train-ser",
        seed: cfg.seed,
        classes: data.classes.clone(),
        folds: folds_json,
        mean_wa,
        mean_ua,
        confusion: total.counts().to_vec(),
    });
    report
        .write(&out.join("ser-report.txt"))
        .context("writing ser report")?;
    if save_models {
        for (i, o) in outcomes.iter().enumerate() {
            save_model(&o.model, &out.join(format!("fold{i}.dfmx"))).map_err(anyhow::Error::from)?;
        }
    }
    g.say(&report.render());
    g.say(&format!("wall_clock_secs={:.1}", started.elapsed().as_secs_f64()));
    Ok(())
}

// ---------------------------------------------------------------- eval-ser

#[derive(Serialize)]
struct EvalSerJson {
    command: &'static str,
    chunks: usize,
    classes: Vec<String>,
    wa: f64,
    ua: f64,
    confusion: Vec<Vec<usize>>,
}

pub fn eval_ser(
    g: &Globals,
    checkpoint: &Path,
    features_dir: &Path,
    speaker: Option<&str>,
) -> Result<(), CliError> {
    let cfg = g.load_config()?;
    let model = load_model(checkpoint).map_err(anyhow::Error::from)?;
    if model.config().task != Task::Classification {
        return Err(CliError::Runtime(anyhow!(
            "checkpoint {} holds a regression model; eval-ser needs a classifier",
            checkpoint.display()
        )));
    }
    let data = load_ser_data(&cfg, features_dir)?;
    if data.classes.len() != model.config().c {
        return Err(CliError::Runtime(anyhow!(
            "feature set resolves to {} classes {:?} but the model has {} outputs",
            data.classes.len(),
            data.classes,
            model.config().c
        )));
    }
    let set = chunk_set(&data, |s| speaker.is_none_or(|want| s == want));
    if set.xs.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "no chunks selected{}",
            speaker.map(|s| format!(" for speaker {s}")).unwrap_or_default()
        )));
    }
    let (wa, ua, confusion) =
        evaluate_classification(&model, &set).map_err(|e| anyhow!(e).context("evaluating"))?;

    let mut report = Report::new();
    report
        .kv("command", "eval-ser")
        .kv("chunks", set.len())
        .kv("classes", data.classes.join(","));
    if let Some(s) = speaker {
        report.kv("speaker", s);
    }
    report.kv_f64("wa", wa).kv_f64("ua", ua);
    report.confusion(&data.classes, &confusion);
    report.json(&EvalSerJson {
        command: "eval-ser",
        chunks: set.len(),
        classes: data.classes.clone(),
        wa,
        ua,
        confusion: confusion.counts().to_vec(),
    });
    if let Some(out) = &g.out {
        report.write(out).with_context(|| format!("writing {}", out.display()))?;
    }
    g.say(&report.render());
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

pub fn gradcheck(g: &Globals) -> Result<(), CliError> {
    let results = gradcheck_suite();
    let mut failures = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        g.say(&format!(
            "gradcheck {}: max_rel_err={:.3e} tol={:.0e} {}",
            r.name, r.max_rel_err, r.tol, verdict
        ));
        if !r.passed() {
            failures.push(r.name);
        }
    }
    g.say(&format!(
        "gradcheck: {}/{} cases passed",
        results.len() - failures.len(),
        results.len()
    ));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!(
            "gradient checks failed: {}",
            failures.join(", ")
        )))
    }
}

// ---------------------------------------------------------------- selftest

fn within(got: f64, want: f64, tol: f64) -> Result<(), String> {
    let scale = 1.0f64.max(want.abs());
    if (got - want).abs() <= tol * scale {
        Ok(())
    } else {
        Err(format!("got {got}, want {want} (tol {tol} x {scale})"))
    }
}

fn check_quadrature() -> Result<(), String> {
    let grid = Grid::new(30).map_err(|e| e.to_string())?;
    let betas: Vec<_> = (1..=4)
        .map(|j| dfmim_core::fda::beta_curve(j, &grid).expect("valid index"))
        .collect();
    let diag = [12.5, 12.5, 4.5, 4.5];
    for (j, want) in diag.iter().enumerate() {
        let got = betas[j].inner_product(&betas[j]).map_err(|e| e.to_string())?;
        within(got, *want, 1e-2)?;
    }
    let got14 = betas[0].inner_product(&betas[3]).map_err(|e| e.to_string())?;
    within(got14, -12.0 / core::f64::consts::PI, 1e-2)?;
    let got12 = betas[0].inner_product(&betas[1]).map_err(|e| e.to_string())?;
    within(got12, 0.0, 1e-2)
}

fn check_gp_determinism() -> Result<(), String> {
    let a = make_scenario_dataset(Scenario::S1, 3, 5).map_err(|e| e.to_string())?;
    let b = make_scenario_dataset(Scenario::S1, 3, 5).map_err(|e| e.to_string())?;
    if a.y != b.y {
        return Err("same seed produced different responses".into());
    }
    Ok(())
}

fn check_fbm_half_is_brownian() -> Result<(), String> {
    let grid = Grid::new(20).map_err(|e| e.to_string())?;
    let fbm = covariance_matrix(&GpSpec::Fbm { hurst: 0.5 }, &grid).map_err(|e| e.to_string())?;
    let bm = covariance_matrix(&GpSpec::Brownian, &grid).map_err(|e| e.to_string())?;
    let worst = fbm
        .data()
        .iter()
        .zip(bm.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-12 {
        return Err(format!("fBm(1/2) and Brownian covariances differ by {worst}"));
    }
    Ok(())
}

fn check_chunk_counts() -> Result<(), String> {
    for t_f in [1usize, 7, 8, 13, 14, 63, 64, 200] {
        let m = Tensor::zeros(vec![t_f, 4]);
        let set = chunk_mfcc(&m, 8, 0.25).map_err(|e| e.to_string())?;
        let want = if t_f < 8 { 1 } else { (t_f - 8) / 6 + 1 };
        if set.chunks.len() != want {
            return Err(format!("{t_f} frames gave {} chunks, want {want}", set.chunks.len()));
        }
    }
    Ok(())
}

fn check_metrics_oracle() -> Result<(), String> {
    let c = Confusion::from_counts(vec![vec![9, 1], vec![50, 50]]).map_err(|e| e.to_string())?;
    let wa = c.wa().map_err(|e| e.to_string())?;
    let ua = c.ua().map_err(|e| e.to_string())?;
    within(wa, 59.0 / 110.0, 1e-12)?;
    within(ua, 0.7, 1e-12)
}

fn check_checkpoint_round_trip() -> Result<(), String> {
    let cfg = DfmimConfig {
        p: 2,
        k: 2,
        c: 2,
        n_grid: 6,
        n_enc: 1,
        heads: 1,
        ff_dim: 3,
        basis_hidden: vec![3],
        head_hidden: vec![3],
        seed: 9,
        ..DfmimConfig::ser_default()
    };
    let model = DfmimModel::init(cfg).map_err(|e| e.to_string())?;
    let arrays: Vec<(String, Tensor)> = model
        .param_names()
        .iter()
        .cloned()
        .zip(model.params().iter().cloned())
        .collect();
    let (mean, std) = model.norm_stats();
    let bytes = crate::checkpoint::encode(model.config(), mean, std, 0.0, 1.0, &arrays);
    let loaded = crate::checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    if loaded.params() != model.params() {
        return Err("parameters changed across a checkpoint round trip".into());
    }
    Ok(())
}

fn check_dct_round_trip() -> Result<(), String> {
    let x: Vec<f64> = (0..16).map(|i| ((i * i) as f64 * 0.37).sin()).collect();
    let back = dct3_ortho(&dct2_ortho(&x));
    let worst = x
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-8 {
        return Err(format!("DCT round trip error {worst}"));
    }
    Ok(())
}

fn check_grad_quadratic() -> Result<(), String> {
    let x = Tensor::from_fn(3, 2, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
    let err = grad_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    if err > 1e-7 {
        return Err(format!("quadratic gradient error {err}"));
    }
    Ok(())
}

type Check = fn() -> Result<(), String>;

pub fn selftest(g: &Globals) -> Result<(), CliError> {
    let checks: Vec<(&str, Check)> = vec![
        ("quadrature", check_quadrature),
        ("gp_determinism", check_gp_determinism),
        ("fbm_half_is_brownian", check_fbm_half_is_brownian),
        ("chunk_counts", check_chunk_counts),
        ("metrics_oracle", check_metrics_oracle),
        ("checkpoint_round_trip", check_checkpoint_round_trip),
        ("dct_round_trip", check_dct_round_trip),
        ("grad_quadratic", check_grad_quadratic),
    ];
    let mut failures = Vec::new();
    for (name, check) in &checks {
        match check() {
            Ok(()) => g.say(&format!("selftest {name}: PASS")),
            Err(msg) => {
                g.say(&format!("selftest {name}: FAIL ({msg})"));
                failures.push(*name);
            }
        }
    }
    g.say(&format!(
        "selftest: {}/{} checks passed",
        checks.len() - failures.len(),
        checks.len()
    ));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!(
            "selftest failed: {}",
            failures.join(", ")
        )))
    }
}
