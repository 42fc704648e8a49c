//! Scratch hyperparameter sweep for the simulation study. Not part of
//! the shipped surface; run with --example sweep.

use std::time::Instant;

use dfmim_core::model::DfmimConfig;
use dfmim_core::rng::derive_seed;
use dfmim_core::sim::{make_scenario_dataset, Scenario};
use dfmim_core::train::{evaluate_regression, mean_predictor_rmse, train_regression, RegressionSet};

fn run(tag: &str, scenario: Scenario, cfg: &DfmimConfig) {
    let train = RegressionSet::from_sim(&make_scenario_dataset(scenario, 2000, derive_seed(7, 1)).unwrap());
    let val = RegressionSet::from_sim(&make_scenario_dataset(scenario, 500, derive_seed(7, 2)).unwrap());
    let test = RegressionSet::from_sim(&make_scenario_dataset(scenario, 500, derive_seed(7, 3)).unwrap());
    let t0 = Instant::now();
    let (model, report) = train_regression(cfg, &train, &val, &test).unwrap();
    let (_, clean) = evaluate_regression(&model, &test).unwrap();
    let train_mean = train.y.iter().sum::<f64>() / train.y.len() as f64;
    let (_, base_clean) = mean_predictor_rmse(train_mean, &test).unwrap();
    let rmse = clean.unwrap();
    let base = base_clean.unwrap();
    println!(
        "{tag} {:?}: rmse_clean={:.4} baseline={:.4} reduction={:.4} best_epoch={:?} secs={:.1}",
        scenario,
        rmse,
        base,
        1.0 - rmse / base,
        report.best_epoch,
        t0.elapsed().as_secs_f64()
    );
    let n = report.epochs.len();
    for rec in report.epochs.iter().step_by((n / 8).max(1)) {
        println!(
            "  epoch {:3}  train_loss={:.5} val={:.5}",
            rec.epoch, rec.train_loss, rec.val_metric
        );
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = DfmimConfig::sim_default();
    cfg.seed = 7;
    let mut scenario = Scenario::S1;
    let mut tag = String::from("run");
    let mut i = 0;
    while i < args.len() {
        let k = args[i].as_str();
        let v = args.get(i + 1).cloned().unwrap_or_default();
        match k {
            "--scenario" => scenario = v.parse().unwrap(),
            "--epochs" => cfg.epochs = v.parse().unwrap(),
            "--lr" => cfg.lr = v.parse().unwrap(),
            "--dropout" => cfg.dropout = v.parse().unwrap(),
            "--n-enc" => cfg.n_enc = v.parse().unwrap(),
            "--k" => cfg.k = v.parse().unwrap(),
            "--ff" => cfg.ff_dim = v.parse().unwrap(),
            "--batch" => cfg.batch_size = v.parse().unwrap(),
            "--head" => {
                cfg.head_hidden = v.split(',').map(|w| w.parse().unwrap()).collect();
            }
            "--basis" => {
                cfg.basis_hidden = v.split(',').map(|w| w.parse().unwrap()).collect();
            }
            "--tag" => tag = v.clone(),
            other => panic!("unknown flag {other}"),
        }
        i += 2;
    }
    run(&tag, scenario, &cfg);
}
