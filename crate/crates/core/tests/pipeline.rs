//! End-to-end library flow: CSV in, trained network out, archive back in.

use std::fmt::Write as _;

use odefuse::features::{assemble_eia, EIA_FEATURE_COUNT};
use odefuse::graph::adjacency_from_columns;
use odefuse::ingest::{chrono_split, fill_missing, iqr_filter, load_csv, resample_monthly, CsvOptions, ScalerState};
use odefuse::metrics::{EvalReport, IntervalModel};
use odefuse::model::{load_params, predict_many, read_params, save_params, write_params, ModelConfig};
use odefuse::select::{select_features, SelectConfig};
use odefuse::train::{fit, TrainConfig};

fn monthly_csv(n: usize) -> String {
    let mut s = String::from("date,value\n");
    for t in 0..n {
        let (year, month) = (1990 + t / 12, t % 12 + 1);
        let y = 5.0 + 0.01 * t as f64 + (std::f64::consts::TAU * t as f64 / 12.0).sin();
        let _ = writeln!(s, "{year}-{month:02}-01,{y:.6}");
    }
    // a gross outlier and a blank value the cleaning stages must absorb
    s.push_str(&format!("{}-{:02}-01,900\n", 1990 + n / 12, n % 12 + 1));
    s.push_str(&format!("{}-{:02}-01,\n", 1990 + (n + 1) / 12, (n + 1) % 12 + 1));
    s
}

#[test]
fn csv_to_archived_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    std::fs::write(&path, monthly_csv(180)).unwrap();

    let table = load_csv(&path, &CsvOptions::new("date", "value")).unwrap();
    let table = iqr_filter(&table, "value", 1.5).unwrap();
    assert!(table.target().unwrap().iter().all(|v| v.is_nan() || *v < 100.0));
    let table = fill_missing(&resample_monthly(&table).unwrap()).unwrap();
    let x = assemble_eia(&table).unwrap();
    assert_eq!(x.n_features(), EIA_FEATURE_COUNT);

    let (train, test) = chrono_split(&x, 0.8).unwrap();
    assert!(train.timestamps().last() < test.timestamps().first());
    let scaler = ScalerState::fit(&train).unwrap();
    let (train, test) = (scaler.transform(&train).unwrap(), scaler.transform(&test).unwrap());

    let selection = select_features(&train, &SelectConfig::default()).unwrap();
    assert_eq!(selection.selected.len(), 8);
    let (train, test) = (train.select(&selection.selected).unwrap(), test.select(&selection.selected).unwrap());

    let adj = adjacency_from_columns(&train.columns(), 0.3).unwrap();
    let model = ModelConfig {
        hidden_dim: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 40,
        learning_rate: 3e-3,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let (params, history) = fit(&train, &adj, &model, &cfg).unwrap();
    assert!(history.best_val_loss.unwrap() < history.epochs[0].val_loss);

    let yhat = predict_many(&params, &adj, test.rows()).unwrap();
    let report = EvalReport::compute(test.targets(), &yhat, &IntervalModel::from_sigma(0.1).unwrap()).unwrap();
    assert!(report.r2.unwrap() > 0.5, "R² {:?}", report.r2);

    let bytes = write_params(&params).unwrap();
    assert_eq!(read_params(&bytes).unwrap(), params);
    let file = dir.path().join("params.odefp");
    save_params(&params, &file).unwrap();
    let back = load_params(&file).unwrap();
    assert_eq!(write_params(&back).unwrap(), bytes);
    assert_eq!(predict_many(&back, &adj, test.rows()).unwrap(), yhat);
}
