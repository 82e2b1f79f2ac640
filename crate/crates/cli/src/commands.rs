//! The pipeline verbs. Each reads its inputs from the run folder, writes
//! its outputs there, and returns what it wrote for in-process callers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use odefuse::explain::{background_sample, global_summary, network_model, Attribution, Explainer, MAX_EXACT_FEATURES};
use odefuse::features::{assemble_eia, assemble_ett, build_windowed, FeatureMatrix, Profile};
use odefuse::graph::{adjacency_from_columns, Adjacency};
use odefuse::ingest::{
    chrono_split, fill_missing, iqr_filter, load_csv, resample_monthly, CsvOptions, FrequencyHint, ScalerState,
};
use odefuse::metrics::{EvalReport, IntervalModel};
use odefuse::model::{load_params, predict, save_params, Ablation, ModelConfig, NetworkParams};
use odefuse::select::{select_features, SelectionResult};
use odefuse::train::{carve_validation, fit, hyperopt, HyperoptResult, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, fingerprint, fingerprint_bytes, read_json, write_file, write_json, Layout};
use crate::config::PipelineConfig;
use crate::error::CliError;

pub const RUN_FORMAT: &str = "odefuse-run";

/// Effective configuration plus the run folder.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: PipelineConfig,
    pub layout: Layout,
}

impl Context {
    /// Applies command-line overrides of the seed and output folder.
    pub fn new(mut config: PipelineConfig, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        if let Some(out) = out {
            config.out_dir = out;
        }
        if let Some(seed) = seed {
            config.set_seed(seed);
        }
        let layout = Layout::new(config.out_dir.clone());
        Self { config, layout }
    }
}

fn write_timing(layout: &Layout, command: &str, fields: &[(&str, f64)]) -> Result<(), CliError> {
    let map: serde_json::Map<String, serde_json::Value> = fields
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::json!(round2(*v))))
        .collect();
    write_json(&layout.timing(command), &map)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub profile: Profile,
    pub seed: u64,
    pub source_rows: usize,
    pub cleaned_rows: usize,
    pub feature_count: usize,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Cleans the input series, engineers the profile's features, splits
/// chronologically and standardizes with training statistics.
pub fn prepare(ctx: &Context) -> Result<PrepareSummary, CliError> {
    let cfg = &ctx.config;
    let d = &cfg.data;
    let mut opts = CsvOptions::new(&d.timestamp_column, &d.target_column);
    opts.columns = Some(match d.profile {
        Profile::Ett => d.covariates(),
        _ => Vec::new(),
    });
    if d.profile == Profile::Eia {
        opts.frequency = FrequencyHint::Monthly;
    }
    let raw = load_csv(&d.path, &opts).map_err(|e| CliError::validation(format!("{}: {e}", d.path.display())))?;
    let source_rows = raw.len();
    let mut table = match d.iqr_k {
        Some(k) => iqr_filter(&raw, &d.target_column, k)?,
        None => raw,
    };
    if d.profile == Profile::Eia {
        table = resample_monthly(&table)?;
    }
    let table = fill_missing(&table)?;
    let matrix = match d.profile {
        Profile::Eia => assemble_eia(&table)?,
        Profile::Ett => {
            let cov = d.covariates();
            let cov: Vec<&str> = cov.iter().map(String::as_str).collect();
            assemble_ett(&table, &cov)?
        }
        Profile::Windowed => {
            let spec = cfg.window.ok_or_else(|| CliError::validation("windowed profile needs [window]"))?;
            build_windowed(table.target()?, table.timestamps(), spec)?
        }
    };
    let (train, test) = chrono_split(&matrix, d.train_fraction)?;
    let scaler = ScalerState::fit(&train)?;
    let (train, test) = (scaler.transform(&train)?, scaler.transform(&test)?);

    let l = &ctx.layout;
    artifacts::write_matrix(&l.train_matrix(), &train)?;
    artifacts::write_matrix(&l.test_matrix(), &test)?;
    write_file(&l.feature_manifest(), train.manifest())?;
    write_json(&l.scaler(), &scaler)?;
    let summary = PrepareSummary {
        profile: d.profile,
        seed: cfg.seed,
        source_rows,
        cleaned_rows: table.len(),
        feature_count: train.n_features(),
        train_rows: train.n_rows(),
        test_rows: test.n_rows(),
    };
    write_json(&l.prepare_summary(), &summary)?;
    info!(
        "prepared {} features: {} train rows, {} test rows",
        summary.feature_count, summary.train_rows, summary.test_rows
    );
    Ok(summary)
}

fn prepared(ctx: &Context) -> Result<PrepareSummary, CliError> {
    let l = &ctx.layout;
    l.require(&l.prepare_summary(), "prepare")?;
    read_json(&l.prepare_summary())
}

/// Ranks (when there are more than `top_k` features) and recursively
/// eliminates down to `target_size` features on the training split.
pub fn select(ctx: &Context) -> Result<SelectionResult, CliError> {
    let summary = prepared(ctx)?;
    let l = &ctx.layout;
    let train = artifacts::read_matrix(&l.train_matrix(), summary.profile)?;
    let result = select_features(&train, &ctx.config.selection)?;
    result.write(&l.selection())?;
    info!("selected {:?}", result.selected);
    Ok(result)
}

/// Standardized train/test matrices restricted to the modelled features.
#[derive(Clone, Debug)]
pub struct ModelData {
    pub profile: Profile,
    pub all_features: Vec<String>,
    pub selected: Vec<String>,
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub scaler: ScalerState,
}

/// Uses the selection when present; the windowed profile may skip it and
/// model every lag.
pub fn model_data(ctx: &Context) -> Result<ModelData, CliError> {
    let summary = prepared(ctx)?;
    let l = &ctx.layout;
    let train = artifacts::read_matrix(&l.train_matrix(), summary.profile)?;
    let test = artifacts::read_matrix(&l.test_matrix(), summary.profile)?;
    let scaler: ScalerState = read_json(&l.scaler())?;
    let selected = if l.selection().is_file() {
        SelectionResult::read(&l.selection())?.selected
    } else if summary.profile == Profile::Windowed {
        train.names().to_vec()
    } else {
        return Err(CliError::validation(format!(
            "{} is missing; run `select` first",
            l.selection().display()
        )));
    };
    Ok(ModelData {
        profile: summary.profile,
        all_features: train.names().to_vec(),
        train: train.select(&selected)?,
        test: test.select(&selected)?,
        scaler: scaler.select(&selected)?,
        selected,
    })
}

/// Correlation graph over the training columns.
pub fn training_adjacency(data: &ModelData, tau: f64) -> Result<Adjacency, CliError> {
    Ok(adjacency_from_columns(&data.train.columns(), tau)?)
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub params: NetworkParams,
    pub history: TrainHistory,
    pub adjacency: Adjacency,
    pub train_seconds: f64,
}

pub fn fit_model(data: &ModelData, model: &ModelConfig, train: &TrainConfig) -> Result<Fitted, CliError> {
    let adjacency = training_adjacency(data, model.tau)?;
    let start = Instant::now();
    let (params, history) = fit(&data.train, &adjacency, model, train)?;
    Ok(Fitted {
        params,
        history,
        adjacency,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Test-split predictions in original units with their 95% bands.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub interval: IntervalModel,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub test_seconds: f64,
}

pub fn evaluate_model(
    data: &ModelData,
    params: &NetworkParams,
    adj: &Adjacency,
    train: &TrainConfig,
) -> Result<Evaluation, CliError> {
    let s = &data.scaler;
    let original = |m: &FeatureMatrix| -> Result<(Vec<f64>, Vec<f64>), CliError> {
        let yhat = m
            .rows()
            .map(|r| predict(params, adj, r).map(|v| s.inverse_target(v)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((m.targets().iter().map(|&y| s.inverse_target(y)).collect(), yhat))
    };
    let (_, val) = carve_validation(&data.train, train.validation_fraction)?;
    let (y_val, yhat_val) = original(&val)?;
    let interval = IntervalModel::fit(&y_val, &yhat_val)?;
    let start = Instant::now();
    let (actual, predicted) = original(&data.test)?;
    let test_seconds = start.elapsed().as_secs_f64();
    let report = EvalReport::compute(&actual, &predicted, &interval)?;
    Ok(Evaluation {
        report,
        interval,
        actual,
        predicted,
        test_seconds,
    })
}

/// Everything a trained run produced, with paths relative to the run
/// folder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub seed: u64,
    pub profile: Profile,
    pub config: PipelineConfig,
    pub feature_manifest: Vec<String>,
    pub selected_features: Vec<String>,
    pub adjacency_fingerprint: String,
    pub adjacency_edges: usize,
    pub params_path: String,
    pub params_fingerprint: String,
    pub history_path: String,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub reports: Vec<String>,
}

impl RunManifest {
    fn read(layout: &Layout) -> Result<Self, CliError> {
        layout.require(&layout.run_manifest(), "train")?;
        read_json(&layout.run_manifest())
    }
}

fn relative(layout: &Layout, path: &Path) -> String {
    path.strip_prefix(&layout.root).unwrap_or(path).to_string_lossy().into_owned()
}

/// Builds the training graph, trains the configured network and persists
/// parameters, history and the run manifest.
pub fn train(ctx: &Context) -> Result<RunManifest, CliError> {
    let cfg = &ctx.config;
    let data = model_data(ctx)?;
    let fitted = fit_model(&data, &cfg.model, &cfg.train_config())?;
    let l = &ctx.layout;
    std::fs::create_dir_all(l.model()).map_err(|e| CliError::runtime(format!("cannot create model folder: {e}")))?;
    save_params(&fitted.params, &l.params())?;
    write_file(&l.history(), fitted.history.to_jsonl())?;
    write_file(&l.adjacency(), fitted.adjacency.to_report(&data.selected))?;
    let archive = std::fs::read(l.params()).map_err(|e| CliError::runtime(format!("cannot reread archive: {e}")))?;
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        seed: cfg.seed,
        profile: data.profile,
        config: cfg.clone(),
        feature_manifest: data.all_features.clone(),
        selected_features: data.selected.clone(),
        adjacency_fingerprint: fingerprint(fitted.adjacency.matrix().data()),
        adjacency_edges: fitted.adjacency.edge_count(),
        params_path: relative(l, &l.params()),
        params_fingerprint: fingerprint_bytes(&archive),
        history_path: relative(l, &l.history()),
        epochs_run: fitted.history.epochs.len(),
        best_epoch: fitted.history.best_epoch,
        best_val_loss: fitted.history.best_val_loss,
        reports: Vec::new(),
    };
    write_json(&l.run_manifest(), &manifest)?;
    write_timing(l, "train", &[("train_seconds", fitted.train_seconds)])?;
    info!(
        "trained {} epochs (best {:?}, val mse {:?})",
        manifest.epochs_run, manifest.best_epoch, manifest.best_val_loss
    );
    Ok(manifest)
}

/// Loads a trained run and checks it still matches the prepared data.
fn trained(ctx: &Context) -> Result<(RunManifest, ModelData, NetworkParams, Adjacency), CliError> {
    let l = &ctx.layout;
    let manifest = RunManifest::read(l)?;
    let data = model_data(ctx)?;
    if manifest.selected_features != data.selected || manifest.feature_manifest != data.all_features {
        return Err(CliError::validation(
            "run manifest features differ from the prepared data; retrain",
        ));
    }
    let params = load_params(&l.root.join(&manifest.params_path))?;
    let adj = training_adjacency(&data, params.config.tau)?;
    if fingerprint(adj.matrix().data()) != manifest.adjacency_fingerprint {
        return Err(CliError::validation("training graph differs from the one recorded at training time"));
    }
    Ok((manifest, data, params, adj))
}

pub fn predictions_csv(timestamps: &[chrono::NaiveDateTime], eval: &Evaluation) -> String {
    let mut out = String::from("timestamp,actual,predicted,lower95,upper95\n");
    for ((t, y), p) in timestamps.iter().zip(&eval.actual).zip(&eval.predicted) {
        let (lo, hi) = eval.interval.bounds(*p);
        let _ = writeln!(out, "{},{y},{p},{lo},{hi}", t.format("%Y-%m-%dT%H:%M:%S"));
    }
    out
}

/// Scores the trained network on the test split in original units.
pub fn evaluate(ctx: &Context) -> Result<Evaluation, CliError> {
    let (mut manifest, data, params, adj) = trained(ctx)?;
    let eval = evaluate_model(&data, &params, &adj, &ctx.config.train_config())?;
    let l = &ctx.layout;
    let dir = l.evaluation();
    let files = [
        (dir.join("predictions.csv"), predictions_csv(data.test.timestamps(), &eval)),
        (dir.join("report.txt"), eval.report.to_text("test")),
    ];
    for (path, text) in &files {
        write_file(path, text)?;
    }
    write_json(&dir.join("report.json"), &eval.report)?;
    let mut reports: Vec<String> = files.iter().map(|(p, _)| relative(l, p)).collect();
    reports.push(relative(l, &dir.join("report.json")));
    for r in reports {
        if !manifest.reports.contains(&r) {
            manifest.reports.push(r);
        }
    }
    write_json(&l.run_manifest(), &manifest)?;
    write_timing(l, "evaluate", &[("test_seconds", eval.test_seconds)])?;
    info!("test R2 {:?}, RMSE {:.6}", eval.report.r2, eval.report.rmse);
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub report: Option<EvalReport>,
    pub train_seconds: f64,
    pub test_seconds: f64,
    pub error: Option<String>,
}

pub const ABLATION_COLUMNS: [&str; 11] = [
    "Configuration",
    "R²",
    "MAE",
    "MSE",
    "RMSE",
    "ME",
    "SDE",
    "Train(s)",
    "Test(s)",
    "Theil's U",
    "95% Coverage",
];

fn ablation_cells(row: &AblationRow) -> Vec<String> {
    let f = |v: f64| format!("{v:.6}");
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), f);
    let mut cells = vec![row.configuration.clone()];
    match &row.report {
        Some(r) => cells.extend([
            opt(r.r2),
            f(r.mae),
            f(r.mse),
            f(r.rmse),
            f(r.me),
            f(r.sde),
            format!("{:.2}", row.train_seconds),
            format!("{:.2}", row.test_seconds),
            opt(r.theils_u),
            format!("{:.2}", r.coverage_95),
        ]),
        None => cells.extend(std::iter::repeat_n("failed".to_string(), ABLATION_COLUMNS.len() - 1)),
    }
    cells
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = ABLATION_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&ablation_cells(r).join(","));
        out.push('\n');
    }
    out
}

/// Aligned rendering of [`ablation_csv`], with failures listed underneath.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(ablation_cells).collect();
    let width: Vec<usize> = (0..ABLATION_COLUMNS.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].chars().count())
                .chain([ABLATION_COLUMNS[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |vals: Vec<&str>| {
        for (c, v) in vals.iter().enumerate() {
            let pad = width[c] - v.chars().count();
            if c == 0 {
                let _ = write!(out, "{v}{}", " ".repeat(pad));
            } else {
                let _ = write!(out, "  {}{v}", " ".repeat(pad));
            }
        }
        out.push('\n');
    };
    line(ABLATION_COLUMNS.to_vec());
    for r in &cells {
        line(r.iter().map(String::as_str).collect());
    }
    for r in rows.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(out, "# {} failed: {}", r.configuration, r.error.as_deref().unwrap_or(""));
    }
    out
}

/// Trains and scores each path configuration with the shared seed and
/// budget. A failing configuration is recorded and the rest continue.
pub fn ablate(ctx: &Context) -> Result<Vec<AblationRow>, CliError> {
    let cfg = &ctx.config;
    let data = model_data(ctx)?;
    let train_cfg = cfg.train_config();
    let mut rows = Vec::new();
    for ab in Ablation::ALL {
        let model = ModelConfig {
            paths: ab.paths(),
            ..cfg.model
        };
        let outcome = fit_model(&data, &model, &train_cfg)
            .and_then(|f| evaluate_model(&data, &f.params, &f.adjacency, &train_cfg).map(|e| (f, e)));
        let row = match outcome {
            Ok((f, e)) => AblationRow {
                configuration: ab.label().into(),
                report: Some(e.report),
                train_seconds: f.train_seconds,
                test_seconds: e.test_seconds,
                error: None,
            },
            Err(e) => {
                log::warn!("ablation `{}` failed: {e}", ab.label());
                AblationRow {
                    configuration: ab.label().into(),
                    report: None,
                    train_seconds: 0.0,
                    test_seconds: 0.0,
                    error: Some(e.to_string()),
                }
            }
        };
        info!("ablation `{}` done", row.configuration);
        rows.push(row);
    }
    let dir = ctx.layout.ablation();
    write_file(&dir.join("table.csv"), ablation_csv(&rows))?;
    write_file(&dir.join("table.txt"), ablation_text(&rows))?;
    let reports: Vec<(&str, Option<&EvalReport>)> =
        rows.iter().map(|r| (r.configuration.as_str(), r.report.as_ref())).collect();
    write_json(&dir.join("reports.json"), &reports)?;
    let timing: Vec<(String, f64)> = rows
        .iter()
        .flat_map(|r| {
            [
                (format!("{} train_seconds", r.configuration), r.train_seconds),
                (format!("{} test_seconds", r.configuration), r.test_seconds),
            ]
        })
        .collect();
    let timing: Vec<(&str, f64)> = timing.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    write_timing(&ctx.layout, "ablate", &timing)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainOutput {
    /// The requested instance, in original units.
    pub attribution: Attribution,
    pub summary: odefuse::explain::GlobalSummary,
    pub files: Vec<PathBuf>,
}

/// Attributes the trained network's prediction for test row `instance`
/// and summarises attributions over the leading test rows.
pub fn explain(ctx: &Context, instance: usize) -> Result<ExplainOutput, CliError> {
    let (_, data, params, adj) = trained(ctx)?;
    let cfg = &ctx.config;
    let n = data.test.n_rows();
    if instance >= n {
        return Err(CliError::validation(format!(
            "instance {instance} is out of range for {n} test rows"
        )));
    }
    let background = background_sample(&data.train, cfg.explain.background, cfg.seed);
    let explainer = Explainer::new(data.selected.clone(), background, network_model(&params, &adj))?;
    let d = data.selected.len();
    let attribute = |i: usize| -> Result<Attribution, CliError> {
        let row = data.test.row(i);
        let a = if d <= MAX_EXACT_FEATURES {
            let a = explainer.exact(row)?;
            let gap = a.local_accuracy_gap();
            if gap.abs() >= 1e-6 {
                return Err(CliError::runtime(format!(
                    "attribution of instance {i} misses local accuracy by {gap:.3e}"
                )));
            }
            a
        } else {
            explainer.sampled(row, cfg.explain.samples, cfg.seed)?
        };
        Ok(a.to_original_units(&data.scaler)?)
    };
    let count = cfg.explain.instances.min(n);
    let mut all = Vec::with_capacity(count);
    for i in 0..count {
        all.push(attribute(i)?);
    }
    let target = if instance < count { all[instance].clone() } else { attribute(instance)? };
    let summary = global_summary(&all)?;

    let dir = ctx.layout.explain();
    let mut files = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), CliError> {
        let path = dir.join(name);
        write_file(&path, text)?;
        files.push(path);
        Ok(())
    };
    put(format!("waterfall_{instance}.csv"), target.waterfall_csv()?)?;
    put(
        format!("attribution_{instance}.json"),
        serde_json::to_string_pretty(&target).expect("serialisable") + "\n",
    )?;
    put("bar.csv".into(), summary.bar_csv()?)?;
    put("summary.csv".into(), summary.summary_csv()?)?;
    let top = summary.bar()[0].0.clone();
    put("dependence.csv".into(), summary.dependence(&top)?.to_csv()?)?;
    Ok(ExplainOutput {
        attribution: target,
        summary,
        files,
    })
}

/// Random search on the training split; writes the trial log and the best
/// point as a complete, directly reusable config.
pub fn hyperopt_cmd(ctx: &Context, trials: Option<usize>) -> Result<(HyperoptResult, PipelineConfig), CliError> {
    let cfg = &ctx.config;
    let data = model_data(ctx)?;
    let adj = training_adjacency(&data, cfg.model.tau)?;
    let space = cfg.search_space()?;
    let trials = trials.unwrap_or(cfg.search.trials);
    let start = Instant::now();
    let result = hyperopt(&data.train, &adj, &cfg.model, &cfg.train_config(), &space, trials, cfg.seed)?;
    let elapsed = start.elapsed().as_secs_f64();

    let (model, train) = result.best.point.apply(&cfg.model, &cfg.train);
    let mut best = PipelineConfig {
        model,
        train,
        ..cfg.clone()
    };
    best.data.path = std::fs::canonicalize(&best.data.path)
        .map_err(|e| CliError::runtime(format!("cannot resolve data path: {e}")))?;
    best.validate()?;
    let text = best.to_toml();
    PipelineConfig::from_toml(&text)?.validate()?;

    let dir = ctx.layout.hyperopt();
    write_file(&dir.join("trials.jsonl"), result.to_jsonl())?;
    write_file(&dir.join("best_config.toml"), text)?;
    write_timing(&ctx.layout, "hyperopt", &[("search_seconds", elapsed)])?;
    info!(
        "best trial {} with validation mse {:?}",
        result.best.trial, result.best.objective
    );
    Ok((result, best))
}
