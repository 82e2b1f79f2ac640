//! Two-stage feature selection: rank features by cumulative boosted-tree
//! gain, keep the strongest fifteen, then eliminate recursively down to a
//! fixed set size.

mod gbm;

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

pub use gbm::{fit_gbm, GbmConfig, GbmModel, Node, Tree};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ingest::split_point;

pub const DEFAULT_TOP_K: usize = 15;
pub const DEFAULT_TARGET_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub top_k: usize,
    pub target_size: usize,
    /// Leading fraction of rows the scorer is fitted on during elimination;
    /// the tail is used to score each step.
    pub fit_fraction: f64,
    pub gbm: GbmConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            target_size: DEFAULT_TARGET_SIZE,
            fit_fraction: 0.8,
            gbm: GbmConfig::default(),
        }
    }
}

/// Fits the scorer on every column of `x`.
pub fn fit_matrix(x: &FeatureMatrix, cfg: &GbmConfig) -> Result<GbmModel> {
    fit_gbm(x.values(), x.n_rows(), x.n_features(), x.targets(), cfg)
}

/// Feature indices by descending cumulative gain; ties keep column order.
pub fn rank_indices(model: &GbmModel, top_k: usize) -> Vec<usize> {
    let d = model.n_features();
    if top_k > d {
        warn!("requested top {top_k} of only {d} features; keeping all");
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| model.gains[b].total_cmp(&model.gains[a]).then(a.cmp(&b)));
    idx.truncate(top_k.min(d));
    idx
}

pub fn rank_importance(model: &GbmModel, names: &[String], top_k: usize) -> Result<Vec<String>> {
    if names.len() != model.n_features() {
        return Err(Error::shape("rank_importance", &[model.n_features()], &[names.len()]));
    }
    Ok(rank_indices(model, top_k).into_iter().map(|i| names[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfeStep {
    pub n_features: usize,
    pub validation_mse: f64,
    /// Feature dropped after scoring this set; `None` on the final step.
    pub removed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Output of the ranking stage, or the full input order when ranking
    /// was skipped.
    pub ranked: Vec<String>,
    pub ranking_applied: bool,
    pub selected: Vec<String>,
    pub trace: Vec<RfeStep>,
}

fn validation_mse(model: &GbmModel, x: &FeatureMatrix) -> f64 {
    let se: f64 = x
        .rows()
        .zip(x.targets())
        .map(|(r, y)| (model.predict(r) - y).powi(2))
        .sum();
    se / x.n_rows() as f64
}

/// Recursive elimination from `start` down to `target_size`, one feature
/// per step. Each step fits the scorer on the leading rows, records the
/// tail MSE and drops the feature with the least gain (the later column on
/// ties).
pub fn rfe(x: &FeatureMatrix, start: &[String], target_size: usize, cfg: &SelectConfig) -> Result<SelectionResult> {
    if start.len() < target_size {
        return Err(Error::InvalidArgument(format!(
            "elimination needs at least {target_size} features, got {}",
            start.len()
        )));
    }
    if target_size == 0 {
        return Err(Error::InvalidArgument("elimination target size must be at least 1".into()));
    }
    let cut = split_point(x.n_rows(), cfg.fit_fraction);
    if cut < 10 || cut >= x.n_rows() {
        return Err(Error::InsufficientData(format!(
            "elimination split of {} rows at fraction {} is too small",
            x.n_rows(),
            cfg.fit_fraction
        )));
    }
    let (fit_rows, val_rows) = (x.slice(0..cut), x.slice(cut..x.n_rows()));
    let mut current = start.to_vec();
    let mut trace = Vec::new();
    loop {
        let fit_part = fit_rows.select(&current)?;
        let model = fit_matrix(&fit_part, &cfg.gbm)?;
        let mse = validation_mse(&model, &val_rows.select(&current)?);
        if current.len() == target_size {
            trace.push(RfeStep {
                n_features: current.len(),
                validation_mse: mse,
                removed: None,
            });
            break;
        }
        let worst = (0..current.len())
            .rev()
            .min_by(|&a, &b| model.gains[a].total_cmp(&model.gains[b]))
            .expect("non-empty set");
        let removed = current.remove(worst);
        trace.push(RfeStep {
            n_features: current.len() + 1,
            validation_mse: mse,
            removed: Some(removed),
        });
    }
    Ok(SelectionResult {
        ranked: start.to_vec(),
        ranking_applied: false,
        selected: current,
        trace,
    })
}

/// Full selection on a training matrix. Ranking runs only when there are
/// more than `top_k` features; otherwise elimination starts from all of
/// them.
pub fn select_features(x: &FeatureMatrix, cfg: &SelectConfig) -> Result<SelectionResult> {
    let names = x.names().to_vec();
    if names.len() > cfg.top_k {
        let model = fit_matrix(x, &cfg.gbm)?;
        let ranked = rank_importance(&model, &names, cfg.top_k)?;
        let mut result = rfe(x, &ranked, cfg.target_size, cfg)?;
        result.ranking_applied = true;
        Ok(result)
    } else {
        rfe(x, &names, cfg.target_size, cfg)
    }
}

impl SelectionResult {
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ranked{}", if self.ranking_applied { "" } else { " (ranking skipped)" });
        for n in &self.ranked {
            let _ = writeln!(s, "{n}");
        }
        let _ = writeln!(s, "# selected");
        for n in &self.selected {
            let _ = writeln!(s, "{n}");
        }
        let _ = writeln!(s, "# trace\tn_features\tvalidation_mse\tremoved");
        for t in &self.trace {
            let _ = writeln!(
                s,
                "{}\t{:e}\t{}",
                t.n_features,
                t.validation_mse,
                t.removed.as_deref().unwrap_or("-")
            );
        }
        s
    }

    pub fn from_report(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Archive(format!("selection report: {m}"));
        let mut section = "";
        let mut out = Self {
            ranked: Vec::new(),
            ranking_applied: true,
            selected: Vec::new(),
            trace: Vec::new(),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(h) = line.strip_prefix("# ") {
                section = h.split(['\t', ' ']).next().unwrap_or("");
                if section == "ranked" {
                    out.ranking_applied = !h.contains("skipped");
                }
                continue;
            }
            match section {
                "ranked" => out.ranked.push(line.to_string()),
                "selected" => out.selected.push(line.to_string()),
                "trace" => {
                    let f: Vec<&str> = line.split('\t').collect();
                    if f.len() != 3 {
                        return Err(bad("trace row needs 3 fields"));
                    }
                    out.trace.push(RfeStep {
                        n_features: f[0].parse().map_err(|_| bad("bad feature count"))?,
                        validation_mse: f[1].parse().map_err(|_| bad("bad mse"))?,
                        removed: (f[2] != "-").then(|| f[2].to_string()),
                    });
                }
                _ => return Err(bad("content before first section")),
            }
        }
        if out.selected.is_empty() {
            return Err(bad("no selected features"));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_report()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_report(&text)
    }
}
