//! Engineered feature columns and the design matrix they are assembled
//! into.
//!
//! Two tabular profiles are supported: a monthly profile producing 14
//! columns and an hourly profile producing 51. Every column derived from the
//! target only looks at values strictly before the row it belongs to, so
//! row `t` can be used to predict `y[t]` without leaking it.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{fill_series, SeriesTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Monthly energy-consumption style series.
    Eia,
    /// Hourly / sub-hourly transformer style series with covariates.
    Ett,
    /// Sliding windows of past target values.
    Windowed,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Eia => "eia",
            Profile::Ett => "ett",
            Profile::Windowed => "windowed",
        })
    }
}

/// Lags used by the monthly profile.
pub const EIA_LAGS: [usize; 6] = [1, 2, 3, 4, 5, 6];
/// Lags used by the hourly profile.
pub const ETT_LAGS: [usize; 8] = [1, 2, 3, 5, 7, 14, 21, 28];
pub const EIA_ROLLING_WINDOW: usize = 3;
pub const ETT_ROLLING_WINDOWS: [usize; 3] = [5, 10, 20];
/// Load covariates carried as-is by the hourly profile.
pub const ETT_COVARIATES: [&str; 6] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL"];
pub const EIA_FEATURE_COUNT: usize = 14;
pub const ETT_FEATURE_COUNT: usize = 51;
/// Input lengths studied for the windowed profile.
pub const WINDOW_LENGTHS: [usize; 4] = [96, 120, 336, 720];

/// `n × d` design matrix with aligned targets and timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    timestamps: Vec<NaiveDateTime>,
    data: Vec<f64>,
    targets: Vec<f64>,
    profile: Profile,
}

impl FeatureMatrix {
    /// Builds a matrix from named columns.
    pub fn from_columns(
        columns: Vec<(String, Vec<f64>)>,
        targets: Vec<f64>,
        timestamps: Vec<NaiveDateTime>,
        profile: Profile,
    ) -> Result<Self> {
        let n = targets.len();
        if timestamps.len() != n {
            return Err(Error::shape("feature matrix timestamps", &[n], &[timestamps.len()]));
        }
        let d = columns.len();
        let mut data = vec![0.0; n * d];
        let mut names = Vec::with_capacity(d);
        for (j, (name, col)) in columns.into_iter().enumerate() {
            if col.len() != n {
                return Err(Error::Column {
                    column: name,
                    reason: format!("has {} rows, expected {n}", col.len()),
                });
            }
            if let Some(bad) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Column {
                    column: name,
                    reason: format!("missing or non-finite value at row {bad}"),
                });
            }
            for (i, v) in col.into_iter().enumerate() {
                data[i * d + j] = v;
            }
            names.push(name);
        }
        if let Some(bad) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::Column {
                column: "target".into(),
                reason: format!("missing or non-finite value at row {bad}"),
            });
        }
        Ok(Self {
            names,
            timestamps,
            data,
            targets,
            profile,
        })
    }

    /// Builds a matrix from row-major values.
    pub fn from_rows(
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
        targets: Vec<f64>,
        timestamps: Vec<NaiveDateTime>,
        profile: Profile,
    ) -> Result<Self> {
        let d = names.len();
        let mut columns: Vec<(String, Vec<f64>)> =
            names.into_iter().map(|n| (n, Vec::with_capacity(rows.len()))).collect();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::shape("feature row", &[d], &[row.len(), i]));
            }
            for (c, v) in columns.iter_mut().zip(row) {
                c.1.push(*v);
            }
        }
        Self::from_columns(columns, targets, timestamps, profile)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.n_features()).map(|j| self.column(j)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Contiguous block of rows.
    pub fn slice(&self, range: Range<usize>) -> Self {
        let d = self.n_features();
        Self {
            names: self.names.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            data: self.data[range.start * d..range.end * d].to_vec(),
            targets: self.targets[range].to_vec(),
            profile: self.profile,
        }
    }

    /// Keeps only the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.index_of(n).ok_or_else(|| Error::Column {
                    column: n.clone(),
                    reason: "not present in feature matrix".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = self.n_features();
        let mut data = Vec::with_capacity(self.n_rows() * idx.len());
        for i in 0..self.n_rows() {
            data.extend(idx.iter().map(|&j| self.data[i * d + j]));
        }
        Ok(Self {
            names: names.to_vec(),
            timestamps: self.timestamps.clone(),
            data,
            targets: self.targets.clone(),
            profile: self.profile,
        })
    }

    /// Same layout with transformed values.
    pub(crate) fn with_values(&self, data: Vec<f64>, targets: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            names: self.names.clone(),
            timestamps: self.timestamps.clone(),
            data,
            targets,
            profile: self.profile,
        }
    }

    pub(crate) fn values(&self) -> &[f64] {
        &self.data
    }

    /// Ordered feature names, one per line.
    pub fn manifest(&self) -> String {
        let mut s = self.names.join("\n");
        s.push('\n');
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a manifest written by [`FeatureMatrix::write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

/// Input length and horizon for the windowed profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub length: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    1
}

impl WindowSpec {
    pub fn new(length: usize, horizon: usize) -> Result<Self> {
        let spec = Self { length, horizon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument(format!(
                "window length and horizon must be at least 1, got {} and {}",
                self.length, self.horizon
            )));
        }
        Ok(())
    }
}

fn calendar_columns(timestamps: &[NaiveDateTime], names: &[&str]) -> Vec<(String, Vec<f64>)> {
    names
        .iter()
        .map(|&name| {
            let col = timestamps
                .iter()
                .map(|ts| match name {
                    "hour" => ts.hour() as f64,
                    "day" => ts.day() as f64,
                    "day_of_week" => ts.weekday().num_days_from_monday() as f64,
                    "month" => ts.month() as f64,
                    "quarter" => ((ts.month() - 1) / 3 + 1) as f64,
                    "day_of_year" => ts.ordinal() as f64,
                    "week_of_year" => ts.iso_week().week() as f64,
                    "is_weekend" => {
                        matches!(ts.weekday(), Weekday::Sat | Weekday::Sun) as u8 as f64
                    }
                    _ => unreachable!("unknown calendar field {name}"),
                })
                .collect();
            (name.to_string(), col)
        })
        .collect()
}

/// Calendar columns for the given profile: 3 for monthly data, 8 for
/// hourly data, none for windows.
pub fn temporal_features(timestamps: &[NaiveDateTime], profile: Profile) -> Vec<(String, Vec<f64>)> {
    match profile {
        Profile::Eia => calendar_columns(timestamps, &["month", "quarter", "day_of_year"]),
        Profile::Ett => calendar_columns(
            timestamps,
            &[
                "hour",
                "day",
                "day_of_week",
                "month",
                "quarter",
                "day_of_year",
                "week_of_year",
                "is_weekend",
            ],
        ),
        Profile::Windowed => Vec::new(),
    }
}

/// `(sin(2πt/period), cos(2πt/period))`.
pub fn cyclical_encode(value: f64, period: f64) -> (f64, f64) {
    let angle = std::f64::consts::TAU * value / period;
    angle.sin_cos()
}

/// `out[t] = y[t - k]`; the first `k` rows are back-filled.
fn shifted(y: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; y.len()];
    if k < y.len() {
        out[k..].copy_from_slice(&y[..y.len() - k]);
    }
    out
}

/// Lagged copies of `y`, named `{prefix}_lag_{k}`.
///
/// Leading rows without history are filled forward then backward.
pub fn lag_features(y: &[f64], lags: &[usize], prefix: &str) -> Result<Vec<(String, Vec<f64>)>> {
    if let Some(&bad) = lags.iter().find(|&&k| k == 0) {
        return Err(Error::InvalidArgument(format!("lag {bad} is not a valid lag")));
    }
    if let Some(&max) = lags.iter().max() {
        if max >= y.len() {
            return Err(Error::InsufficientData(format!(
                "lag {max} needs more than {} observations",
                y.len()
            )));
        }
    }
    lags.iter()
        .map(|&k| {
            let mut col = shifted(y, k);
            fill_series(&mut col).map(|_| (format!("{prefix}_lag_{k}"), col))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RollingStat {
    Mean,
    Std,
    Median,
    Min,
    Max,
    Var,
    Skew,
}

impl RollingStat {
    pub fn name(self) -> &'static str {
        match self {
            RollingStat::Mean => "mean",
            RollingStat::Std => "std",
            RollingStat::Median => "median",
            RollingStat::Min => "min",
            RollingStat::Max => "max",
            RollingStat::Var => "var",
            RollingStat::Skew => "skew",
        }
    }

    fn needs_spread(self) -> bool {
        matches!(self, RollingStat::Std | RollingStat::Var | RollingStat::Skew)
    }

    /// Population-style statistic of one window.
    fn eval(self, w: &[f64]) -> f64 {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let m2 = || w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        match self {
            RollingStat::Mean => mean,
            RollingStat::Std => m2().sqrt(),
            RollingStat::Var => m2(),
            RollingStat::Min => w.iter().copied().fold(f64::INFINITY, f64::min),
            RollingStat::Max => w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            RollingStat::Median => median(w),
            RollingStat::Skew => {
                let var = m2();
                if var == 0.0 {
                    0.0
                } else {
                    let m3 = w.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
                    m3 / var.powf(1.5)
                }
            }
        }
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trailing-window statistics ending at each row, named
/// `{prefix}_rolling_{stat}_{window}`. The first `window - 1` rows are
/// back-filled.
pub fn rolling_stats(
    y: &[f64],
    window: usize,
    stats: &[RollingStat],
    prefix: &str,
) -> Result<Vec<(String, Vec<f64>)>> {
    if window == 0 || window > y.len() {
        return Err(Error::InsufficientData(format!(
            "rolling window {window} does not fit {} observations",
            y.len()
        )));
    }
    if window < 2 && stats.iter().any(|s| s.needs_spread()) {
        return Err(Error::InvalidArgument(
            "std, var and skew need a window of at least 2".into(),
        ));
    }
    stats
        .iter()
        .map(|&stat| {
            let mut col = vec![f64::NAN; y.len()];
            for t in (window - 1)..y.len() {
                col[t] = stat.eval(&y[t + 1 - window..=t]);
            }
            fill_series(&mut col).map(|_| (format!("{prefix}_rolling_{}_{window}", stat.name()), col))
        })
        .collect()
}

/// Mean, std, min and max over `y[0..=t]`, named
/// `{prefix}_expanding_{stat}`.
pub fn expanding_stats(y: &[f64], prefix: &str) -> Result<Vec<(String, Vec<f64>)>> {
    if y.is_empty() {
        return Err(Error::EmptyInput("expanding_stats"));
    }
    let n = y.len();
    let (mut mean, mut std, mut min, mut max) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    // Welford running moments.
    let (mut mu, mut m2) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (t, &v) in y.iter().enumerate() {
        let count = (t + 1) as f64;
        let delta = v - mu;
        mu += delta / count;
        m2 += delta * (v - mu);
        lo = lo.min(v);
        hi = hi.max(v);
        mean[t] = mu;
        std[t] = (m2 / count).max(0.0).sqrt();
        min[t] = lo;
        max[t] = hi;
    }
    Ok(vec![
        (format!("{prefix}_expanding_mean"), mean),
        (format!("{prefix}_expanding_std"), std),
        (format!("{prefix}_expanding_min"), min),
        (format!("{prefix}_expanding_max"), max),
    ])
}

/// Shifts each column down one row (back-filling the first) so a statistic
/// that ended at `t` becomes available at `t + 1`.
fn delay(columns: Vec<(String, Vec<f64>)>) -> Result<Vec<(String, Vec<f64>)>> {
    columns
        .into_iter()
        .map(|(name, col)| {
            let mut s = shifted(&col, 1);
            fill_series(&mut s).map(|_| (name, s))
        })
        .collect()
}

/// Monthly profile: month, quarter, day_of_year, six lags, trailing
/// mean/std/median over three steps, and month sine/cosine (14 columns).
pub fn assemble_eia(table: &SeriesTable) -> Result<FeatureMatrix> {
    let y = table.target()?.to_vec();
    let prefix = table.target_name();
    let ts = table.timestamps();
    if y.len() <= EIA_LAGS[EIA_LAGS.len() - 1] {
        return Err(Error::InsufficientData(format!(
            "monthly profile needs more than {} rows, got {}",
            EIA_LAGS[EIA_LAGS.len() - 1],
            y.len()
        )));
    }

    let mut cols = temporal_features(ts, Profile::Eia);
    cols.extend(lag_features(&y, &EIA_LAGS, prefix)?);
    cols.extend(delay(rolling_stats(
        &y,
        EIA_ROLLING_WINDOW,
        &[RollingStat::Mean, RollingStat::Std, RollingStat::Median],
        prefix,
    )?)?);
    let (sin, cos): (Vec<f64>, Vec<f64>) =
        ts.iter().map(|t| cyclical_encode(t.month() as f64, 12.0)).unzip();
    cols.push(("sin_month".into(), sin));
    cols.push(("cos_month".into(), cos));
    debug_assert_eq!(cols.len(), EIA_FEATURE_COUNT);
    FeatureMatrix::from_columns(cols, y, ts.to_vec(), Profile::Eia)
}

/// Hourly profile: 8 calendar fields, 6 cyclical encodings, 8 lags,
/// 18 trailing statistics, 4 expanding statistics, the load covariates and
/// the last first-difference of the target (51 columns with the standard
/// covariate set).
pub fn assemble_ett(table: &SeriesTable, covariates: &[&str]) -> Result<FeatureMatrix> {
    let y = table.target()?.to_vec();
    let prefix = table.target_name();
    let ts = table.timestamps();
    let max_needed = ETT_LAGS[ETT_LAGS.len() - 1].max(ETT_ROLLING_WINDOWS[2]);
    if y.len() <= max_needed {
        return Err(Error::InsufficientData(format!(
            "hourly profile needs more than {max_needed} rows, got {}",
            y.len()
        )));
    }

    let mut cols = temporal_features(ts, Profile::Ett);
    for (field, period) in [("hour", 24.0), ("day", 31.0), ("month", 12.0)] {
        let (sin, cos): (Vec<f64>, Vec<f64>) = ts
            .iter()
            .map(|t| {
                let v = match field {
                    "hour" => t.hour(),
                    "day" => t.day(),
                    _ => t.month(),
                };
                cyclical_encode(v as f64, period)
            })
            .unzip();
        cols.push((format!("{field}_sin"), sin));
        cols.push((format!("{field}_cos"), cos));
    }
    cols.extend(lag_features(&y, &ETT_LAGS, prefix)?);
    for w in ETT_ROLLING_WINDOWS {
        cols.extend(delay(rolling_stats(
            &y,
            w,
            &[
                RollingStat::Mean,
                RollingStat::Std,
                RollingStat::Min,
                RollingStat::Max,
                RollingStat::Var,
                RollingStat::Skew,
            ],
            prefix,
        )?)?);
    }
    cols.extend(delay(expanding_stats(&y, prefix)?)?);
    for &name in covariates {
        let mut col = table.column(name)?.to_vec();
        fill_series(&mut col).map_err(|_| Error::Column {
            column: name.into(),
            reason: "covariate has no observed values".into(),
        })?;
        cols.push((name.to_string(), col));
    }
    let mut diff = vec![f64::NAN; y.len()];
    for t in 2..y.len() {
        diff[t] = y[t - 1] - y[t - 2];
    }
    fill_series(&mut diff)?;
    cols.push((format!("{prefix}_diff"), diff));
    FeatureMatrix::from_columns(cols, y, ts.to_vec(), Profile::Ett)
}

/// Sliding windows: row `i` holds `y[i..i+L]` and targets
/// `y[i + L + horizon - 1]`.
pub fn build_windowed(
    y: &[f64],
    timestamps: &[NaiveDateTime],
    spec: WindowSpec,
) -> Result<FeatureMatrix> {
    spec.validate()?;
    let need = spec.length + spec.horizon;
    if y.len() < need {
        return Err(Error::InsufficientData(format!(
            "window of {} with horizon {} needs {need} observations, got {}",
            spec.length,
            spec.horizon,
            y.len()
        )));
    }
    if timestamps.len() != y.len() {
        return Err(Error::shape("build_windowed", &[y.len()], &[timestamps.len()]));
    }
    let count = y.len() - need + 1;
    let names: Vec<String> = (0..spec.length)
        .map(|k| format!("w_{}", spec.length - k))
        .collect();
    let rows: Vec<Vec<f64>> = (0..count).map(|i| y[i..i + spec.length].to_vec()).collect();
    let target_idx = |i: usize| i + spec.length + spec.horizon - 1;
    let targets = (0..count).map(|i| y[target_idx(i)]).collect();
    let ts = (0..count).map(|i| timestamps[target_idx(i)]).collect();
    FeatureMatrix::from_rows(names, rows, targets, ts, Profile::Windowed)
}
