//! Loading and cleaning raw CSV series, standard scaling and the
//! chronological train/test split.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Timestamp-indexed table of numeric columns with a designated target.
///
/// Missing values are stored as `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    timestamps: Vec<NaiveDateTime>,
    columns: Vec<(String, Vec<f64>)>,
    target: String,
}

impl SeriesTable {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        columns: Vec<(String, Vec<f64>)>,
        target: impl Into<String>,
    ) -> Result<Self> {
        let target = target.into();
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "timestamps must be strictly increasing".into(),
            ));
        }
        for (name, col) in &columns {
            if col.len() != timestamps.len() {
                return Err(Error::Column {
                    column: name.clone(),
                    reason: format!("has {} rows, index has {}", col.len(), timestamps.len()),
                });
            }
        }
        if !columns.iter().any(|(n, _)| *n == target) {
            return Err(Error::Column {
                column: target,
                reason: "target column not present".into(),
            });
        }
        Ok(Self {
            timestamps,
            columns,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn target_name(&self) -> &str {
        &self.target
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| Error::Column {
                column: name.into(),
                reason: "not present in table".into(),
            })
    }

    pub fn target(&self) -> Result<&[f64]> {
        self.column(&self.target)
    }

    fn retain_rows(&self, keep: &[bool]) -> Self {
        let pick = |v: &[f64]| v.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect();
        Self {
            timestamps: self
                .timestamps
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(t, _)| *t)
                .collect(),
            columns: self.columns.iter().map(|(n, c)| (n.clone(), pick(c))).collect(),
            target: self.target.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyHint {
    #[default]
    Auto,
    /// Normalise every timestamp to the first instant of its month.
    Monthly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub timestamp_column: String,
    pub target_column: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Restrict loading to these value columns (the target is always kept).
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default)]
    pub frequency: FrequencyHint,
}

fn default_delimiter() -> char {
    ','
}

impl CsvOptions {
    pub fn new(timestamp_column: &str, target_column: &str) -> Self {
        Self {
            timestamp_column: timestamp_column.into(),
            target_column: target_column.into(),
            delimiter: ',',
            columns: None,
            frequency: FrequencyHint::Auto,
        }
    }
}

/// Parses ISO-8601 style dates and datetimes, `YYYY-MM`, and EIA-style
/// `YYYYMM` integers. Month 13 (annual totals) and anything else
/// unparseable yields `None`.
pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let s = raw.trim();
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return d.and_hms_opt(0, 0, 0);
        }
    }
    let month_start = |y: i32, m: u32| NaiveDate::from_ymd_opt(y, m, 1).and_then(|d| d.and_hms_opt(0, 0, 0));
    if let Some((y, m)) = s.split_once('-') {
        if let (Ok(y), Ok(m)) = (y.parse::<i32>(), m.parse::<u32>()) {
            return month_start(y, m);
        }
    }
    if s.len() == 6 && s.bytes().all(|b| b.is_ascii_digit()) {
        let y: i32 = s[..4].parse().ok()?;
        let m: u32 = s[4..].parse().ok()?;
        return month_start(y, m);
    }
    None
}

/// Parses a numeric cell; empty, `NaN` and `Not Available` are missing.
pub fn parse_value(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("not available") {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn month_of(t: &NaiveDateTime) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(t.year(), t.month(), 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid month start")
}

/// Reads a CSV file into a [`SeriesTable`], sorted by timestamp.
///
/// Rows with an unparseable timestamp or a non-numeric target are dropped.
/// Other value columns keep missing cells as `NaN`; columns without a
/// single numeric cell are skipped.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<SeriesTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter as u8)
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Column {
            column: name.into(),
            reason: format!("not found in header of {}", path.display()),
        })
    };
    let ts_idx = find(&opts.timestamp_column)?;
    let target_idx = find(&opts.target_column)?;
    let value_idx: Vec<usize> = match &opts.columns {
        Some(cols) => {
            let mut idx = cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
            if !idx.contains(&target_idx) {
                idx.push(target_idx);
            }
            idx
        }
        None => (0..headers.len()).filter(|&i| i != ts_idx).collect(),
    };

    let mut rows: Vec<(NaiveDateTime, Vec<f64>)> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        let Some(mut ts) = record.get(ts_idx).and_then(parse_timestamp) else {
            dropped += 1;
            continue;
        };
        if record.get(target_idx).and_then(parse_value).is_none() {
            dropped += 1;
            continue;
        }
        if opts.frequency == FrequencyHint::Monthly {
            ts = month_of(&ts);
        }
        let values = value_idx
            .iter()
            .map(|&i| record.get(i).and_then(parse_value).unwrap_or(f64::NAN))
            .collect();
        rows.push((ts, values));
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} rows with bad timestamps or targets", path.display());
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("{}: no parseable rows", path.display())));
    }
    rows.sort_by_key(|(t, _)| *t);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument(format!(
            "{}: duplicate timestamp {}",
            path.display(),
            w[0].0
        )));
    }

    let mut columns = Vec::new();
    for (k, &i) in value_idx.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|(_, v)| v[k]).collect();
        if i != target_idx && col.iter().all(|v| v.is_nan()) {
            continue;
        }
        columns.push((headers[i].clone(), col));
    }
    let timestamps = rows.into_iter().map(|(t, _)| t).collect();
    SeriesTable::new(timestamps, columns, &opts.target_column)
}

/// Quantile by linear interpolation between order statistics
/// (position `(n - 1) · q` in the sorted sample).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `[Q1 − k·IQR, Q3 + k·IQR]` of the observed values.
pub fn iqr_fence(values: &[f64], k: f64) -> (f64, f64) {
    let (q1, q3) = (quantile(values, 0.25), quantile(values, 0.75));
    let iqr = q3 - q1;
    (q1 - k * iqr, q3 + k * iqr)
}

/// Removes rows whose `column` value falls outside the IQR fence.
///
/// The fence is recomputed on the surviving rows until nothing more is
/// removed, so applying the filter twice changes nothing. A zero IQR leaves
/// the table untouched.
pub fn iqr_filter(table: &SeriesTable, column: &str, k: f64) -> Result<SeriesTable> {
    if !(k >= 0.0) {
        return Err(Error::InvalidArgument(format!("IQR multiplier must be >= 0, got {k}")));
    }
    let mut current = table.clone();
    loop {
        let values = current.column(column)?;
        let observed = values.iter().filter(|v| !v.is_nan()).count();
        if observed < 4 {
            return Err(Error::InsufficientData(format!(
                "IQR filter on `{column}` needs at least 4 values, got {observed}"
            )));
        }
        let (lo, hi) = iqr_fence(values, k);
        if hi - lo == 0.0 {
            warn!("IQR of `{column}` is zero; outlier filter skipped");
            return Ok(current);
        }
        let keep: Vec<bool> = values.iter().map(|&v| v.is_nan() || (lo..=hi).contains(&v)).collect();
        if keep.iter().all(|&k| k) {
            return Ok(current);
        }
        current = current.retain_rows(&keep);
    }
}

/// Forward fill then backward fill, in place. Errors if nothing is
/// observed.
pub fn fill_series(values: &mut [f64]) -> Result<()> {
    let Some(first) = values.iter().position(|v| !v.is_nan()) else {
        return Err(Error::InsufficientData("series has no observed values".into()));
    };
    let mut last = values[first];
    for v in values.iter_mut().skip(first) {
        if v.is_nan() {
            *v = last;
        } else {
            last = *v;
        }
    }
    let head = values[first];
    for v in &mut values[..first] {
        *v = head;
    }
    Ok(())
}

/// Forward-then-backward fill of every column.
pub fn fill_missing(table: &SeriesTable) -> Result<SeriesTable> {
    let mut out = table.clone();
    for (name, col) in &mut out.columns {
        fill_series(col).map_err(|_| Error::Column {
            column: name.clone(),
            reason: "all values are missing".into(),
        })?;
    }
    Ok(out)
}

/// One row per calendar month between the first and last observation,
/// holding the mean of the observed values in that month. Months with no
/// observations become missing.
pub fn resample_monthly(table: &SeriesTable) -> Result<SeriesTable> {
    if table.is_empty() {
        return Err(Error::EmptyInput("resample_monthly"));
    }
    let ncol = table.columns.len();
    let mut buckets: BTreeMap<(i32, u32), Vec<(f64, usize)>> = BTreeMap::new();
    for (r, t) in table.timestamps.iter().enumerate() {
        let slot = buckets.entry((t.year(), t.month())).or_insert_with(|| vec![(0.0, 0); ncol]);
        for (c, (_, col)) in table.columns.iter().enumerate() {
            let v = col[r];
            if !v.is_nan() {
                slot[c].0 += v;
                slot[c].1 += 1;
            }
        }
    }
    let (&(y0, m0), _) = buckets.first_key_value().expect("non-empty");
    let (&(y1, m1), _) = buckets.last_key_value().expect("non-empty");
    let mut timestamps = Vec::new();
    let mut columns: Vec<(String, Vec<f64>)> =
        table.columns.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
    let (mut y, mut m) = (y0, m0);
    loop {
        timestamps.push(month_of(&NaiveDate::from_ymd_opt(y, m, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()));
        let slot = buckets.get(&(y, m));
        for (c, (_, col)) in columns.iter_mut().enumerate() {
            col.push(match slot {
                Some(s) if s[c].1 > 0 => s[c].0 / s[c].1 as f64,
                _ => f64::NAN,
            });
        }
        if (y, m) == (y1, m1) {
            break;
        }
        (y, m) = if m == 12 { (y + 1, 1) } else { (y, m + 1) };
    }
    SeriesTable::new(timestamps, columns, &table.target)
}

/// Per-column standard-scaling statistics fitted on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Rows of the split the statistics were fitted on.
    pub fit_rows: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ScalerState {
    /// Fits population mean and standard deviation of each column and the
    /// target. Constant columns are rejected.
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        if x.n_rows() < 2 {
            return Err(Error::InsufficientData("scaler needs at least 2 rows".into()));
        }
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for (j, name) in x.names().iter().enumerate() {
            let (m, s) = mean_std(&x.column(j));
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::Column {
                    column: name.clone(),
                    reason: "is constant on the fitting split and cannot be scaled".into(),
                });
            }
            means.push(m);
            stds.push(s);
        }
        let (target_mean, target_std) = mean_std(x.targets());
        if !(target_std > 0.0) {
            return Err(Error::Column {
                column: "target".into(),
                reason: "is constant on the fitting split and cannot be scaled".into(),
            });
        }
        Ok(Self {
            names: x.names().to_vec(),
            means,
            stds,
            target_mean,
            target_std,
            fit_rows: x.n_rows(),
        })
    }

    pub fn transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.names() != self.names.as_slice() {
            return Err(Error::InvalidArgument(
                "feature columns differ from the fitted scaler".into(),
            ));
        }
        let d = self.names.len();
        let data = x
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.means[k % d]) / self.stds[k % d])
            .collect();
        let targets = x.targets().iter().map(|&y| self.scale_target(y)).collect();
        Ok(x.with_values(data, targets))
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn inverse_target(&self, y_scaled: f64) -> f64 {
        y_scaled * self.target_std + self.target_mean
    }

    /// Maps a standardized feature value back to original units.
    pub fn inverse_feature(&self, j: usize, v: f64) -> f64 {
        v * self.stds[j] + self.means[j]
    }

    /// Scaler restricted to a subset of columns.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.names.iter().position(|m| m == n).ok_or_else(|| Error::Column {
                    column: n.clone(),
                    reason: "not present in scaler".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: names.to_vec(),
            means: idx.iter().map(|&i| self.means[i]).collect(),
            stds: idx.iter().map(|&i| self.stds[i]).collect(),
            ..self.clone()
        })
    }
}

/// Fits the scaler on `x` and returns the transformed matrix.
pub fn standardize(x: &FeatureMatrix) -> Result<(FeatureMatrix, ScalerState)> {
    let state = ScalerState::fit(x)?;
    let scaled = state.transform(x)?;
    Ok((scaled, state))
}

pub fn inverse_target(y_scaled: &[f64], state: &ScalerState) -> Vec<f64> {
    y_scaled.iter().map(|&y| state.inverse_target(y)).collect()
}

/// First `⌊fraction · n⌋` rows and the remainder, without shuffling.
pub fn chrono_split(x: &FeatureMatrix, train_fraction: f64) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let n = x.n_rows();
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "chronological split needs at least 5 rows, got {n}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let cut = split_point(n, train_fraction);
    if cut == 0 || cut == n {
        return Err(Error::InsufficientData(format!("split of {n} rows leaves an empty side")));
    }
    Ok((x.slice(0..cut), x.slice(cut..n)))
}

pub(crate) fn split_point(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 1e-9).floor() as usize
}
