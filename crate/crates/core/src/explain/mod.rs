//! Interventional Shapley attributions: exact coalition enumeration for
//! small feature sets, kernel regression over sampled coalitions otherwise,
//! and the tables behind bar, summary, dependence and waterfall views.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::Adjacency;
use crate::ingest::ScalerState;
use crate::model::{predict, NetworkParams};

/// Largest feature count handled by exact enumeration.
pub const MAX_EXACT_FEATURES: usize = 12;
/// Background rows kept by [`background_sample`] by default.
pub const DEFAULT_BACKGROUND: usize = 100;

/// Up to `max_rows` rows of `x`, drawn without replacement and kept in
/// their original order.
pub fn background_sample(x: &FeatureMatrix, max_rows: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = x.n_rows();
    if n <= max_rows {
        return x.rows().map(<[f64]>::to_vec).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, max_rows).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| x.row(i).to_vec()).collect()
}

/// Eval-mode network as a plain function of one feature row.
pub fn network_model<'a>(params: &'a NetworkParams, adj: &'a Adjacency) -> impl Fn(&[f64]) -> Result<f64> + 'a {
    move |x| predict(params, adj, x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub names: Vec<String>,
    /// Mean model output over the background.
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub instance: Vec<f64>,
    pub prediction: f64,
}

/// One row of a waterfall table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterfallRow {
    pub feature: String,
    pub shap_value: f64,
    pub feature_value: f64,
    /// `shap_value × feature_value`.
    pub contribution_impact: f64,
}

impl Attribution {
    /// `base + Σφ − prediction`.
    pub fn local_accuracy_gap(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>() - self.prediction
    }

    /// Re-expresses a standardized-space attribution in original units:
    /// outputs through the target scaling, feature values through their
    /// column scaling. Local accuracy is preserved.
    pub fn to_original_units(&self, scaler: &ScalerState) -> Result<Self> {
        let s = scaler.select(&self.names)?;
        Ok(Self {
            names: self.names.clone(),
            base_value: s.inverse_target(self.base_value),
            phi: self.phi.iter().map(|p| p * s.target_std).collect(),
            instance: self.instance.iter().enumerate().map(|(j, &v)| s.inverse_feature(j, v)).collect(),
            prediction: s.inverse_target(self.prediction),
        })
    }

    /// Features ordered by |φ| descending (ties by name).
    pub fn waterfall(&self) -> Vec<WaterfallRow> {
        let mut rows: Vec<WaterfallRow> = self
            .names
            .iter()
            .zip(&self.phi)
            .zip(&self.instance)
            .map(|((name, &p), &v)| WaterfallRow {
                feature: name.clone(),
                shap_value: p,
                feature_value: v,
                contribution_impact: p * v,
            })
            .collect();
        rows.sort_by(|a, b| {
            b.shap_value
                .abs()
                .total_cmp(&a.shap_value.abs())
                .then_with(|| a.feature.cmp(&b.feature))
        });
        rows
    }

    /// Waterfall as CSV, bracketed by the base value and the prediction.
    pub fn waterfall_csv(&self) -> Result<String> {
        let gap = self.local_accuracy_gap();
        if gap.abs() > 1e-6 * (1.0 + self.prediction.abs()) {
            log::warn!("attribution misses local accuracy by {gap:.3e}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["Feature", "SHAP Value", "Feature Value", "Contribution Impact"])?;
        w.write_record(["E[f(x)]", &fmt(self.base_value), "", ""])?;
        for r in self.waterfall() {
            w.write_record([
                r.feature.as_str(),
                &fmt(r.shap_value),
                &fmt(r.feature_value),
                &fmt(r.contribution_impact),
            ])?;
        }
        w.write_record(["f(x)", &fmt(self.prediction), "", ""])?;
        finish_csv(w)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// A model together with the background its absent features are drawn from.
pub struct Explainer<F> {
    names: Vec<String>,
    background: Vec<Vec<f64>>,
    model: F,
}

impl<F> Explainer<F>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    pub fn new(names: Vec<String>, background: Vec<Vec<f64>>, model: F) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyInput("explainer features"));
        }
        if background.is_empty() {
            return Err(Error::EmptyInput("explainer background"));
        }
        if let Some(r) = background.iter().find(|r| r.len() != names.len()) {
            return Err(Error::shape("explainer background", &[r.len()], &[names.len()]));
        }
        Ok(Self { names, background, model })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn background(&self) -> &[Vec<f64>] {
        &self.background
    }

    fn check_instance(&self, instance: &[f64]) -> Result<()> {
        if instance.len() != self.names.len() {
            return Err(Error::shape("explain instance", &[instance.len()], &[self.names.len()]));
        }
        Ok(())
    }

    /// Mean output with features in `mask` taken from the instance and the
    /// rest from each background row.
    fn value(&self, instance: &[f64], mask: u64, buf: &mut Vec<f64>) -> Result<f64> {
        let mut sum = 0.0;
        for b in &self.background {
            buf.clear();
            buf.extend((0..instance.len()).map(|j| if mask >> j & 1 == 1 { instance[j] } else { b[j] }));
            let y = (self.model)(buf)?;
            if !y.is_finite() {
                return Err(Error::NonFinite("model output during attribution".into()));
            }
            sum += y;
        }
        Ok(sum / self.background.len() as f64)
    }

    /// Exact Shapley values by enumerating all 2^d coalitions.
    pub fn exact(&self, instance: &[f64]) -> Result<Attribution> {
        self.check_instance(instance)?;
        let d = instance.len();
        if d > MAX_EXACT_FEATURES {
            return Err(Error::InvalidArgument(format!(
                "exact attribution supports at most {MAX_EXACT_FEATURES} features, got {d}; use sampled mode"
            )));
        }
        let mut buf = Vec::with_capacity(d);
        let v = (0u64..1 << d)
            .map(|mask| self.value(instance, mask, &mut buf))
            .collect::<Result<Vec<_>>>()?;
        let fact: Vec<f64> = (0..=d).scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
        let weight: Vec<f64> = (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect();
        let mut phi = vec![0.0; d];
        for (i, p) in phi.iter_mut().enumerate() {
            let bit = 1u64 << i;
            for mask in (0u64..1 << d).filter(|m| m & bit == 0) {
                *p += weight[mask.count_ones() as usize] * (v[(mask | bit) as usize] - v[mask as usize]);
            }
        }
        Ok(Attribution {
            names: self.names.clone(),
            base_value: v[0],
            phi,
            instance: instance.to_vec(),
            prediction: v[(1usize << d) - 1],
        })
    }

    /// Kernel-weighted least squares over at most `n_samples` coalitions.
    /// Coalition sizes whose full enumeration fits the budget are enumerated
    /// (so a budget of 2^d − 2 reproduces the exact values); the rest are
    /// sampled with paired complements. Local accuracy is imposed exactly.
    pub fn sampled(&self, instance: &[f64], n_samples: usize, seed: u64) -> Result<Attribution> {
        self.check_instance(instance)?;
        let d = instance.len();
        if d > 62 {
            return Err(Error::InvalidArgument(format!("sampled attribution supports at most 62 features, got {d}")));
        }
        if n_samples < 2 * d {
            return Err(Error::InvalidArgument(format!(
                "sampled attribution needs at least {} coalitions, got {n_samples}",
                2 * d
            )));
        }
        let full = (1u64 << d) - 1;
        let mut buf = Vec::with_capacity(d);
        let base = self.value(instance, 0, &mut buf)?;
        let prediction = self.value(instance, full, &mut buf)?;
        let delta = prediction - base;
        let done = |phi| {
            Ok(Attribution {
                names: self.names.clone(),
                base_value: base,
                phi,
                instance: instance.to_vec(),
                prediction,
            })
        };
        if d == 1 {
            return done(vec![delta]);
        }

        let coalitions = kernel_coalitions(d, n_samples, seed);
        let k = coalitions.len();
        let p = d - 1;
        let mut x = DMatrix::zeros(k, p);
        let mut y = DVector::zeros(k);
        let mut w = DVector::zeros(k);
        for (r, &(mask, weight)) in coalitions.iter().enumerate() {
            let last = (mask >> p & 1) as f64;
            for j in 0..p {
                x[(r, j)] = (mask >> j & 1) as f64 - last;
            }
            y[r] = self.value(instance, mask, &mut buf)? - base - last * delta;
            w[r] = weight;
        }
        let xtw = {
            let mut t = x.transpose();
            for (c, &wc) in w.iter().enumerate() {
                t.column_mut(c).scale_mut(wc);
            }
            t
        };
        let chol = (&xtw * &x).cholesky().ok_or_else(|| {
            Error::InsufficientData("sampled coalitions leave the attribution system underdetermined".into())
        })?;
        let beta = chol.solve(&(&xtw * &y));
        let mut phi: Vec<f64> = beta.iter().copied().collect();
        phi.push(delta - phi.iter().sum::<f64>());
        done(phi)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Next larger mask with the same number of set bits.
fn next_combination(x: u64) -> u64 {
    let c = x & x.wrapping_neg();
    let r = x + c;
    (((r ^ x) >> 2) / c) | r
}

/// Coalition masks with their kernel weights (summing to 1), excluding the
/// empty and full coalitions.
fn kernel_coalitions(d: usize, n_samples: usize, seed: u64) -> Vec<(u64, f64)> {
    let full = (1u64 << d) - 1;
    let budget = (n_samples as f64).min(2f64.powi(d as i32) - 2.0) as usize;
    let n_sizes = d / 2; // sizes 1..=n_sizes, each paired with d − s
    let paired = |s: usize| 2 * s != d;
    let mut size_weight: Vec<f64> = (1..=n_sizes)
        .map(|s| {
            let w = (d - 1) as f64 / (s * (d - s)) as f64;
            if paired(s) { 2.0 * w } else { w }
        })
        .collect();
    let total: f64 = size_weight.iter().sum();
    size_weight.iter_mut().for_each(|w| *w /= total);

    let mut out = Vec::new();
    let mut left = budget;
    let mut remaining = size_weight.clone();
    let mut n_full = 0;
    for s in 1..=n_sizes {
        let count = binomial(d, s) * if paired(s) { 2.0 } else { 1.0 };
        if (left as f64) * remaining[s - 1] / count < 1.0 - 1e-8 {
            break;
        }
        n_full += 1;
        left -= count as usize;
        if remaining[s - 1] < 1.0 {
            let r = 1.0 - remaining[s - 1];
            remaining.iter_mut().for_each(|w| *w /= r);
        }
        let mut w = size_weight[s - 1] / binomial(d, s);
        if paired(s) {
            w /= 2.0;
        }
        let mut mask = (1u64 << s) - 1;
        while mask <= full {
            out.push((mask, w));
            if paired(s) {
                out.push((full ^ mask, w));
            }
            mask = next_combination(mask);
        }
    }
    if n_full == n_sizes || left == 0 {
        return out;
    }

    let tail = &size_weight[n_full..];
    let tail_total: f64 = tail.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: BTreeMap<u64, f64> = BTreeMap::new();
    let mut attempts = 0;
    while left > 0 && attempts < 64 * budget {
        attempts += 1;
        let mut u = rng.random::<f64>() * tail_total;
        let mut s = n_sizes;
        for (k, &w) in tail.iter().enumerate() {
            if u < w {
                s = n_full + k + 1;
                break;
            }
            u -= w;
        }
        let mask = index::sample(&mut rng, d, s).iter().fold(0u64, |m, j| m | 1 << j);
        for m in [mask, full ^ mask] {
            let e = sampled.entry(m).or_insert(0.0);
            if *e == 0.0 {
                if left == 0 {
                    continue;
                }
                left -= 1;
            }
            *e += 1.0;
        }
    }
    let sampled_total: f64 = sampled.values().sum();
    out.extend(sampled.into_iter().map(|(m, c)| (m, c * tail_total / sampled_total)));
    out
}

/// Attributions across many instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub names: Vec<String>,
    /// Mean |φ| per feature, in `names` order.
    pub mean_abs: Vec<f64>,
    /// φ per instance (rows) and feature (columns).
    pub phi: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

/// Dependence data of one feature: its values against its φ, coloured by
/// the feature whose values track that φ most closely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dependence {
    pub feature: String,
    pub interaction: Option<String>,
    /// `(feature value, φ, interaction feature value)`.
    pub points: Vec<(f64, f64, Option<f64>)>,
}

pub fn global_summary(attributions: &[Attribution]) -> Result<GlobalSummary> {
    let first = attributions.first().ok_or(Error::EmptyInput("global summary"))?;
    if let Some(a) = attributions.iter().find(|a| a.names != first.names) {
        return Err(Error::InvalidArgument(format!(
            "attributions disagree on features: {:?} vs {:?}",
            first.names, a.names
        )));
    }
    let n = attributions.len() as f64;
    let mean_abs = (0..first.names.len())
        .map(|j| attributions.iter().map(|a| a.phi[j].abs()).sum::<f64>() / n)
        .collect();
    Ok(GlobalSummary {
        names: first.names.clone(),
        mean_abs,
        phi: attributions.iter().map(|a| a.phi.clone()).collect(),
        values: attributions.iter().map(|a| a.instance.clone()).collect(),
    })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        0.0
    }
}

impl GlobalSummary {
    /// `(feature, mean |φ|)` by descending importance, ties by name.
    pub fn bar(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self.names.iter().cloned().zip(self.mean_abs.iter().copied()).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        rows
    }

    pub fn bar_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["Feature", "Mean |SHAP Value|"])?;
        for (name, v) in self.bar() {
            w.write_record([name, fmt(v)])?;
        }
        finish_csv(w)
    }

    /// Long-format φ and feature values, one row per instance and feature.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["Instance", "Feature", "SHAP Value", "Feature Value"])?;
        for (i, (phi, vals)) in self.phi.iter().zip(&self.values).enumerate() {
            for (j, name) in self.names.iter().enumerate() {
                w.write_record([i.to_string(), name.clone(), fmt(phi[j]), fmt(vals[j])])?;
            }
        }
        finish_csv(w)
    }

    pub fn dependence(&self, feature: &str) -> Result<Dependence> {
        let j = self.names.iter().position(|n| n == feature).ok_or_else(|| Error::Column {
            column: feature.into(),
            reason: "not among the explained features".into(),
        })?;
        let phi_j: Vec<f64> = self.phi.iter().map(|r| r[j]).collect();
        let mut best: Option<(usize, f64)> = None;
        for k in (0..self.names.len()).filter(|&k| k != j) {
            let col: Vec<f64> = self.values.iter().map(|r| r[k]).collect();
            let c = correlation(&col, &phi_j).abs();
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((k, c));
            }
        }
        Ok(Dependence {
            feature: feature.into(),
            interaction: best.map(|(k, _)| self.names[k].clone()),
            points: self
                .values
                .iter()
                .zip(&phi_j)
                .map(|(r, &p)| (r[j], p, best.map(|(k, _)| r[k])))
                .collect(),
        })
    }
}

impl Dependence {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let inter = self.interaction.clone().unwrap_or_default();
        w.write_record([self.feature.as_str(), "SHAP Value", inter.as_str()])?;
        for &(v, p, c) in &self.points {
            w.write_record([fmt(v), fmt(p), c.map(fmt).unwrap_or_default()])?;
        }
        finish_csv(w)
    }
}
