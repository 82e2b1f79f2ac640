//! Regression metrics, error analysis and interval coverage.
//!
//! Errors are always `prediction − truth`.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::median;

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Missing when the truth is constant.
    pub r2: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub me: f64,
    pub sde: f64,
    pub median_error: f64,
    pub max_error: f64,
    pub min_error: f64,
    pub mad: f64,
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::shape("metrics", &[y.len()], &[yhat.len()]));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("metrics"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn basic_metrics(y: &[f64], yhat: &[f64]) -> Result<BasicMetrics> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (b - a).powi(2)).sum();
    let mae = y.iter().zip(yhat).map(|(a, b)| (b - a).abs()).sum::<f64>() / n;
    let mse = sse / n;
    let ybar = mean(y);
    let sst: f64 = y.iter().map(|a| (a - ybar).powi(2)).sum();
    let r2 = if y.len() >= 2 && sst > 0.0 {
        Some(1.0 - sse / sst)
    } else {
        warn!("R² undefined: truth is constant or too short");
        None
    };
    Ok(BasicMetrics {
        mse,
        rmse: mse.sqrt(),
        mae,
        r2,
    })
}

pub fn error_analysis(y: &[f64], yhat: &[f64]) -> Result<ErrorStats> {
    check_pair(y, yhat)?;
    let e: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| b - a).collect();
    let me = mean(&e);
    let sde = (e.iter().map(|v| (v - me).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
    let med = median(&e);
    let dev: Vec<f64> = e.iter().map(|v| (v - med).abs()).collect();
    Ok(ErrorStats {
        me,
        sde,
        median_error: med,
        max_error: e.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_error: e.iter().copied().fold(f64::INFINITY, f64::min),
        mad: median(&dev),
    })
}

/// Model error relative to a one-step persistence forecast over the same
/// horizon. `None` when the truth never changes.
pub fn theils_u(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_pair(y, yhat)?;
    if y.len() < 2 {
        return Err(Error::InsufficientData("Theil's U needs at least 2 points".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 1..y.len() {
        num += (yhat[t] - y[t]).powi(2);
        den += (y[t] - y[t - 1]).powi(2);
    }
    if den == 0.0 {
        warn!("Theil's U undefined: truth is constant");
        return Ok(None);
    }
    Ok(Some(num.sqrt() / den.sqrt()))
}

/// Symmetric Gaussian band `yhat ± z·σ` with σ from held-out residuals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalModel {
    pub residual_sigma: f64,
    pub z: f64,
}

impl IntervalModel {
    /// Population standard deviation of validation residuals.
    pub fn fit(y_val: &[f64], yhat_val: &[f64]) -> Result<Self> {
        let stats = error_analysis(y_val, yhat_val)?;
        Ok(Self {
            residual_sigma: stats.sde,
            z: Z95,
        })
    }

    pub fn from_sigma(residual_sigma: f64) -> Result<Self> {
        if !(residual_sigma >= 0.0) || !residual_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "residual sigma must be finite and >= 0, got {residual_sigma}"
            )));
        }
        Ok(Self {
            residual_sigma,
            z: Z95,
        })
    }

    pub fn half_width(&self) -> f64 {
        self.z * self.residual_sigma
    }

    pub fn bounds(&self, yhat: f64) -> (f64, f64) {
        (yhat - self.half_width(), yhat + self.half_width())
    }
}

/// Percentage of points whose absolute error is within the band (inclusive).
pub fn coverage_95(y: &[f64], yhat: &[f64], interval: &IntervalModel) -> Result<f64> {
    check_pair(y, yhat)?;
    let w = interval.half_width();
    let hit = y.iter().zip(yhat).filter(|(a, b)| (*a - *b).abs() <= w).count();
    Ok(100.0 * hit as f64 / y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
    pub me: f64,
    pub sde: f64,
    pub median_error: f64,
    pub max_error: f64,
    pub min_error: f64,
    pub mad: f64,
    pub theils_u: Option<f64>,
    /// Percent, from Gaussian bands fitted on validation residuals.
    pub coverage_95: f64,
}

impl EvalReport {
    pub fn compute(y: &[f64], yhat: &[f64], interval: &IntervalModel) -> Result<Self> {
        let b = basic_metrics(y, yhat)?;
        let e = error_analysis(y, yhat)?;
        let u = if y.len() >= 2 { theils_u(y, yhat)? } else { None };
        Ok(Self {
            mse: b.mse,
            rmse: b.rmse,
            mae: b.mae,
            r2: b.r2,
            me: e.me,
            sde: e.sde,
            median_error: e.median_error,
            max_error: e.max_error,
            min_error: e.min_error,
            mad: e.mad,
            theils_u: u,
            coverage_95: coverage_95(y, yhat, interval)?,
        })
    }

    /// Plain-text record: a regression block, an error-analysis block and
    /// a coverage line, one labelled row each.
    pub fn to_text(&self, label: &str) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "missing".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>12}{:>12}{:>12}{:>12}", "dataset", "MSE", "RMSE", "MAE", "R2");
        let _ = writeln!(
            s,
            "{:<16}{:>12.6}{:>12.6}{:>12.6}{:>12}",
            label,
            self.mse,
            self.rmse,
            self.mae,
            opt(self.r2)
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<16}{:>12}{:>12}{:>14}{:>12}{:>12}{:>12}{:>12}",
            "dataset", "ME", "SDE", "Median Error", "Max Error", "Min Error", "MAD", "Theil's U"
        );
        let _ = writeln!(
            s,
            "{:<16}{:>12.6}{:>12.6}{:>14.6}{:>12.6}{:>12.6}{:>12.6}{:>12}",
            label,
            self.me,
            self.sde,
            self.median_error,
            self.max_error,
            self.min_error,
            self.mad,
            opt(self.theils_u)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16}{:>30}", "dataset", "95% Coverage (gaussian band)");
        let _ = writeln!(s, "{:<16}{:>30.4}", label, self.coverage_95);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_pair(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let yhat = y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        (y, yhat)
    }

    #[test]
    fn perfect_prediction() {
        let y = [1.0, 2.0, 4.0];
        let b = basic_metrics(&y, &y).unwrap();
        assert_eq!((b.mse, b.r2), (0.0, Some(1.0)));
        let e = error_analysis(&y, &y).unwrap();
        assert_eq!([e.me, e.sde, e.median_error, e.max_error, e.min_error, e.mad], [0.0; 6]);
        assert_eq!(theils_u(&y, &y).unwrap(), Some(0.0));
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let y = [1.0, 2.0, 6.0];
        let b = basic_metrics(&y, &[3.0; 3]).unwrap();
        assert!(b.r2.unwrap().abs() < 1e-15);
        assert_eq!(basic_metrics(&[2.0; 3], &[1.0, 2.0, 3.0]).unwrap().r2, None);
    }

    #[test]
    fn basic_metrics_loop_oracle() {
        let (y, yhat) = random_pair(3, 50);
        let b = basic_metrics(&y, &yhat).unwrap();
        let mut sse = 0.0;
        let mut sae = 0.0;
        let mut ybar = 0.0;
        for i in 0..y.len() {
            sse += (yhat[i] - y[i]) * (yhat[i] - y[i]);
            sae += (yhat[i] - y[i]).abs();
            ybar += y[i];
        }
        ybar /= 50.0;
        let mut sst = 0.0;
        for v in &y {
            sst += (v - ybar) * (v - ybar);
        }
        assert!((b.mse - sse / 50.0).abs() < 1e-12);
        assert!((b.mae - sae / 50.0).abs() < 1e-12);
        assert!((b.r2.unwrap() - (1.0 - sse / sst)).abs() < 1e-12);
        assert!((b.rmse - b.mse.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn error_analysis_hand_cases() {
        let e = error_analysis(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!((e.me, e.sde, e.mad), (0.0, 1.0, 1.0));
        let e = error_analysis(&[0.0; 3], &[2.0; 3]).unwrap();
        assert_eq!((e.me, e.sde, e.mad), (2.0, 0.0, 0.0));
        // sign convention: over-prediction is positive
        let e = error_analysis(&[1.0], &[3.0]).unwrap();
        assert_eq!(e.max_error, 2.0);
        assert!(error_analysis(&[], &[]).is_err());
        assert!(error_analysis(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn theils_u_persistence_is_one() {
        let (y, _) = random_pair(5, 30);
        let mut persist = vec![y[0]];
        persist.extend_from_slice(&y[..y.len() - 1]);
        assert!((theils_u(&y, &persist).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(theils_u(&[1.0; 4], &[0.0; 4]).unwrap(), None);
    }

    #[test]
    fn theils_u_loop_oracle() {
        let (y, yhat) = random_pair(9, 40);
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..39 {
            num += (yhat[t + 1] - y[t + 1]).powi(2);
            den += (y[t + 1] - y[t]).powi(2);
        }
        let u = theils_u(&y, &yhat).unwrap().unwrap();
        assert!((u - (num / den).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn coverage_edges() {
        let y = [1.0, 2.0, 3.0];
        let huge = IntervalModel::from_sigma(1e9).unwrap();
        assert_eq!(coverage_95(&y, &[0.0, 0.0, 0.0], &huge).unwrap(), 100.0);
        let zero = IntervalModel::from_sigma(0.0).unwrap();
        assert_eq!(coverage_95(&y, &y, &zero).unwrap(), 100.0);
        assert_eq!(coverage_95(&y, &[1.0, 2.0, 3.5], &zero).unwrap(), 200.0 / 3.0);
        assert!(IntervalModel::from_sigma(-1.0).is_err());
    }

    #[test]
    fn coverage_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let val = draw(10_000);
        let interval = IntervalModel::fit(&vec![0.0; val.len()], &val).unwrap();
        let test = draw(10_000);
        let cov = coverage_95(&vec![0.0; test.len()], &test, &interval).unwrap();
        assert!((cov - 95.0).abs() <= 2.0, "coverage {cov}");
    }

    #[test]
    fn report_text_has_all_columns() {
        let (y, yhat) = random_pair(1, 20);
        let r = EvalReport::compute(&y, &yhat, &IntervalModel::from_sigma(0.5).unwrap()).unwrap();
        let t = r.to_text("synthetic");
        for h in ["MSE", "RMSE", "MAE", "R2", "ME", "SDE", "Median Error", "MAD", "Theil's U", "95% Coverage"] {
            assert!(t.contains(h), "{h} missing");
        }
        assert!(r.min_error <= r.median_error && r.median_error <= r.max_error);
    }

    #[test]
    fn theils_u_depends_on_order() {
        let y = [0.0, 1.0, 0.0, 1.0, 5.0, 6.0];
        let yhat = [0.5, 1.2, 0.1, 0.7, 5.5, 5.0];
        let perm = [5, 2, 0, 4, 1, 3];
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let hp: Vec<f64> = perm.iter().map(|&i| yhat[i]).collect();
        assert_ne!(theils_u(&y, &yhat).unwrap(), theils_u(&yp, &hp).unwrap());
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..500, n in 3usize..30) {
            let (y, yhat) = random_pair(seed, n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.reverse();
            idx.rotate_left(seed as usize % n);
            let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let hp: Vec<f64> = idx.iter().map(|&i| yhat[i]).collect();
            let (a, b) = (basic_metrics(&y, &yhat).unwrap(), basic_metrics(&yp, &hp).unwrap());
            prop_assert!((a.mse - b.mse).abs() < 1e-12 && (a.mae - b.mae).abs() < 1e-12);
            prop_assert!((a.r2.unwrap() - b.r2.unwrap()).abs() < 1e-12);
            let (a, b) = (error_analysis(&y, &yhat).unwrap(), error_analysis(&yp, &hp).unwrap());
            prop_assert!((a.me - b.me).abs() < 1e-12 && (a.sde - b.sde).abs() < 1e-12);
            prop_assert_eq!(a.median_error, b.median_error);
            prop_assert_eq!(a.mad, b.mad);
        }

        #[test]
        fn affine_consistency(seed in 0u64..500, c in 0.1f64..10.0) {
            let (y, yhat) = random_pair(seed, 25);
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let hs: Vec<f64> = yhat.iter().map(|v| v * c).collect();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
            let (b1, b2) = (basic_metrics(&y, &yhat).unwrap(), basic_metrics(&ys, &hs).unwrap());
            prop_assert!(close(b2.mae, c * b1.mae) && close(b2.rmse, c * b1.rmse));
            prop_assert!(close(b2.r2.unwrap(), b1.r2.unwrap()));
            let (e1, e2) = (error_analysis(&y, &yhat).unwrap(), error_analysis(&ys, &hs).unwrap());
            prop_assert!(close(e2.me, c * e1.me) && close(e2.sde, c * e1.sde) && close(e2.mad, c * e1.mad));
            prop_assert!(close(theils_u(&ys, &hs).unwrap().unwrap(), theils_u(&y, &yhat).unwrap().unwrap()));
            let i1 = IntervalModel::from_sigma(0.4).unwrap();
            let i2 = IntervalModel::from_sigma(0.4 * c).unwrap();
            prop_assert_eq!(coverage_95(&y, &yhat, &i1).unwrap(), coverage_95(&ys, &hs, &i2).unwrap());
        }
    }
}
