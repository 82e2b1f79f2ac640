//! Seeded synthetic series in the shapes the profiles expect.

use std::f64::consts::PI;
use std::fmt::Write as _;

use chrono::{Duration, Months, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Monthly series: `10 + 0.002·t + sin(2πt/12) + ε`, ε ~ N(0, noise²),
/// starting January 1973. Columns `date,value`.
pub fn monthly_csv(n: usize, noise: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, noise).expect("finite noise level");
    let start = NaiveDate::from_ymd_opt(1973, 1, 1).expect("valid date");
    let mut out = String::from("date,value\n");
    for t in 0..n {
        let date = start + Months::new(t as u32);
        let tf = t as f64;
        let y = 10.0 + 0.002 * tf + (2.0 * PI * tf / 12.0).sin() + eps.sample(&mut rng);
        let _ = writeln!(out, "{},{y:.6}", date.format("%Y-%m-%d"));
    }
    out
}

/// Hourly transformer-style series from July 2016: six load covariates
/// with daily and weekly cycles and an oil temperature `OT` driven by
/// them. Columns `date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT`.
pub fn hourly_csv(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, 1.0).expect("unit normal");
    let start = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid datetime");
    let mut out = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
    let mut drift = 0.0;
    for t in 0..n {
        let tf = t as f64;
        let day = (2.0 * PI * tf / 24.0).sin();
        let week = (2.0 * PI * tf / 168.0).cos();
        drift += 0.05 * eps.sample(&mut rng);
        let mut z = || 0.1 * eps.sample(&mut rng);
        let hufl = 6.0 + 2.0 * day + 0.5 * week + 0.3 * drift + z();
        let hull = 2.0 + 0.6 * day + z();
        let mufl = 4.5 + 1.5 * day + 0.4 * week + z();
        let mull = 1.2 + 0.4 * (2.0 * PI * (tf - 3.0) / 24.0).sin() + z();
        let lufl = 3.0 + 1.0 * week + z();
        let lull = 0.9 + 0.2 * day * week + z();
        let ot = 15.0 + 0.004 * tf + 3.0 * (2.0 * PI * (tf - 2.0) / 24.0).sin() + 0.8 * hufl - 0.5 * lufl + drift + z();
        let ts = start + Duration::hours(t as i64);
        let _ = writeln!(
            out,
            "{},{hufl:.4},{hull:.4},{mufl:.4},{mull:.4},{lufl:.4},{lull:.4},{ot:.4}",
            ts.format("%Y-%m-%d %H:%M:%S")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monthly_shape_and_determinism() {
        let a = monthly_csv(24, 0.05, 1);
        assert_eq!(a, monthly_csv(24, 0.05, 1));
        assert_ne!(a, monthly_csv(24, 0.05, 2));
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 25);
        assert!(lines[1].starts_with("1973-01-01,"));
        assert!(lines[24].starts_with("1974-12-01,"));
        // noiseless values follow the formula
        let clean = monthly_csv(4, 1e-300, 0);
        let v: f64 = clean.lines().nth(4).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!((v - (10.006 + (PI / 2.0).sin())).abs() < 1e-6);
    }

    #[test]
    fn hourly_shape() {
        let a = hourly_csv(50, 3);
        assert_eq!(a.lines().count(), 51);
        assert!(a.lines().nth(2).unwrap().starts_with("2016-07-01 01:00:00,"));
        assert!(a.lines().skip(1).all(|l| l.split(',').count() == 8));
    }
}
