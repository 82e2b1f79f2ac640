//! Seeded random search over training and model hyperparameters.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::Adjacency;
use crate::model::ModelConfig;

/// Independent stream seed for item `index` under `master`
/// (SplitMix64 finaliser).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One searched dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dim {
    Fixed { value: f64 },
    /// Integers `lo, lo + step, …` not exceeding `hi`.
    Int { lo: i64, hi: i64, step: i64 },
    /// Uniform on `[lo, hi]`, optionally snapped to `lo + k·step`.
    Uniform { lo: f64, hi: f64, step: Option<f64> },
    LogUniform { lo: f64, hi: f64 },
    Choice { values: Vec<f64> },
}

impl Dim {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("search dimension `{name}`: {m}")));
        match self {
            Dim::Fixed { value } if !value.is_finite() => bad("value is not finite"),
            Dim::Int { lo, hi, step } if lo > hi || *step < 1 => bad("empty integer range"),
            Dim::Uniform { lo, hi, step } if !(lo <= hi) || step.is_some_and(|s| !(s > 0.0)) => {
                bad("empty interval")
            }
            Dim::LogUniform { lo, hi } if !(*lo > 0.0 && lo <= hi) => bad("log range needs 0 < lo <= hi"),
            Dim::Choice { values } if values.is_empty() => bad("no choices"),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Dim::Fixed { value } => *value,
            Dim::Int { lo, hi, step } => {
                let k = rng.random_range(0..=(hi - lo) / step);
                (lo + k * step) as f64
            }
            Dim::Uniform { lo, hi, step: None } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(*lo..=*hi)
                }
            }
            Dim::Uniform { lo, hi, step: Some(s) } => {
                let n = ((hi - lo) / s + 1e-9).floor() as i64;
                let k = rng.random_range(0..=n);
                ((lo + k as f64 * s) * 1e12).round() / 1e12
            }
            Dim::LogUniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(lo.ln()..=hi.ln()).exp().clamp(*lo, *hi)
                }
            }
            Dim::Choice { values } => values[rng.random_range(0..values.len())],
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self {
            Dim::Fixed { value } => v == *value,
            Dim::Int { lo, hi, step } => {
                v.fract() == 0.0 && (*lo as f64..=*hi as f64).contains(&v) && (v as i64 - lo) % step == 0
            }
            Dim::Uniform { lo, hi, .. } | Dim::LogUniform { lo, hi } => (*lo..=*hi).contains(&v),
            Dim::Choice { values } => values.contains(&v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub hidden_dim: Dim,
    pub batch_size: Dim,
    pub epochs: Dim,
    pub dropout: Dim,
    pub learning_rate: Dim,
}

impl SearchSpace {
    /// Monthly renewable-energy style datasets.
    pub fn eia() -> Self {
        Self {
            hidden_dim: Dim::Int { lo: 16, hi: 512, step: 4 },
            batch_size: Dim::Choice { values: vec![16.0, 32.0] },
            epochs: Dim::Int { lo: 30, hi: 250, step: 1 },
            dropout: Dim::Uniform { lo: 0.1, hi: 0.5, step: Some(0.1) },
            learning_rate: Dim::LogUniform { lo: 1e-4, hi: 1e-2 },
        }
    }

    /// Hourly / quarter-hourly transformer datasets.
    pub fn ett() -> Self {
        Self {
            hidden_dim: Dim::Int { lo: 32, hi: 128, step: 16 },
            batch_size: Dim::Choice { values: vec![16.0, 32.0, 64.0, 128.0] },
            epochs: Dim::Int { lo: 30, hi: 100, step: 10 },
            dropout: Dim::Uniform { lo: 0.1, hi: 0.5, step: Some(0.1) },
            learning_rate: Dim::LogUniform { lo: 1e-4, hi: 1e-2 },
        }
    }

    /// Solar-style datasets, searched without dropout.
    pub fn solar() -> Self {
        Self {
            hidden_dim: Dim::Int { lo: 16, hi: 256, step: 4 },
            batch_size: Dim::Choice { values: vec![16.0, 32.0, 64.0, 128.0] },
            epochs: Dim::Int { lo: 30, hi: 150, step: 1 },
            dropout: Dim::Fixed { value: 0.0 },
            learning_rate: Dim::LogUniform { lo: 1e-4, hi: 1e-2 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "eia" => Ok(Self::eia()),
            "ett" => Ok(Self::ett()),
            "solar" => Ok(Self::solar()),
            other => Err(Error::InvalidArgument(format!(
                "unknown search preset `{other}` (expected eia, ett or solar)"
            ))),
        }
    }

    fn dims(&self) -> [(&'static str, &Dim); 5] {
        [
            ("hidden_dim", &self.hidden_dim),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("dropout", &self.dropout),
            ("learning_rate", &self.learning_rate),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, dim) in self.dims() {
            dim.validate(name)?;
        }
        Ok(())
    }

    /// Draws one point; dimensions are sampled in declaration order.
    pub fn sample(&self, rng: &mut impl Rng) -> TrialPoint {
        TrialPoint {
            hidden_dim: self.hidden_dim.sample(rng) as usize,
            batch_size: self.batch_size.sample(rng) as usize,
            epochs: self.epochs.sample(rng) as usize,
            dropout: self.dropout.sample(rng),
            learning_rate: self.learning_rate.sample(rng),
        }
    }

    pub fn contains(&self, p: &TrialPoint) -> bool {
        self.hidden_dim.contains(p.hidden_dim as f64)
            && self.batch_size.contains(p.batch_size as f64)
            && self.epochs.contains(p.epochs as f64)
            && self.dropout.contains(p.dropout)
            && self.learning_rate.contains(p.learning_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub learning_rate: f64,
}

impl TrialPoint {
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        (
            ModelConfig {
                hidden_dim: self.hidden_dim,
                dropout: self.dropout,
                ..*model
            },
            TrainConfig {
                batch_size: self.batch_size,
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                ..*train
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub point: TrialPoint,
    /// Objective value; `None` when the trial failed.
    pub objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperoptResult {
    pub best: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

impl HyperoptResult {
    /// One JSON record per trial.
    pub fn to_jsonl(&self) -> String {
        self.trials
            .iter()
            .map(|t| serde_json::to_string(t).expect("plain record") + "\n")
            .collect()
    }
}

/// Evaluates `trials` seeded samples of `space` and keeps the lowest
/// objective (earliest trial on ties). Failed trials are logged and
/// skipped.
pub fn random_search<F>(space: &SearchSpace, trials: usize, seed: u64, mut objective: F) -> Result<HyperoptResult>
where
    F: FnMut(&TrialPoint, u64) -> Result<f64>,
{
    space.validate()?;
    if trials == 0 {
        return Err(Error::InvalidArgument("search needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let point = space.sample(&mut rng);
        let trial_seed = derive_seed(seed, trial as u64);
        let (objective, error) = match objective(&point, trial_seed) {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (None, Some(format!("objective is {v}"))),
            Err(e) => (None, Some(e.to_string())),
        };
        match (&objective, &error) {
            (Some(v), _) => info!("trial {trial}: {point:?} -> {v:.6e}"),
            (_, Some(e)) => warn!("trial {trial} failed: {e}"),
            _ => {}
        }
        records.push(TrialRecord {
            trial,
            seed: trial_seed,
            point,
            objective,
            error,
        });
    }
    let best = records
        .iter()
        .filter(|r| r.objective.is_some())
        .min_by(|a, b| a.objective.unwrap().total_cmp(&b.objective.unwrap()))
        .cloned()
        .ok_or_else(|| Error::Contract("every search trial failed".into()))?;
    Ok(HyperoptResult { best, trials: records })
}

/// Random search whose objective is the best validation MSE of a full
/// training run.
pub fn hyperopt(
    x: &FeatureMatrix,
    adj: &Adjacency,
    model: &ModelConfig,
    train: &TrainConfig,
    space: &SearchSpace,
    trials: usize,
    seed: u64,
) -> Result<HyperoptResult> {
    random_search(space, trials, seed, |point, trial_seed| {
        let (m, mut t) = point.apply(model, train);
        t.seed = trial_seed;
        let (_, history) = fit(x, adj, &m, &t)?;
        history
            .best_val_loss
            .ok_or_else(|| Error::Contract("trial recorded no validation loss".into()))
    })
}
