//! Seeded fixtures shared by the benchmarks.

use odefuse::graph::{adjacency_from_columns, Adjacency};
use odefuse::model::{init_params, ModelConfig, NetworkParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `d` columns of `n` uniform draws sharing a common component, so the
/// correlation graph has edges.
pub fn columns(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..d)
        .map(|j| {
            let w = (j % 3) as f64 * 0.5;
            base.iter().map(|b| w * b + rng.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

pub struct Fixture {
    pub params: NetworkParams,
    pub adj: Adjacency,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Freshly initialised network of width `hidden` over `d` features with
/// `n` standardized-looking rows.
pub fn fixture(d: usize, hidden: usize, n: usize, seed: u64) -> Fixture {
    let cols = columns(n.max(3), d, seed);
    let adj = adjacency_from_columns(&cols, 0.3).expect("finite columns");
    let config = ModelConfig {
        hidden_dim: hidden,
        ..ModelConfig::default()
    };
    let params = init_params(d, &config, seed).expect("valid config");
    let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let targets = rows.iter().map(|r| r.iter().sum::<f64>() / d as f64).collect();
    Fixture {
        params,
        adj,
        rows,
        targets,
    }
}
