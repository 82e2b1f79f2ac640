//! Feature-correlation graph: thresholded absolute Pearson correlations
//! with self-loops, used as the attention mask of the ODE path.

use std::fmt::Write as _;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Default edge threshold.
pub const DEFAULT_TAU: f64 = 0.3;

/// Symmetric `d × d` matrix of Pearson correlation coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix(Tensor);

impl CorrelationMatrix {
    /// Wraps an externally computed matrix after checking it is square and
    /// symmetric within `1e-10`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(Error::shape("correlation matrix", &[r], &[c]));
        }
        for i in 0..r {
            for j in (i + 1)..r {
                if (t.at(i, j) - t.at(j, i)).abs() > 1e-10 {
                    return Err(Error::InvalidArgument(format!(
                        "correlation matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.at(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Thresholded correlation graph with unit diagonal.
///
/// Off-diagonal entries are either `0` or strictly greater than `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    matrix: Tensor,
    tau: f64,
}

impl Adjacency {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.at(i, j)
    }

    /// Graph with self-loops only.
    pub fn identity(d: usize) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Self {
            matrix: Tensor::matrix(d, d, data).expect("square"),
            tau: 1.0,
        }
    }

    /// Builds an adjacency from raw values, checking every invariant.
    pub fn from_parts(matrix: Tensor, tau: f64) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        if r != c {
            return Err(Error::shape("adjacency", &[r], &[c]));
        }
        for i in 0..r {
            if matrix.at(i, i) != 1.0 {
                return Err(Error::InvalidArgument(format!("adjacency diagonal at {i} is not 1")));
            }
            for j in 0..r {
                let v = matrix.at(i, j);
                if v != matrix.at(j, i) {
                    return Err(Error::InvalidArgument(format!("adjacency not symmetric at ({i}, {j})")));
                }
                if i != j && v != 0.0 && !(v > tau && v <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency entry ({i}, {j}) = {v} violates threshold {tau}"
                    )));
                }
            }
        }
        Ok(Self { matrix, tau })
    }

    /// Number of undirected off-diagonal edges.
    pub fn edge_count(&self) -> usize {
        let d = self.dim();
        (0..d)
            .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j) > 0.0)
            .count()
    }

    /// Dense text rendering, one row per line, with feature labels.
    pub fn to_report(&self, names: &[String]) -> String {
        let d = self.dim();
        let mut out = String::new();
        let _ = writeln!(out, "# tau = {}", self.tau);
        let _ = writeln!(out, "# edges = {}", self.edge_count());
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("f{i}"));
        out.push_str("feature");
        for j in 0..d {
            let _ = write!(out, "\t{}", label(j));
        }
        out.push('\n');
        for i in 0..d {
            out.push_str(&label(i));
            for j in 0..d {
                let _ = write!(out, "\t{:.6}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

/// Pearson correlation for every pair of columns.
///
/// Constant columns are assigned correlation 0 with every other column.
/// The diagonal is exactly 1.
pub fn pearson_matrix(columns: &[Vec<f64>]) -> Result<CorrelationMatrix> {
    let d = columns.len();
    if d == 0 {
        return Err(Error::EmptyInput("pearson_matrix"));
    }
    let n = columns[0].len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 3 rows, got {n}"
        )));
    }
    if let Some(bad) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::shape("pearson_matrix", &[n], &[bad.len()]));
    }

    let centered: Vec<(Vec<f64>, f64)> = columns
        .iter()
        .map(|col| {
            let mean = col.iter().sum::<f64>() / n as f64;
            let dev: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let norm = dev.iter().map(|v| v * v).sum::<f64>().sqrt();
            (dev, norm)
        })
        .collect();

    let mut data = vec![0.0; d * d];
    for i in 0..d {
        data[i * d + i] = 1.0;
        for j in (i + 1)..d {
            let (ci, ni) = &centered[i];
            let (cj, nj) = &centered[j];
            let r = if *ni == 0.0 || *nj == 0.0 {
                0.0
            } else {
                let cov: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
                (cov / (ni * nj)).clamp(-1.0, 1.0)
            };
            data[i * d + j] = r;
            data[j * d + i] = r;
        }
    }
    Ok(CorrelationMatrix(Tensor::matrix(d, d, data)?))
}

/// Keeps off-diagonal `|r| > tau` as `|r|`, zeroes the rest and sets the
/// diagonal to 1.
pub fn build_adjacency(corr: &CorrelationMatrix, tau: f64) -> Result<Adjacency> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1), got {tau}")));
    }
    let d = corr.dim();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            data[i * d + j] = if i == j {
                1.0
            } else {
                let r = corr.get(i, j).abs();
                if r > tau {
                    r
                } else {
                    0.0
                }
            };
        }
    }
    Ok(Adjacency {
        matrix: Tensor::matrix(d, d, data)?,
        tau,
    })
}

/// Convenience: correlations then thresholding.
pub fn adjacency_from_columns(columns: &[Vec<f64>], tau: f64) -> Result<Adjacency> {
    build_adjacency(&pearson_matrix(columns)?, tau)
}
