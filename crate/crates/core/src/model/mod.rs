//! The four-path network: a graph-attention Neural ODE over per-feature
//! node embeddings, a width-5 convolution path, a learnable frequency path
//! and a direct dense path, fused by a residual MLP head.

mod archive;
mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use archive::{load_params, read_params, save_params, write_params, ARCHIVE_MAGIC, FORMAT_VERSION};
pub use forward::{
    ablation_forward, bind, daubechies_path, dense_path, forward, graph_attention, ode_field, ode_path,
    parametric_path, predict, predict_many, Bound,
};

use crate::diffcore::{Tensor, CONV_WIDTH};
use crate::error::{Error, Result};
use crate::graph::DEFAULT_TAU;
use crate::odesolve::SolverConfig;

pub const MIN_HIDDEN: usize = 16;
pub const MAX_HIDDEN: usize = 512;
pub const MAX_DROPOUT: f64 = 0.5;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Layer-norm variance floor; small enough that normalised rows have unit
/// spread to ~1e-8.
pub const LN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sin,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(Activation::Sin),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}` (expected sin or tanh)"
            ))),
        }
    }
}

/// Which of the four feature paths feed the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathSet {
    pub ode: bool,
    pub daubechies: bool,
    pub parametric: bool,
    pub dense: bool,
}

impl PathSet {
    pub const ALL: PathSet = PathSet {
        ode: true,
        daubechies: true,
        parametric: true,
        dense: true,
    };
    pub const NONE: PathSet = PathSet {
        ode: false,
        daubechies: false,
        parametric: false,
        dense: false,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    /// Paths enabled here and not in `other`.
    pub fn without(&self, other: PathSet) -> PathSet {
        PathSet {
            ode: self.ode && !other.ode,
            daubechies: self.daubechies && !other.daubechies,
            parametric: self.parametric && !other.parametric,
            dense: self.dense && !other.dense,
        }
    }

    /// Width of the concatenated path outputs for hidden size `h`.
    pub fn head_width(&self, h: usize) -> usize {
        let mut w = 0;
        if self.ode {
            w += h;
        }
        if self.daubechies {
            w += h / 2;
        }
        if self.parametric {
            w += h / 2;
        }
        if self.dense {
            w += h / 4;
        }
        w
    }
}

impl Default for PathSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// The six configurations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    NoOde,
    NoDaubechies,
    NoParametric,
    NoDense,
    OnlyOde,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoOde,
        Ablation::NoDaubechies,
        Ablation::NoParametric,
        Ablation::NoDense,
        Ablation::OnlyOde,
    ];

    pub fn paths(self) -> PathSet {
        let mut p = PathSet::ALL;
        match self {
            Ablation::Full => {}
            Ablation::NoOde => p.ode = false,
            Ablation::NoDaubechies => p.daubechies = false,
            Ablation::NoParametric => p.parametric = false,
            Ablation::NoDense => p.dense = false,
            Ablation::OnlyOde => p = PathSet { ode: true, ..PathSet::NONE },
        }
        p
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Full",
            Ablation::NoOde => "No ODE",
            Ablation::NoDaubechies => "No Daubechies",
            Ablation::NoParametric => "No Parametric",
            Ablation::NoDense => "No Dense",
            Ablation::OnlyOde => "Only ODE",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub solver: SolverConfig,
    pub tau: f64,
    pub paths: PathSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            dropout: 0.2,
            activation: Activation::Sin,
            solver: SolverConfig::default(),
            tau: DEFAULT_TAU,
            paths: PathSet::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim;
        if !h.is_multiple_of(4) || !(MIN_HIDDEN..=MAX_HIDDEN).contains(&h) {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim must be a multiple of 4 in [{MIN_HIDDEN}, {MAX_HIDDEN}], got {h}"
            )));
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, {MAX_DROPOUT}], got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        if self.paths.is_empty() {
            return Err(Error::InvalidArgument("at least one path must be enabled".into()));
        }
        self.solver.validate()
    }

    pub fn head_width(&self) -> usize {
        self.paths.head_width(self.hidden_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Glorot,
    Zeros,
    Ones,
}

/// Ordered parameter layout: name, shape, initialisation. The order fixes
/// the random stream consumed by [`init_params`].
fn layout(d: usize, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let h = cfg.hidden_dim;
    let (h2, h4) = (h / 2, h / 4);
    let mut out: Vec<(&str, Vec<usize>, Init)> = Vec::new();
    if cfg.paths.ode {
        out.extend([
            ("ode.proj_w", vec![d, h], Glorot),
            ("ode.proj_b", vec![d, h], Zeros),
            ("ode.w1", vec![h, h], Glorot),
            ("ode.b1", vec![h], Zeros),
            ("ode.w2", vec![h, h], Glorot),
            ("ode.b2", vec![h], Zeros),
            ("ode.att_w", vec![h, h], Glorot),
            ("ode.att_src", vec![h, 1], Glorot),
            ("ode.att_dst", vec![h, 1], Glorot),
            ("ode.ln_gain", vec![h], Ones),
            ("ode.ln_bias", vec![h], Zeros),
        ]);
    }
    if cfg.paths.daubechies {
        out.extend([
            ("daub.kernels", vec![CONV_WIDTH, h2], Glorot),
            ("daub.bias", vec![h2], Zeros),
        ]);
    }
    if cfg.paths.parametric {
        out.extend([
            ("param.w_f", vec![d, h2], Glorot),
            ("param.amp", vec![1, h2], Ones),
            ("param.phase", vec![1, h2], Zeros),
        ]);
    }
    if cfg.paths.dense {
        out.extend([("dense.w", vec![d, h4], Glorot), ("dense.b", vec![h4], Zeros)]);
    }
    let w = cfg.head_width();
    out.extend([
        ("head.w1", vec![w, h], Glorot),
        ("head.b1", vec![h], Zeros),
        ("head.w2", vec![h, h2], Glorot),
        ("head.b2", vec![h2], Zeros),
        ("head.w3", vec![h2, h], Glorot),
        ("head.b3", vec![h], Zeros),
        ("head.w_out", vec![h, 1], Glorot),
        ("head.b_out", vec![1], Zeros),
    ]);
    out.into_iter().map(|(n, s, i)| (n.to_string(), s, i)).collect()
}

/// All learnable tensors keyed by `path.name`, plus the configuration they
/// were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: ModelConfig,
    pub n_features: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is missing")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks that every expected tensor is present with its expected
    /// shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = layout(self.n_features, &self.config);
        if expected.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter layout",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero biases
/// and phases, unit amplitudes and layer-norm gains.
pub fn init_params(d: usize, config: &ModelConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    if d == 0 {
        return Err(Error::EmptyInput("init_params"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in layout(d, config) {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Glorot => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(NetworkParams {
        config: *config,
        n_features: d,
        tensors,
    })
}
