//! Pipeline configuration: one TOML file covering data, selection, model,
//! training, search and explanation settings.

use std::path::{Path, PathBuf};

use odefuse::features::{Profile, WindowSpec, ETT_COVARIATES};
use odefuse::model::ModelConfig;
use odefuse::select::SelectConfig;
use odefuse::train::{SearchSpace, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed. Overrides `train.seed`; trial, background and ablation
    /// seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    /// Required for the windowed profile, ignored otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
    #[serde(default)]
    pub selection: SelectConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub profile: Profile,
    /// Input CSV; relative paths resolve against the config file's folder.
    pub path: PathBuf,
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
    pub target_column: String,
    /// Load covariates for the hourly profile (defaults to the standard
    /// six).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    /// IQR multiplier of the target outlier filter; omit to disable.
    #[serde(default = "default_iqr_k", skip_serializing_if = "Option::is_none")]
    pub iqr_k: Option<f64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_timestamp_column() -> String {
    "date".into()
}

fn default_iqr_k() -> Option<f64> {
    Some(1.5)
}

fn default_train_fraction() -> f64 {
    0.8
}

impl DataConfig {
    pub fn covariates(&self) -> Vec<String> {
        self.covariates
            .clone()
            .unwrap_or_else(|| ETT_COVARIATES.iter().map(|s| s.to_string()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// `eia`, `ett` or `solar`; used when `space` is absent.
    pub preset: Option<String>,
    pub space: Option<SearchSpace>,
    pub trials: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            preset: None,
            space: None,
            trials: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Training rows kept as the masking background.
    pub background: usize,
    /// Leading test instances aggregated into the global summary.
    pub instances: usize,
    /// Coalition budget when the feature count rules out exact mode.
    pub samples: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            background: odefuse::explain::DEFAULT_BACKGROUND,
            instances: 10,
            samples: 4096,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    /// Reads and validates a config file, resolving the data path against
    /// the file's folder.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.train.seed = cfg.seed;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: odefuse::Error| CliError::validation(format!("config: {e}"));
        if !self.data.path.is_file() {
            return Err(CliError::validation(format!(
                "config: data file {} does not exist",
                self.data.path.display()
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(CliError::validation(format!(
                "config: data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if let Some(k) = self.data.iqr_k {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(CliError::validation(format!("config: data.iqr_k must be >= 0, got {k}")));
            }
        }
        match (self.data.profile, self.window) {
            (Profile::Windowed, None) => {
                return Err(CliError::validation("config: the windowed profile needs a [window] table"))
            }
            (Profile::Windowed, Some(w)) => w.validate().map_err(v)?,
            _ => {}
        }
        let s = &self.selection;
        if s.target_size == 0 || s.top_k < s.target_size {
            return Err(CliError::validation(format!(
                "config: selection needs 1 <= target_size <= top_k, got {} and {}",
                s.target_size, s.top_k
            )));
        }
        if !(s.fit_fraction > 0.0 && s.fit_fraction < 1.0) {
            return Err(CliError::validation(format!(
                "config: selection.fit_fraction must lie in (0, 1), got {}",
                s.fit_fraction
            )));
        }
        self.model.validate().map_err(v)?;
        self.train.validate().map_err(v)?;
        self.search_space()?.validate().map_err(v)?;
        if self.search.trials == 0 {
            return Err(CliError::validation("config: search.trials must be at least 1"));
        }
        let e = &self.explain;
        if e.background == 0 || e.instances == 0 {
            return Err(CliError::validation("config: explain.background and explain.instances must be positive"));
        }
        Ok(())
    }

    /// Explicit space, else the named preset, else the profile's default.
    pub fn search_space(&self) -> Result<SearchSpace, CliError> {
        if let Some(space) = &self.search.space {
            return Ok(space.clone());
        }
        let name = match (&self.search.preset, self.data.profile) {
            (Some(p), _) => p.as_str(),
            (None, Profile::Eia) => "eia",
            (None, _) => "ett",
        };
        SearchSpace::preset(name).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }
}
