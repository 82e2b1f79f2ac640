//! On-disk layout of a run folder and the readers/writers for its files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use odefuse::features::{FeatureMatrix, Profile};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Paths inside a run folder.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn train_matrix(&self) -> PathBuf {
        self.features().join("train.csv")
    }
    pub fn test_matrix(&self) -> PathBuf {
        self.features().join("test.csv")
    }
    pub fn feature_manifest(&self) -> PathBuf {
        self.features().join("manifest.txt")
    }
    pub fn scaler(&self) -> PathBuf {
        self.features().join("scaler.json")
    }
    pub fn prepare_summary(&self) -> PathBuf {
        self.features().join("prepare.json")
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.txt")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn params(&self) -> PathBuf {
        self.model().join("params.odefp")
    }
    pub fn history(&self) -> PathBuf {
        self.model().join("history.jsonl")
    }
    pub fn adjacency(&self) -> PathBuf {
        self.model().join("adjacency.tsv")
    }
    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
    pub fn explain(&self) -> PathBuf {
        self.root.join("explain")
    }
    pub fn hyperopt(&self) -> PathBuf {
        self.root.join("hyperopt")
    }
    /// Wall-clock measurements live apart from every other artifact so
    /// reruns compare byte-for-byte elsewhere.
    pub fn timing(&self, command: &str) -> PathBuf {
        self.root.join("timing").join(format!("{command}.json"))
    }

    /// Fails with a hint when an earlier stage's output is missing.
    pub fn require(&self, path: &Path, producer: &str) -> Result<(), CliError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(CliError::validation(format!(
                "{} is missing; run `{producer}` first",
                path.display()
            )))
        }
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable artifact");
    text.push('\n');
    write_file(path, text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::validation(format!("malformed {}: {e}", path.display())))
}

/// `timestamp,target,<features…>` with round-trip float formatting.
pub fn matrix_to_csv(x: &FeatureMatrix) -> String {
    let mut out = String::from("timestamp,target");
    for n in x.names() {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for i in 0..x.n_rows() {
        let _ = write!(out, "{},{}", x.timestamps()[i].format(TS_FORMAT), x.targets()[i]);
        for v in x.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str, profile: Profile, origin: &Path) -> Result<FeatureMatrix, CliError> {
    let bad = |line: usize, m: &str| CliError::validation(format!("{}:{line}: {m}", origin.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty matrix file"))?.split(',').collect();
    if header.len() < 3 || header[0] != "timestamp" || header[1] != "target" {
        return Err(bad(1, "expected a `timestamp,target,…` header"));
    }
    let names: Vec<String> = header[2..].iter().map(|s| s.to_string()).collect();
    let (mut ts, mut targets, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(k + 2, "wrong number of fields"));
        }
        let t = NaiveDateTime::parse_from_str(fields[0], TS_FORMAT).map_err(|_| bad(k + 2, "bad timestamp"))?;
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(k + 2, "bad number"))?;
        ts.push(t);
        targets.push(nums[0]);
        rows.push(nums[1..].to_vec());
    }
    Ok(FeatureMatrix::from_rows(names, rows, targets, ts, profile)?)
}

pub fn write_matrix(path: &Path, x: &FeatureMatrix) -> Result<(), CliError> {
    write_file(path, matrix_to_csv(x))
}

pub fn read_matrix(path: &Path, profile: Profile) -> Result<FeatureMatrix, CliError> {
    matrix_from_csv(&read_text(path)?, profile, path)
}

/// FNV-1a over the little-endian bytes of `values`, as 16 hex digits.
pub fn fingerprint(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in values.iter().flat_map(|v| v.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// FNV-1a over raw bytes.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
