//! Versioned parameter archive.
//!
//! A UTF-8 manifest (format version, configuration echo, shape table)
//! terminated by an `end` line, followed by every tensor's values as raw
//! little-endian f64 in manifest order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{ModelConfig, NetworkParams};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &str = "odefuse-params";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end\n";

pub fn write_params(params: &NetworkParams) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&params.config)
        .map_err(|e| Error::Archive(format!("cannot encode config: {e}")))?;
    let mut head = String::new();
    let _ = writeln!(head, "{ARCHIVE_MAGIC}");
    let _ = writeln!(head, "format_version {FORMAT_VERSION}");
    let _ = writeln!(head, "n_features {}", params.n_features);
    let _ = writeln!(head, "config {config}");
    let _ = writeln!(head, "tensors {}", params.tensors.len());
    for (name, t) in &params.tensors {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(head, "tensor {name} {} {}", shape.join(","), t.len());
    }
    head.push_str(END);
    let mut out = head.into_bytes();
    for t in params.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_params(bytes: &[u8]) -> Result<NetworkParams> {
    let bad = |m: String| Error::Archive(m);
    let marker = format!("\n{END}");
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .ok_or_else(|| bad("manifest terminator not found".into()))?;
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|_| bad("manifest is not UTF-8".into()))?;
    let mut body = &bytes[split + marker.len()..];

    let mut lines = manifest.lines();
    if lines.next() != Some(ARCHIVE_MAGIC) {
        return Err(bad("not a parameter archive".into()));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
    };
    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| bad("bad format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let n_features: usize = field("n_features")?
        .parse()
        .map_err(|_| bad("bad feature count".into()))?;
    let config: ModelConfig = serde_json::from_str(&field("config")?)
        .map_err(|e| bad(format!("bad config echo: {e}")))?;
    let count: usize = field("tensors")?.parse().map_err(|_| bad("bad tensor count".into()))?;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let spec = field("tensor")?;
        let parts: Vec<&str> = spec.split(' ').collect();
        let [name, shape, len] = parts[..] else {
            return Err(bad(format!("malformed tensor line `{spec}`")));
        };
        let shape = shape
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape for `{name}`")))?;
        let len: usize = len.parse().map_err(|_| bad(format!("bad length for `{name}`")))?;
        if body.len() < len * 8 {
            return Err(bad(format!("value block for `{name}` is truncated")));
        }
        let (block, rest) = body.split_at(len * 8);
        body = rest;
        let data = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
        tensors.insert(name.to_string(), t);
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes after the last block", body.len())));
    }
    let params = NetworkParams {
        config,
        n_features,
        tensors,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_params(params: &NetworkParams, path: &Path) -> Result<()> {
    let bytes = write_params(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params(&bytes)
}
