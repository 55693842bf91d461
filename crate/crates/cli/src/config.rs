//! Optional JSON run configuration. Flags override the file; the file
//! overrides built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: Option<String>,
    pub scale: Option<String>,
    pub seed: Option<u64>,
    /// PDE parameter overrides, e.g. `{"D": 0.002}`.
    pub params: Option<BTreeMap<String, f64>>,
    pub derivative_scale: Option<f64>,
    pub model: Option<String>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub horizon: Option<usize>,
    pub lr: Option<f64>,
    pub solver: Option<String>,
    pub dt: Option<f64>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub eval_batches: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub split: Option<String>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

/// First of `flag`, `file`, then the default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// First of `flag` and `file`, or an error naming the missing option.
pub fn need<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T, String> {
    flag.or(file).ok_or_else(|| format!("--{name} is required (as a flag or in --config)"))
}
