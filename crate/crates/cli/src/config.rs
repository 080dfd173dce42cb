//! Run configuration: a JSON parameter file overlaid with command-line
//! flags, resolved once and written next to the outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON parameter file; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed (default 0, or the file's top-level "seed").
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for fold, permutation and channel jobs.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

/// Fully resolved run: what `config.resolved.json` records.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved<P> {
    pub command: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub params: P,
}

fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
        Value::Object(m) => Ok(m),
        _ => bail!("config {} is not a JSON object", path.display()),
    }
}

/// Merges the config file (after `adapt`) with the non-null flag values of
/// `flags` and deserializes the result.
pub fn resolve<F, P>(
    command: &'static str,
    common: &Common,
    flags: &F,
    adapt: impl FnOnce(Map<String, Value>) -> Map<String, Value>,
) -> Result<Resolved<P>>
where
    F: Serialize,
    P: DeserializeOwned,
{
    let mut file = match &common.config {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    let file_seed = match file.remove("seed") {
        Some(v) => Some(v.as_u64().context("config \"seed\" must be a non-negative integer")?),
        None => None,
    };
    let mut merged = adapt(file);
    if let Value::Object(over) = serde_json::to_value(flags)? {
        for (k, v) in over {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    let params = serde_json::from_value(Value::Object(merged)).context("invalid parameters")?;
    if common.threads == 0 {
        bail!("--threads must be at least 1");
    }
    Ok(Resolved { command, seed: common.seed.or(file_seed).unwrap_or(0), threads: common.threads, params })
}

/// Creates the output directory and writes the resolved config snapshot.
pub fn prepare_out<P: Serialize>(common: &Common, resolved: &Resolved<P>) -> Result<()> {
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let path = common.out.join("config.resolved.json");
    let mut text = serde_json::to_string_pretty(resolved)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Unwraps a required path parameter.
pub fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    match v {
        Some(p) => Ok(p),
        None => bail!("missing required parameter `{name}` (flag or config file)"),
    }
}
