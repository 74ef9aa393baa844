//! Output files (written atomically) and input loading.

use crate::Failure;
use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use stlab::dataspace::FinitePopulation;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("output");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).context("serializing JSON")?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<(), Failure> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Builds a CSV in memory from a header and rows of already formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).context("writing CSV header")?;
    for r in rows {
        w.write_record(r).context("writing CSV row")?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing CSV: {e}"))?;
    write_atomic(path, &bytes)
}

pub fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn opt_cell(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

/// Reads a JSON config; unknown keys are rejected by the target type.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Reads a population from either a bare population JSON or a `gen` output
/// file (`{"population": ...}`).
pub fn load_population(path: &Path) -> Result<FinitePopulation, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("population") {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
