//! Report envelope shared by every subcommand.
//!
//! Each run writes `<out>/<command>.json` shaped as
//!
//! ```json
//! { "command": "...", "manifest": { ... }, "<command>": { ... } }
//! ```
//!
//! The manifest carries everything needed to reproduce the run: the root
//! seed, the binary version, and an echo of the effective configuration.
//! `timestamp_unix` is the only field that varies between identical runs;
//! serialization is otherwise canonical (sorted keys, no maps with
//! nondeterministic order), so reports can be compared byte for byte.

use kron_lora::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub seed: u64,
    pub version: &'static str,
    pub timestamp_unix: u64,
    /// Echo of the effective configuration: parsed CLI arguments plus, for
    /// config-driven commands, the parsed file content. Paths are omitted
    /// on purpose so reports from different output directories stay
    /// comparable.
    pub config: Value,
}

impl RunManifest {
    pub fn new(seed: u64, config: Value) -> Self {
        RunManifest {
            seed,
            version: env!("CARGO_PKG_VERSION"),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(format!("report serialization: {e}")))
}

/// Assemble the envelope and write it under `out_dir`, creating the
/// directory as needed. Returns the report path.
pub fn write<T: Serialize>(
    out_dir: &Path,
    command: &str,
    manifest: &RunManifest,
    payload: &T,
    json_to_stdout: bool,
) -> Result<PathBuf> {
    let envelope = json!({
        "command": command,
        "manifest": to_value(manifest)?,
        command: to_value(payload)?,
    });
    let mut text = serde_json::to_string_pretty(&envelope)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    text.push('\n');

    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let path = out_dir.join(format!("{command}.json"));
    std::fs::write(&path, &text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if json_to_stdout {
        print!("{text}");
    }
    Ok(path)
}
