//! Versioned JSON file envelopes.
//!
//! Every artifact this crate reads or writes (pipeline definitions, input
//! records, scripted completions, training sets, compiled pipelines) is a
//! JSON document whose first two fields name the format and its version, so
//! a file handed to the wrong loader fails with a precise error instead of a
//! confusing missing-field message.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("failed to read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("{path} is not valid JSON: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: expected format '{expected}', found '{found}'")]
    WrongFormat { path: String, expected: String, found: String },
    #[error("{path}: unsupported {format} version {found} (supported: {supported})")]
    WrongVersion { path: String, format: String, found: u64, supported: u32 },
    #[error("{path}: {problem}")]
    Invalid { path: String, problem: String },
}

/// Read a JSON file whose top-level `format` / `format_version` fields must
/// match, then deserialize it into `T`.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, expected_format: &str) -> Result<T, FileError> {
    let display = path.display().to_string();
    let raw = fs::read_to_string(path)
        .map_err(|source| FileError::Read { path: display.clone(), source })?;
    let value: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|source| FileError::Json { path: display.clone(), source })?;

    let found_format = value.get("format").and_then(|v| v.as_str()).unwrap_or("");
    if found_format != expected_format {
        return Err(FileError::WrongFormat {
            path: display,
            expected: expected_format.to_string(),
            found: found_format.to_string(),
        });
    }
    let found_version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found_version != u64::from(FORMAT_VERSION) {
        return Err(FileError::WrongVersion {
            path: display,
            format: expected_format.to_string(),
            found: found_version,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|source| FileError::Json { path: display, source })
}

/// Write `value` as pretty-printed JSON with a trailing newline.
pub fn write_versioned<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    let display = path.display().to_string();
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|source| FileError::Json { path: display.clone(), source })?;
    body.push('\n');
    fs::write(path, body).map_err(|source| FileError::Write { path: display, source })
}
