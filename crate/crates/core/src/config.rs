//! Loading configuration files (`.toml` or `.json`).

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        }),
        _ => toml::from_str(&text).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        }),
    }
}

/// Writes `bytes` to `path` via a temporary sibling and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
