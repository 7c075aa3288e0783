//! JSON with sorted keys so equal values always serialise to equal bytes.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::Path;

/// Serialises through `serde_json::Value`, whose map type orders keys.
pub fn to_sorted_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|source| Error::Json {
        context: "serialise".into(),
        source,
    })?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|source| Error::Json {
        context: "serialise".into(),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn to_sorted_line<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|source| Error::Json {
        context: "serialise".into(),
        source,
    })?;
    Ok(v.to_string())
}

pub fn write_sorted<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let s = to_sorted_string(value)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}
