//! Versioned JSON documents.
//!
//! Floats are written by `serde_json` as shortest round-trip decimals and
//! parsed with correct rounding (`float_roundtrip`), so every `f64`
//! survives a save/load cycle bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;


use crate::error::{Error, Result};

/// Checks `schema_version` and `kind` before decoding the payload.
pub(crate) fn from_versioned_str<T: DeserializeOwned>(text: &str, kind: &str, expected: u32) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    check_header(&value, kind, expected)?;
    serde_json::from_value(value).map_err(|e| Error::Schema(format!("{kind} document: {e}")))
}

pub(crate) fn check_header(value: &serde_json::Value, kind: &str, expected: u32) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Schema(format!("{kind} document must be a JSON object")))?;
    let found = obj
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema("missing or non-integer `schema_version`".into()))?;
    if found != expected as u64 {
        return Err(Error::SchemaVersion {
            found: found as u32,
            expected,
        });
    }
    match obj.get("kind").and_then(|v| v.as_str()) {
        Some(k) if k == kind => Ok(()),
        Some(k) => Err(Error::Schema(format!("expected a `{kind}` document, found `{k}`"))),
        None => Err(Error::Schema("missing `kind`".into())),
    }
}

/// Byte offset of a serde_json error position within `text`.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let mut offset = 0usize;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)) as u64;
        }
        offset += l.len();
    }
    text.len() as u64
}

pub(crate) fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

