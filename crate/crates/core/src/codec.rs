//! Canonical JSON encoding for every persisted artifact.
//!
//! Field order follows struct declaration order and every map is a
//! `BTreeMap`, so equal values always encode to equal bytes.

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at byte {offset} (field `{path}`): {message}")]
pub struct ParseError {
    pub offset: usize,
    pub path: String,
    pub message: String,
}

pub fn canonical_serialize<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory JSON encoding is infallible");
    out.push(b'\n');
    out
}

pub fn canonical_string<T: Serialize>(value: &T) -> String {
    String::from_utf8(canonical_serialize(value)).expect("serde_json emits UTF-8")
}

pub fn parse<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ParseError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        ParseError {
            offset: byte_offset(bytes, inner.line(), inner.column()),
            path,
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|err| ParseError {
        offset: byte_offset(bytes, err.line(), err.column()),
        path: ".".into(),
        message: err.to_string(),
    })?;
    Ok(value)
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = bytes
        .split(|b| *b == b'\n')
        .take(line - 1)
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}
