//! Binary container for parameter stores.
//!
//! Layout: one line of UTF-8 JSON (the header) terminated by `\n`, followed
//! by the raw little-endian `f64` payload of every entry in name order.
//! The header checksum is the SHA-256 of the header serialised with an
//! empty checksum field, followed by the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use twinseg_tensor::{ParamKind, ParameterStore, Tensor};

pub const FORMAT: &str = "twinseg-params";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint has no header line")]
    MissingHeader,
    #[error("checkpoint header is malformed: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("not a parameter checkpoint (format `{0}`)")]
    WrongFormat(String),
    #[error("inconsistent layout at `{name}`: {msg}")]
    InconsistentLayout { name: String, msg: String },
    #[error("payload truncated: header declares {expected} bytes, file holds {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("checksum mismatch")]
    ChecksumMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EntryKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Byte length within the payload.
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config_hash: String,
    entries: Vec<HeaderEntry>,
    checksum: String,
}

fn checksum(header: &Header, payload: &[u8]) -> Result<String, CheckpointError> {
    let unsigned = Header {
        checksum: String::new(),
        entries: header
            .entries
            .iter()
            .map(|e| HeaderEntry {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.shape.clone(),
                offset: e.offset,
                length: e.length,
            })
            .collect(),
        format: header.format.clone(),
        version: header.version,
        config_hash: header.config_hash.clone(),
    };
    let bytes =
        serde_json::to_vec(&unsigned).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hasher.update(payload);
    Ok(hex::encode(hasher.finalize()))
}

/// Serialises `store` to the container format.
pub fn encode(store: &ParameterStore, config_hash: &str) -> Result<Vec<u8>, CheckpointError> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, param) in store.iter() {
        let offset = payload.len();
        for v in param.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(HeaderEntry {
            name: name.to_string(),
            kind: match param.kind {
                ParamKind::Trainable => EntryKind::Trainable,
                ParamKind::Buffer => EntryKind::Buffer,
            },
            shape: param.value.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    }
    let mut header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config_hash: config_hash.to_string(),
        entries,
        checksum: String::new(),
    };
    header.checksum = checksum(&header, &payload)?;
    let mut out =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub store: ParameterStore,
}

/// Parses a container; no store is returned unless every check passes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(CheckpointError::MissingHeader)?;
    let text = std::str::from_utf8(&bytes[..newline])
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let header: Header =
        serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if header.format != FORMAT {
        return Err(CheckpointError::WrongFormat(header.format));
    }
    if header.version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: header.version,
        });
    }
    let payload = &bytes[newline + 1..];

    let mut expected_offset = 0usize;
    let mut previous: Option<&str> = None;
    for entry in &header.entries {
        let layout = |msg: String| CheckpointError::InconsistentLayout {
            name: entry.name.clone(),
            msg,
        };
        if previous.is_some_and(|p| p >= entry.name.as_str()) {
            return Err(layout("entries are not strictly name-sorted".into()));
        }
        previous = Some(&entry.name);
        if entry.shape.contains(&0) {
            return Err(layout(format!("zero extent in shape {:?}", entry.shape)));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| layout("shape overflows".into()))?;
        if entry.length != numel {
            return Err(layout(format!(
                "length {} bytes does not match shape {:?}",
                entry.length, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(layout(format!(
                "offset {} but previous entry ends at {expected_offset}",
                entry.offset
            )));
        }
        expected_offset += entry.length;
    }
    if payload.len() < expected_offset {
        return Err(CheckpointError::Truncated {
            expected: expected_offset,
            found: payload.len(),
        });
    }
    if payload.len() > expected_offset {
        return Err(CheckpointError::TrailingBytes(payload.len() - expected_offset));
    }
    if checksum(&header, payload)? != header.checksum {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut store = ParameterStore::new();
    for entry in &header.entries {
        let data = payload[entry.offset..entry.offset + entry.length]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| {
            CheckpointError::InconsistentLayout {
                name: entry.name.clone(),
                msg: e.to_string(),
            }
        })?;
        let inserted = match entry.kind {
            EntryKind::Trainable => store.insert_trainable(&entry.name, tensor),
            EntryKind::Buffer => store.insert_buffer(&entry.name, tensor),
        };
        inserted.map_err(|e| CheckpointError::InconsistentLayout {
            name: entry.name.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(Checkpoint {
        config_hash: header.config_hash,
        store,
    })
}

/// Writes atomically: the file appears complete or not at all.
pub fn save(store: &ParameterStore, config_hash: &str, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = encode(store, config_hash)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    let mut file = std::fs::File::create(&tmp).map_err(io)?;
    file.write_all(&bytes).map_err(io)?;
    file.sync_all().map_err(io)?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Byte length of the header line (including its newline) of an encoded container.
pub fn header_len(bytes: &[u8]) -> Option<usize> {
    bytes.iter().position(|&b| b == b'\n').map(|p| p + 1)
}
