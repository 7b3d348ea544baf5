//! Single-file container for serializable state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "POLYHEX\0"
//! version   u32
//! reserved  u32      0
//! manifest  u64 length + UTF-8 JSON
//! blobs     u64 length + raw bytes
//! checksum  32 bytes SHA-256 of everything before it
//! ```
//!
//! The manifest holds `format`, `version`, `kind`, a blob table and the
//! `body`: the state as JSON where every numeric array with at least
//! [`BLOB_MIN_LEN`] rows was moved into a blob and replaced by
//! `{"$blob": i}`. Blob `i` is described by `{dtype, shape, offset, len}`
//! with `dtype` one of `f64` (IEEE-754 doubles) or `u64`, row-major.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use super::IoError;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"POLYHEX\0";
pub const ARCHIVE_VERSION: u32 = 1;
/// Numeric arrays with fewer rows stay inline in the manifest.
pub const BLOB_MIN_LEN: usize = 8;
const BLOB_KEY: &str = "$blob";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F64,
    U64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    blobs: Vec<BlobEntry>,
    body: Value,
}

fn number_type(v: &Value) -> Option<Dtype> {
    match v {
        Value::Number(n) if n.is_f64() => Some(Dtype::F64),
        Value::Number(n) if n.is_u64() => Some(Dtype::U64),
        _ => None,
    }
}

/// Dtype and row width of a homogeneous numeric array (flat or of equal
/// rows), if it qualifies as a blob.
fn blob_shape(items: &[Value]) -> Option<(Dtype, Option<usize>)> {
    if items.len() < BLOB_MIN_LEN {
        return None;
    }
    if let Some(d) = number_type(&items[0]) {
        return items.iter().all(|v| number_type(v) == Some(d)).then_some((d, None));
    }
    let Value::Array(first) = &items[0] else { return None };
    let d = number_type(first.first()?)?;
    let k = first.len();
    items
        .iter()
        .all(|row| matches!(row, Value::Array(r) if r.len() == k && r.iter().all(|v| number_type(v) == Some(d))))
        .then_some((d, Some(k)))
}

fn push_number(bytes: &mut Vec<u8>, d: Dtype, v: &Value) {
    let Value::Number(n) = v else { unreachable!("checked by blob_shape") };
    match d {
        Dtype::F64 => bytes.extend_from_slice(&n.as_f64().expect("f64").to_le_bytes()),
        Dtype::U64 => bytes.extend_from_slice(&n.as_u64().expect("u64").to_le_bytes()),
    }
}

fn extract(v: Value, table: &mut Vec<BlobEntry>, bytes: &mut Vec<u8>) -> Value {
    match v {
        Value::Array(items) => match blob_shape(&items) {
            Some((dtype, width)) => {
                let offset = bytes.len();
                let shape = match width {
                    None => {
                        items.iter().for_each(|x| push_number(bytes, dtype, x));
                        vec![items.len()]
                    }
                    Some(k) => {
                        for row in &items {
                            if let Value::Array(r) = row {
                                r.iter().for_each(|x| push_number(bytes, dtype, x));
                            }
                        }
                        vec![items.len(), k]
                    }
                };
                table.push(BlobEntry { dtype, shape, offset, len: bytes.len() - offset });
                let mut m = Map::new();
                m.insert(BLOB_KEY.into(), Value::from(table.len() - 1));
                Value::Object(m)
            }
            None => Value::Array(items.into_iter().map(|x| extract(x, table, bytes)).collect()),
        },
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, x)| (k, extract(x, table, bytes))).collect()),
        other => other,
    }
}

fn corrupt(msg: impl Into<String>) -> IoError {
    IoError::Corrupt(msg.into())
}

fn inflate_blob(entry: &BlobEntry, bytes: &[u8]) -> Result<Value, IoError> {
    let raw = bytes.get(entry.offset..entry.offset + entry.len).ok_or_else(|| corrupt("blob out of range"))?;
    let count: usize = entry.shape.iter().product();
    if raw.len() != 8 * count {
        return Err(corrupt("blob length does not match its shape"));
    }
    let numbers: Vec<Value> = raw
        .chunks_exact(8)
        .map(|c| {
            let b: [u8; 8] = c.try_into().expect("8 bytes");
            match entry.dtype {
                Dtype::F64 => Number::from_f64(f64::from_le_bytes(b)).map(Value::Number).ok_or_else(|| corrupt("non-finite value")),
                Dtype::U64 => Ok(Value::from(u64::from_le_bytes(b))),
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(match entry.shape.as_slice() {
        [_] => Value::Array(numbers),
        [_, k] if *k > 0 => Value::Array(numbers.chunks(*k).map(|r| Value::Array(r.to_vec())).collect()),
        _ => return Err(corrupt("unsupported blob shape")),
    })
}

fn inflate(v: Value, table: &[BlobEntry], bytes: &[u8]) -> Result<Value, IoError> {
    match v {
        Value::Object(m) if m.len() == 1 && m.contains_key(BLOB_KEY) => {
            let i = m[BLOB_KEY].as_u64().ok_or_else(|| corrupt("bad blob reference"))? as usize;
            inflate_blob(table.get(i).ok_or_else(|| corrupt("blob reference out of range"))?, bytes)
        }
        Value::Object(m) => Ok(Value::Object(
            m.into_iter().map(|(k, x)| Ok((k, inflate(x, table, bytes)?))).collect::<Result<_, IoError>>()?,
        )),
        Value::Array(items) => Ok(Value::Array(items.into_iter().map(|x| inflate(x, table, bytes)).collect::<Result<_, _>>()?)),
        other => Ok(other),
    }
}

/// Encode `value` as an archive tagged with `kind`.
pub fn write_archive<T: Serialize>(kind: &str, value: &T) -> Result<Vec<u8>, IoError> {
    let body = serde_json::to_value(value).map_err(|e| corrupt(e.to_string()))?;
    let mut blobs = Vec::new();
    let mut table = Vec::new();
    let body = extract(body, &mut table, &mut blobs);
    let manifest = Manifest { format: "polyhex-session".into(), version: ARCHIVE_VERSION, kind: kind.into(), blobs: table, body };
    let manifest = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + manifest.len() + blobs.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    out.extend_from_slice(&blobs);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> Result<usize, IoError> {
    let b: [u8; 8] = bytes.get(at..at + 8).and_then(|s| s.try_into().ok()).ok_or(IoError::Checksum)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| IoError::Checksum)
}

/// Decode an archive written by [`write_archive`] with the same `kind`.
/// Nothing is returned unless the whole file verifies.
pub fn read_archive<T: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<T, IoError> {
    if bytes.len() < 16 || &bytes[..8] != ARCHIVE_MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version > ARCHIVE_VERSION {
        return Err(IoError::Version { found: version, supported: ARCHIVE_VERSION });
    }
    if bytes.len() < 16 + 8 + 8 + 32 {
        return Err(IoError::Checksum);
    }
    let (content, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(content).as_slice() != digest {
        return Err(IoError::Checksum);
    }
    let m_len = read_u64(content, 16)?;
    let m_end = 24usize.checked_add(m_len).ok_or(IoError::Checksum)?;
    let manifest = content.get(24..m_end).ok_or(IoError::Checksum)?;
    let b_len = read_u64(content, m_end)?;
    let blobs = content.get(m_end + 8..).ok_or(IoError::Checksum)?;
    if blobs.len() != b_len {
        return Err(corrupt("blob section length mismatch"));
    }
    let manifest: Manifest = serde_json::from_slice(manifest).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.version != version {
        return Err(corrupt("manifest version differs from header"));
    }
    if manifest.kind != kind {
        return Err(corrupt(format!("archive holds `{}`, expected `{kind}`", manifest.kind)));
    }
    let body = inflate(manifest.body, &manifest.blobs, blobs)?;
    serde_json::from_value(body).map_err(|e| corrupt(format!("state: {e}")))
}
