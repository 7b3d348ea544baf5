//! Length-prefixed frames: a JSON header plus a binary tail of typed
//! little-endian buffers.
//!
//! ```text
//! u32 LE   N, byte length of everything below
//! u32 LE   H, byte length of the header
//! H bytes  header, UTF-8 JSON object with a "buffers" table
//! N-4-H    tail, the buffers back to back
//! ```
//!
//! The `buffers` table lists `{"dtype": "f32" | "u32", "len": count}` in
//! tail order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::StudioError;

/// Upper bound on a frame body.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub enum BufferData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl BufferData {
    pub fn dtype(&self) -> &'static str {
        match self {
            Self::F32(_) => "f32",
            Self::U32(_) => "u32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Self::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Self::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            Self::F32(v) => Some(v),
            Self::U32(_) => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match self {
            Self::U32(v) => Some(v),
            Self::F32(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    dtype: String,
    len: usize,
}

/// One decoded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub header: Value,
    pub buffers: Vec<BufferData>,
}

impl Frame {
    pub fn json(header: Value) -> Self {
        Self { header, buffers: Vec::new() }
    }

    pub fn encode(&self) -> Result<Vec<u8>, StudioError> {
        let mut header = self.header.clone();
        let Value::Object(map) = &mut header else {
            return Err(StudioError::Protocol("frame header must be a JSON object".into()));
        };
        let table: Vec<BufferEntry> = self.buffers.iter().map(|b| BufferEntry { dtype: b.dtype().into(), len: b.len() }).collect();
        map.insert("buffers".into(), serde_json::to_value(table)?);
        let head = serde_json::to_vec(&header)?;
        let mut tail = Vec::new();
        self.buffers.iter().for_each(|b| b.write_le(&mut tail));
        let n = 4 + head.len() + tail.len();
        if n > MAX_FRAME {
            return Err(StudioError::Protocol(format!("frame of {n} bytes exceeds the limit")));
        }
        let mut out = Vec::with_capacity(4 + n);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&tail);
        Ok(out)
    }

    pub fn decode(body: &[u8]) -> Result<Self, StudioError> {
        let bad = |m: &str| StudioError::Protocol(m.to_string());
        let h = u32::from_le_bytes(body.get(..4).ok_or_else(|| bad("short frame"))?.try_into().expect("4 bytes")) as usize;
        let head = body.get(4..4 + h).ok_or_else(|| bad("header length exceeds frame"))?;
        let mut header: Value = serde_json::from_slice(head)?;
        let table: Vec<BufferEntry> = match header.as_object_mut().and_then(|m| m.remove("buffers")) {
            Some(t) => serde_json::from_value(t)?,
            None => Vec::new(),
        };
        let mut tail = &body[4 + h..];
        let mut buffers = Vec::with_capacity(table.len());
        for e in table {
            let bytes = e.len.checked_mul(4).ok_or_else(|| bad("buffer too large"))?;
            if tail.len() < bytes {
                return Err(bad("buffer exceeds frame"));
            }
            let (raw, rest) = tail.split_at(bytes);
            tail = rest;
            let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
            buffers.push(match e.dtype.as_str() {
                "f32" => BufferData::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => BufferData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(bad(&format!("unknown dtype `{other}`"))),
            });
        }
        if !tail.is_empty() {
            return Err(bad("trailing bytes after the last buffer"));
        }
        Ok(Self { header, buffers })
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), StudioError> {
    w.write_all(&frame.encode()?)?;
    w.flush()?;
    Ok(())
}

/// Read one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, StudioError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    if !(4..=MAX_FRAME).contains(&n) {
        return Err(StudioError::Protocol(format!("bad frame length {n}")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Frame::decode(&body).map(Some)
}
