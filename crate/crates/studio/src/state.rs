//! The client-visible state: named parts, each a JSON `meta` value plus
//! typed buffers. Clients keep a copy, apply state deltas in order and check
//! the checksum carried by each delta.

use std::collections::BTreeMap;

use polyhex::mesh::TriSurface;
use polyhex::polycube::PolyCube;
use polyhex::session::Session;
use polyhex::Vec3;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::frame::BufferData;
use crate::StudioError;

pub const PART_SESSION: &str = "session";
pub const PART_WEIGHTS: &str = "weights";
pub const PART_POLYCUBE: &str = "polycube";
pub const PART_VOXELS: &str = "voxels";
pub const PART_LANDMARKS: &str = "landmarks";
/// Input boundary: `positions` (f32 xyz) and `triangles` (u32).
pub const PART_INPUT: &str = "input";
/// Deformed input boundary: `positions`, indexed like the input triangles.
pub const PART_DEFORMED: &str = "deformed";
/// Hex connectivity: `hexes` (8 per element) and boundary `quads`, both
/// indexing hex vertices.
pub const PART_HEX: &str = "hex";
/// Current hex vertex `positions`.
pub const PART_HEX_POSITIONS: &str = "hex_positions";

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub meta: Value,
    pub buffers: BTreeMap<String, BufferData>,
}

impl Part {
    pub fn meta(meta: Value) -> Self {
        Self { meta, buffers: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, data: BufferData) -> Self {
        self.buffers.insert(name.to_string(), data);
        self
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferData> {
        self.buffers.get(name)
    }
}

/// Changed and removed parts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateDelta {
    pub parts: BTreeMap<String, Part>,
    pub removed: Vec<String>,
}

impl StateDelta {
    pub fn is_empty(&self) -> bool {
        self.parts.is_empty() && self.removed.is_empty()
    }

    pub fn single(name: &str, part: Part) -> Self {
        Self { parts: BTreeMap::from([(name.to_string(), part)]), removed: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateView {
    pub parts: BTreeMap<String, Part>,
}

/// JSON with object keys sorted at every level.
fn canonical(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                out.extend_from_slice(&serde_json::to_vec(k).expect("string"));
                out.push(b':');
                canonical(&m[k], out);
            }
            out.push(b'}');
        }
        Value::Array(a) => {
            out.push(b'[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                canonical(x, out);
            }
            out.push(b']');
        }
        other => out.extend_from_slice(&serde_json::to_vec(other).expect("scalar")),
    }
}

impl StateView {
    /// SHA-256 (hex) over every part in name order: name, canonical meta
    /// JSON, then each buffer's name, dtype, length and little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut bytes = Vec::new();
        for (name, part) in &self.parts {
            bytes.clear();
            h.update(name.as_bytes());
            h.update([0]);
            canonical(&part.meta, &mut bytes);
            h.update(&bytes);
            h.update([0]);
            for (b, data) in &part.buffers {
                h.update(b.as_bytes());
                h.update([0]);
                h.update(data.dtype().as_bytes());
                h.update((data.len() as u64).to_le_bytes());
                bytes.clear();
                data.write_le(&mut bytes);
                h.update(&bytes);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn apply(&mut self, delta: &StateDelta) {
        for name in &delta.removed {
            self.parts.remove(name);
        }
        for (name, part) in &delta.parts {
            self.parts.insert(name.clone(), part.clone());
        }
    }

    /// Parts of `newer` that differ from `self`, and parts it no longer has.
    pub fn diff(&self, newer: &StateView) -> StateDelta {
        StateDelta {
            parts: newer.parts.iter().filter(|(k, p)| self.parts.get(*k) != Some(p)).map(|(k, p)| (k.clone(), p.clone())).collect(),
            removed: self.parts.keys().filter(|k| !newer.parts.contains_key(*k)).cloned().collect(),
        }
    }

    pub fn from_session(s: &Session) -> Result<Self, StudioError> {
        let mut parts = BTreeMap::new();
        let hex = s.hex.as_ref();
        parts.insert(
            PART_SESSION.into(),
            Part::meta(json!({
                "cursor": s.cursor,
                "seed": s.seeds.master,
                "padded": hex.map(|h| h.padded),
                "topology_overridden": hex.map(|h| h.topology_overridden),
            })),
        );
        parts.insert(PART_WEIGHTS.into(), Part::meta(serde_json::to_value(s.weights())?));
        parts.insert(PART_POLYCUBE.into(), polycube_part(&s.polycube)?);
        if let Some(g) = &s.voxels {
            parts.insert(
                PART_VOXELS.into(),
                Part::meta(json!({
                    "cell_size": g.cell_size,
                    "origin": g.origin,
                    "cells": g.occupied,
                    "undo_depth": g.log.len(),
                })),
            );
        }
        let pins: Vec<Value> = s.landmarks.0.iter().map(|(v, p)| json!([v, p])).collect();
        parts.insert(PART_LANDMARKS.into(), Part::meta(json!({ "pins": pins })));

        let surface = s.input.boundary()?;
        parts.insert(
            PART_INPUT.into(),
            Part::meta(json!({"vertices": surface.vertices.len(), "triangles": surface.faces.len()}))
                .with("positions", f32_positions(&surface.vertices))
                .with("triangles", u32_indices(surface.faces.iter().flatten())),
        );
        parts.insert(PART_DEFORMED.into(), deformed_part(&surface, &s.deformation.positions));
        if let (Some(h), Some(current)) = (hex, s.current_hex()) {
            let quads = h.rest.boundary()?;
            parts.insert(
                PART_HEX.into(),
                Part::meta(json!({"vertices": h.rest.vertices().len(), "hexes": h.rest.hexes().len()}))
                    .with("hexes", u32_indices(h.rest.hexes().iter().flatten()))
                    .with("quads", u32_indices(quads.faces.iter().flatten().map(|&i| &quads.volume_index[i]))),
            );
            parts.insert(PART_HEX_POSITIONS.into(), positions_part(current.vertices()));
        }
        Ok(Self { parts })
    }
}

pub fn f32_positions(points: &[Vec3]) -> BufferData {
    BufferData::F32(points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect())
}

fn u32_indices<'a>(ids: impl Iterator<Item = &'a usize>) -> BufferData {
    BufferData::U32(ids.map(|&i| u32::try_from(i).expect("index fits u32")).collect())
}

pub fn positions_part(points: &[Vec3]) -> Part {
    Part::meta(json!({"vertices": points.len()})).with("positions", f32_positions(points))
}

/// Deformed positions of the input boundary vertices.
pub fn deformed_part(input_boundary: &TriSurface, volume_positions: &[Vec3]) -> Part {
    let pts: Vec<Vec3> = input_boundary.volume_index.iter().map(|&v| volume_positions[v]).collect();
    positions_part(&pts)
}

pub fn polycube_part(pc: &PolyCube) -> Result<Part, StudioError> {
    Ok(Part::meta(json!({ "cuboids": serde_json::to_value(&pc.cuboids)? })))
}

/// Wire form of `parts`: `{name: {"meta": …, "buffers": {buffer: index}}}`,
/// appending the buffers to `table`.
pub fn encode_parts(parts: &BTreeMap<String, Part>, table: &mut Vec<BufferData>) -> Value {
    let mut out = serde_json::Map::new();
    for (name, p) in parts {
        let mut bufs = serde_json::Map::new();
        for (b, data) in &p.buffers {
            bufs.insert(b.clone(), json!(table.len()));
            table.push(data.clone());
        }
        out.insert(name.clone(), json!({"meta": p.meta, "buffers": bufs}));
    }
    Value::Object(out)
}

pub fn decode_parts(v: &Value, table: &[BufferData]) -> Result<BTreeMap<String, Part>, StudioError> {
    let bad = |m: String| StudioError::Protocol(m);
    let obj = v.as_object().ok_or_else(|| bad("parts must be an object".into()))?;
    let mut parts = BTreeMap::new();
    for (name, p) in obj {
        let meta = p.get("meta").cloned().unwrap_or(Value::Null);
        let mut buffers = BTreeMap::new();
        if let Some(bufs) = p.get("buffers").and_then(Value::as_object) {
            for (b, idx) in bufs {
                let i = idx.as_u64().ok_or_else(|| bad(format!("part {name}: bad buffer index")))? as usize;
                let data = table.get(i).ok_or_else(|| bad(format!("part {name}: buffer {i} missing")))?;
                buffers.insert(b.clone(), data.clone());
            }
        }
        parts.insert(name.clone(), Part { meta, buffers });
    }
    Ok(parts)
}

pub fn encode_delta(delta: &StateDelta, checksum: &str, table: &mut Vec<BufferData>) -> Value {
    json!({"parts": encode_parts(&delta.parts, table), "removed": delta.removed, "checksum": checksum})
}

pub fn decode_delta(v: &Value, table: &[BufferData]) -> Result<(StateDelta, String), StudioError> {
    let parts = decode_parts(v.get("parts").unwrap_or(&json!({})), table)?;
    let removed = match v.get("removed") {
        Some(r) => serde_json::from_value(r.clone())?,
        None => Vec::new(),
    };
    let checksum = v.get("checksum").and_then(Value::as_str).unwrap_or_default().to_string();
    Ok((StateDelta { parts, removed }, checksum))
}
