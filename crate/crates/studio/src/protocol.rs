//! Message headers carried in frames.
//!
//! Client to server: `hello` once, then `request`s. Server to client: one
//! `hello` reply, one `response` per request and ordered `event`s.

use polyhex::polycube::AddMode;
use polyhex::quality::ElementFilter;
use polyhex::voxel::{EditOp, EditTarget};
use polyhex::Vec3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Message {
    Hello {
        protocol: u32,
        role: String,
    },
    Request(Request),
    Response(Response),
    Event(Event),
    /// Connection-level failure (handshake rejected, unreadable frame).
    Error {
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<RunStage>,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GetState,
    Mutate,
    OptimizeStart,
    Cancel,
    Query,
    Save,
}

/// Stages that run an optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStage {
    Deform,
    Polycube,
    Phase1,
    Phase2,
    Quality,
}

impl RunStage {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Deform => "deform",
            Self::Polycube => "polycube",
            Self::Phase1 => "phase1",
            Self::Phase2 => "phase2",
            Self::Quality => "quality",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
    Busy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub status: Status,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Progress,
    StateDelta,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Position in the session's event stream, from 0.
    pub seq: u64,
    pub event: EventKind,
    #[serde(default)]
    pub payload: Value,
}

/// `mutate` payloads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mutation {
    AddCuboid { center: Vec3, half: Vec3 },
    SuggestAdd { mode: AddMode },
    Subtract,
    RemoveCuboid { id: usize },
    DuplicateCuboid { id: usize },
    TranslateCuboid { id: usize, delta: Vec3 },
    SetCuboidCenter { id: usize, center: Vec3 },
    ResizeCuboid { id: usize, half: Vec3 },
    LockCuboid { id: usize, locked: bool },
    StickySnap { id: usize, tolerance: f64 },
    Voxelize { #[serde(default)] cell_size: Option<f64> },
    VoxelEdit { edit: EditOp, target: EditTarget },
    VoxelUndo,
    BuildHex { #[serde(default)] pad: bool, #[serde(default)] allow_invalid_topology: bool },
    SetLandmark { vertex: usize, position: Vec3 },
    RemoveLandmark { vertex: usize },
    /// JSON merge patch over the current stage weights.
    SetWeights { weights: Value },
}

impl Mutation {
    pub fn is_weight_update(&self) -> bool {
        matches!(self, Self::SetWeights { .. })
    }
}

/// `query` payloads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "snake_case", deny_unknown_fields)]
pub enum Query {
    Filter { filter: ElementFilter },
    Report { #[serde(default)] samples: Option<usize> },
    Topology,
}

/// `optimize-start` payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPayload {
    #[serde(default)]
    pub steps: Option<usize>,
}

/// Apply an RFC 7386 JSON merge patch.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn message_shapes() {
        let m: Message = serde_json::from_value(json!({"type": "request", "id": 4, "command": "optimize-start", "stage": "phase1", "payload": {"steps": 3}})).unwrap();
        let Message::Request(r) = &m else { panic!() };
        assert_eq!((r.id, r.command, r.stage), (4, Command::OptimizeStart, Some(RunStage::Phase1)));
        let back = serde_json::to_value(&m).unwrap();
        assert_eq!(back["type"], "request");
        let e = serde_json::to_value(Message::Event(Event { seq: 1, event: EventKind::StateDelta, payload: json!({}) })).unwrap();
        assert_eq!(e["event"], "state-delta");
        let op: Mutation = serde_json::from_value(json!({"op": "voxel_edit", "edit": "remove", "target": {"cell": [0, 1, 2]}})).unwrap();
        assert!(matches!(op, Mutation::VoxelEdit { .. }));
        assert!(serde_json::from_value::<Mutation>(json!({"op": "remove_cuboid", "id": 1, "extra": 2})).is_err());
    }

    #[test]
    fn merge_patch_semantics() {
        let mut t = json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge_patch(&mut t, &json!({"a": {"y": 5, "z": 6}, "b": null}));
        assert_eq!(t, json!({"a": {"x": 1, "y": 5, "z": 6}}));
    }
}
