//! Message envelope and payload schemas of the `/session` protocol.
//!
//! Every frame is one JSON object:
//! `{"type": ..., "session_id": ..., "seq": ..., "protocol_version": "1", "payload": {...}}`.
//! Unknown fields are ignored on decode.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use coplan_core::action::{ActionTemplate, CharacteristicEdit, PrimitiveAction, WaitCondition};
use coplan_core::metrics::FluencyReport;
use coplan_core::planner::{DecompositionTree, PlanStep};
use coplan_core::sim::{HumanEvent, PerceiveResult};
use coplan_core::state::{AgentId, EntityDeclarations, FeatureFamily, InteractionState, ObjectId, RegionId};

pub const PROTOCOL_VERSION: &str = "1";

/// Payload of each message type. Server-to-client types come first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Body {
    Hello {
        domain: String,
        protocol_version: String,
        entities: EntityDeclarations,
    },
    State {
        t: f64,
        paused: bool,
        speed: f64,
        finished: bool,
        state: InteractionState,
    },
    Plan {
        t: f64,
        cursor: usize,
        steps: Vec<PlanStep>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tree: Option<DecompositionTree>,
    },
    ActionStart {
        t: f64,
        agent: AgentId,
        step: Option<usize>,
        action: PrimitiveAction,
    },
    ActionEnd {
        t: f64,
        agent: AgentId,
        step: Option<usize>,
        template: ActionTemplate,
        #[serde(default)]
        timed_out: bool,
    },
    PerceiveResult {
        t: f64,
        agent: AgentId,
        result: PerceiveResult,
    },
    WaitSatisfied {
        t: f64,
        agent: AgentId,
        condition: WaitCondition,
    },
    HumanEvent {
        t: f64,
        agent: Option<AgentId>,
        event: Value,
    },
    Replan {
        t: f64,
        reason: String,
        level: usize,
        steps: usize,
    },
    Metrics {
        t: f64,
        report: FluencyReport,
    },
    GoalReached {
        t: f64,
    },
    Ack {
        seq: u64,
        t: f64,
    },
    Reject {
        seq: u64,
        violation: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        template: Option<ActionTemplate>,
        #[serde(default)]
        families: Vec<FeatureFamily>,
    },
    Error {
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
    },
    Heartbeat {
        t: f64,
    },
    HumanAction {
        template: ActionTemplate,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        object: Option<ObjectId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<RegionId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edit: Option<CharacteristicEdit>,
    },
    IdleToggle {
        flag: bool,
    },
    PullTool {},
    Pause {},
    Resume {},
    Speed {
        scale: f64,
    },
}

/// Types the server sends.
pub const SERVER_TYPES: [&str; 15] = [
    "hello",
    "state",
    "plan",
    "action_start",
    "action_end",
    "perceive_result",
    "wait_satisfied",
    "human_event",
    "replan",
    "metrics",
    "goal_reached",
    "ack",
    "reject",
    "error",
    "heartbeat",
];
/// Types a client sends.
pub const CLIENT_TYPES: [&str; 6] = ["human_action", "idle_toggle", "pull_tool", "pause", "resume", "speed"];

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "hello",
            Body::State { .. } => "state",
            Body::Plan { .. } => "plan",
            Body::ActionStart { .. } => "action_start",
            Body::ActionEnd { .. } => "action_end",
            Body::PerceiveResult { .. } => "perceive_result",
            Body::WaitSatisfied { .. } => "wait_satisfied",
            Body::HumanEvent { .. } => "human_event",
            Body::Replan { .. } => "replan",
            Body::Metrics { .. } => "metrics",
            Body::GoalReached { .. } => "goal_reached",
            Body::Ack { .. } => "ack",
            Body::Reject { .. } => "reject",
            Body::Error { .. } => "error",
            Body::Heartbeat { .. } => "heartbeat",
            Body::HumanAction { .. } => "human_action",
            Body::IdleToggle { .. } => "idle_toggle",
            Body::PullTool {} => "pull_tool",
            Body::Pause {} => "pause",
            Body::Resume {} => "resume",
            Body::Speed { .. } => "speed",
        }
    }

    /// Types a client may send.
    pub fn from_client(&self) -> bool {
        CLIENT_TYPES.contains(&self.type_name())
    }

    /// The simulator event behind an operator message, if it is one.
    pub fn human_event(&self) -> Option<HumanEvent> {
        match self {
            Body::HumanAction {
                template,
                object,
                region,
                edit,
            } => Some(HumanEvent::HumanAction {
                template: *template,
                object: object.clone(),
                region: region.clone(),
                edit: edit.clone(),
            }),
            Body::IdleToggle { flag } => Some(HumanEvent::IdleToggle { flag: *flag }),
            Body::PullTool {} => Some(HumanEvent::PullTool),
            _ => None,
        }
    }
}

fn known_type(t: &str) -> bool {
    SERVER_TYPES.contains(&t) || CLIENT_TYPES.contains(&t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub session_id: String,
    pub seq: u64,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("frame is not valid JSON: {0}")]
    Json(String),
    #[error("frame is not a JSON object")]
    NotObject,
    #[error("missing type field")]
    MissingType,
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("protocol version `{0}` is not supported (expected \"1\")")]
    Version(String),
    #[error("missing or invalid `{0}` field")]
    Field(&'static str),
    #[error("bad `{kind}` payload: {message}")]
    Payload { kind: String, message: String },
}

impl WireMessage {
    pub fn new(session_id: impl Into<String>, seq: u64, body: Body) -> Self {
        Self {
            session_id: session_id.into(),
            seq,
            body,
        }
    }

    pub fn encode(&self) -> String {
        let mut v = serde_json::to_value(&self.body).expect("message bodies serialize");
        let obj = v.as_object_mut().expect("tagged enums serialize to objects");
        obj.insert("session_id".into(), Value::String(self.session_id.clone()));
        obj.insert("seq".into(), Value::from(self.seq));
        obj.insert("protocol_version".into(), Value::String(PROTOCOL_VERSION.into()));
        obj.entry("payload").or_insert_with(|| Value::Object(Map::new()));
        v.to_string()
    }

    pub fn decode(text: &str) -> Result<Self, FrameError> {
        let v: Value = serde_json::from_str(text).map_err(|e| FrameError::Json(e.to_string()))?;
        let Value::Object(mut obj) = v else {
            return Err(FrameError::NotObject);
        };
        let kind = match obj.remove("type") {
            Some(Value::String(s)) => s,
            _ => return Err(FrameError::MissingType),
        };
        match obj.get("protocol_version") {
            Some(Value::String(s)) if s == PROTOCOL_VERSION => {}
            Some(other) => {
                let shown = other.as_str().map(str::to_string).unwrap_or_else(|| other.to_string());
                return Err(FrameError::Version(shown));
            }
            None => return Err(FrameError::Field("protocol_version")),
        }
        if !known_type(&kind) {
            return Err(FrameError::UnknownType(kind));
        }
        let seq = obj.get("seq").and_then(Value::as_u64).ok_or(FrameError::Field("seq"))?;
        let session_id = match obj.get("session_id") {
            None => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(FrameError::Field("session_id")),
        };
        let payload = obj.remove("payload").unwrap_or_else(|| Value::Object(Map::new()));
        let tagged = serde_json::json!({"type": kind, "payload": payload});
        let body = serde_json::from_value(tagged).map_err(|e| FrameError::Payload {
            kind: kind.clone(),
            message: e.to_string(),
        })?;
        Ok(Self { session_id, seq, body })
    }
}
