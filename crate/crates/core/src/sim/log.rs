//! Line-delimited event log: one header line, one line per event, one
//! closing line carrying the final ground-truth state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionTemplate, PrimitiveAction};
use crate::state::{AgentId, AgentKind, InteractionState};

use super::perception::PerceiveResult;
use super::scenario::Scenario;

pub const LOG_FORMAT: &str = "coplan-event-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ActionStart,
    ActionEnd,
    PerceiveResult,
    HumanEvent,
    Replan,
    GoalReached,
    WaitSatisfied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub agent: Option<AgentId>,
    pub payload: serde_json::Value,
}

/// Payload of an `action_start` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStartPayload {
    /// Plan step index; `None` for actions the executor inserted.
    pub step: Option<usize>,
    pub action: PrimitiveAction,
}

/// Payload of an `action_end` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEndPayload {
    pub step: Option<usize>,
    pub template: ActionTemplate,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanPayload {
    pub reason: String,
    /// How many ancestors up the decomposition the repair restarted.
    pub level: usize,
    pub steps: usize,
}

impl SimEvent {
    pub fn action_start(&self) -> Option<ActionStartPayload> {
        (self.kind == EventKind::ActionStart).then(|| serde_json::from_value(self.payload.clone()).ok())?
    }

    pub fn action_end(&self) -> Option<ActionEndPayload> {
        (self.kind == EventKind::ActionEnd).then(|| serde_json::from_value(self.payload.clone()).ok())?
    }

    pub fn perceive_result(&self) -> Option<PerceiveResult> {
        (self.kind == EventKind::PerceiveResult).then(|| serde_json::from_value(self.payload.clone()).ok())?
    }

    pub fn replan(&self) -> Option<ReplanPayload> {
        (self.kind == EventKind::Replan).then(|| serde_json::from_value(self.payload.clone()).ok())?
    }

    /// The flag of an `idle_toggle` human event.
    pub fn idle_toggle(&self) -> Option<bool> {
        if self.kind != EventKind::HumanEvent || self.payload.get("event")?.as_str()? != "idle_toggle" {
            return None;
        }
        self.payload.get("flag")?.as_bool()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub log: String,
    pub version: u32,
    pub scenario: Scenario,
    pub agents: BTreeMap<AgentId, AgentKind>,
    pub plan_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FinalLine {
    final_state: InteractionState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub header: LogHeader,
    pub events: Vec<SimEvent>,
    pub final_state: Option<InteractionState>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LogError {
    #[error("event log is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("unsupported log `{0}` version {1}")]
    Version(String, u32),
}

impl EventLog {
    /// Session length: time of the last event.
    pub fn span(&self) -> f64 {
        self.events.last().map(|e| e.t).unwrap_or(0.0)
    }

    pub fn goal_reached(&self) -> bool {
        self.events.iter().any(|e| e.kind == EventKind::GoalReached)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        out.push_str(&json_line(&self.header));
        out.push('\n');
        for e in &self.events {
            out.push_str(&json_line(e));
            out.push('\n');
        }
        if let Some(s) = &self.final_state {
            out.push_str(&json_line(&FinalLine { final_state: s.clone() }));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self, LogError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LogError::Empty)?;
        let header: LogHeader = serde_json::from_str(first).map_err(|e| LogError::Line {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.log != LOG_FORMAT || header.version != LOG_VERSION {
            return Err(LogError::Version(header.log, header.version));
        }
        let mut events = Vec::new();
        let mut final_state = None;
        for (i, l) in lines {
            let err = |e: serde_json::Error| LogError::Line {
                line: i + 1,
                message: e.to_string(),
            };
            if final_state.is_some() {
                return Err(LogError::Line {
                    line: i + 1,
                    message: "content after the final state".into(),
                });
            }
            let v: serde_json::Value = serde_json::from_str(l).map_err(err)?;
            if v.get("final_state").is_some() {
                let f: FinalLine = serde_json::from_value(v).map_err(err)?;
                final_state = Some(f.final_state);
            } else {
                events.push(serde_json::from_value(v).map_err(err)?);
            }
        }
        Ok(Self {
            header,
            events,
            final_state,
        })
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("log records serialize")
}
