use thiserror::Error;

use crate::action::{apply, ActionError};
use crate::state::{new_state, InteractionState};

use super::log::{EventKind, EventLog};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("log header does not describe a usable domain: {0}")]
    Domain(String),
    #[error("event {seq} at t={t}: {source}")]
    Action {
        seq: u64,
        t: f64,
        #[source]
        source: ActionError,
    },
    #[error("event {0} has a malformed action_start payload")]
    Payload(u64),
    #[error("log has no final state")]
    NoFinalState,
    #[error("replayed state differs from the logged final state")]
    Mismatch,
}

/// Re-applies every logged action start to the initial state of the logged
/// domain. Effects take hold when an action starts, so event order is
/// application order.
pub fn replay(log: &EventLog) -> Result<InteractionState, ReplayError> {
    let domain = log
        .header
        .scenario
        .domain()
        .map_err(|e| ReplayError::Domain(e.to_string()))?;
    let decl = &domain.entities;
    let mut s = new_state(decl).map_err(|e| ReplayError::Domain(e.to_string()))?;
    for e in &log.events {
        if e.kind == EventKind::ActionStart {
            let p = e.action_start().ok_or(ReplayError::Payload(e.seq))?;
            s = apply(&p.action, &s, 0.0, decl).map_err(|source| ReplayError::Action {
                seq: e.seq,
                t: e.t,
                source,
            })?;
        }
        s.clock = e.t;
    }
    Ok(s)
}

impl EventLog {
    /// Replays the log and compares with its recorded final state.
    pub fn verify_replay(&self) -> Result<InteractionState, ReplayError> {
        let expected = self.final_state.as_ref().ok_or(ReplayError::NoFinalState)?;
        let got = replay(self)?;
        if &got != expected {
            return Err(ReplayError::Mismatch);
        }
        Ok(got)
    }
}
