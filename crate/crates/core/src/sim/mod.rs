//! Discrete-event execution of plans against a simulated or operator-driven
//! human. The robot acts on a belief state that only perception updates;
//! the human acts on ground truth.

mod human;
mod log;
mod perception;
mod replay;
mod scenario;
mod session;

use thiserror::Error;

use crate::action::ActionError;
use crate::planner::PlanError;

pub use human::Layout;
pub use log::{
    ActionEndPayload, ActionStartPayload, EventKind, EventLog, LogError, LogHeader, ReplanPayload, SimEvent,
    LOG_FORMAT, LOG_VERSION,
};
pub use perception::{
    check_available_objects, idle_reading, precise_marker, visible, PerceiveData, PerceiveResult, BOX_POLL,
    CAO_SIGMA, CONTRADICTION_DISTANCE, IDLE_CONFIRM, IDLE_POLL, PMD_SIGMA, SHEAR_EPS,
};
pub use replay::{replay, ReplayError};
pub use scenario::{Dist, DurationTable, PolicyKind, Scenario, ShearParams, MIN_DURATION};
pub use session::{Ack, HumanEvent, Rejection, Session, MAX_RECOVERIES, MAX_SESSION_TIME};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("{0}")]
    Domain(String),
    #[error("planning failed: {0}")]
    Plan(#[from] PlanError),
    #[error("action rejected by the state model: {0}")]
    Action(#[from] ActionError),
    #[error("deadlock at t={t:.2}s: {reason}")]
    Deadlock { t: f64, reason: String },
    #[error("invalid perception context: {0}")]
    InvalidContext(String),
    #[error("interactive sessions are driven through the session gateway")]
    Interactive,
}

/// Runs a non-interactive scenario to completion.
pub fn run(scenario: &Scenario) -> Result<EventLog, SimError> {
    if scenario.policy == PolicyKind::Interactive {
        return Err(SimError::Interactive);
    }
    let mut s = Session::new(scenario.clone())?;
    s.run_to_end()?;
    Ok(s.log())
}

#[cfg(test)]
mod tests;
