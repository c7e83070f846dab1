//! Interaction-state model, HTN planner, domain language, collaboration
//! simulator and fluency metrics for human-robot assembly.

pub mod action;
pub mod lang;
pub mod metrics;
pub mod planner;
pub mod sim;
pub mod state;
