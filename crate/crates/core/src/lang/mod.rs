//! Textual domain language: parser, canonical serializer and the bundled
//! furniture domains.

mod lexer;
mod parser;
mod serialize;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::Domain;

pub use serialize::serialize;

/// Source text plus a name used in diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSource {
    pub text: String,
    pub origin: String,
}

impl DomainSource {
    pub fn new(origin: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            origin: origin.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticRule {
    DuplicateId,
    UnknownTemplate,
    UnknownAgentKind,
    UnknownPerceiveKind,
    UnknownCondition,
    UnknownEdit,
    UnknownPredicate,
    UnknownEffector,
    UndeclaredEntity,
    InvalidPlacement,
    MissingMethod,
    ArityMismatch,
    CapabilityMismatch,
    ReservedName,
    MissingGoal,
    DuplicateGoal,
}

impl fmt::Display for SemanticRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("semantic"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseErrorKind {
    Syntax,
    Semantic(SemanticRule),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub expected: Vec<String>,
    pub message: String,
    pub kind: ParseErrorKind,
}

impl ParseError {
    /// Prefixes the source origin, e.g. `oddvar.htn:3:7: ...`.
    pub fn render(&self, origin: &str) -> String {
        match self.kind {
            ParseErrorKind::Syntax => format!("{origin}:{self}"),
            ParseErrorKind::Semantic(rule) => format!("{origin}:{self} [{rule}]"),
        }
    }
}

pub fn parse(src: &DomainSource) -> Result<Domain, ParseError> {
    parser::parse_text(&src.text)
}

pub fn parse_str(text: &str) -> Result<Domain, ParseError> {
    parser::parse_text(text)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BundledError {
    #[error("unknown bundled domain `{0}` (known: oddvar, hutten, kritter, ragrund, hand_over_micro)")]
    UnknownName(String),
    #[error("bundled domain `{0}` failed to parse: {1}")]
    Parse(String, ParseError),
}

pub const BUNDLED: [&str; 5] = ["oddvar", "hutten", "kritter", "ragrund", "hand_over_micro"];

/// Source text of a bundled domain.
pub fn bundled_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "oddvar" => include_str!("../../domains/oddvar.htn"),
        "hutten" => include_str!("../../domains/hutten.htn"),
        "kritter" => include_str!("../../domains/kritter.htn"),
        "ragrund" => include_str!("../../domains/ragrund.htn"),
        "hand_over_micro" => include_str!("../../domains/hand_over_micro.htn"),
        _ => return None,
    })
}

pub fn load_bundled(name: &str) -> Result<Domain, BundledError> {
    let text = bundled_source(name).ok_or_else(|| BundledError::UnknownName(name.to_string()))?;
    parse_str(text).map_err(|e| BundledError::Parse(name.to_string(), e))
}

#[cfg(test)]
mod tests;
