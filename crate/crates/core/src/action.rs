//! The six action templates and their precondition/effect contract.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{
    reachable, AgentId, EffectorRef, EndEffectorId, EntityDeclarations, FeatureFamily,
    InteractionState, Location, ObjectId,
};

/// Euclidean distance under which an end-effector counts as "at" an object.
pub const GRASP_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTemplate {
    Grasp,
    Release,
    Move,
    Manipulate,
    Wait,
    Perceive,
}

impl ActionTemplate {
    pub const ALL: [ActionTemplate; 6] = [
        ActionTemplate::Grasp,
        ActionTemplate::Release,
        ActionTemplate::Move,
        ActionTemplate::Manipulate,
        ActionTemplate::Wait,
        ActionTemplate::Perceive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionTemplate::Grasp => "grasp",
            ActionTemplate::Release => "release",
            ActionTemplate::Move => "move",
            ActionTemplate::Manipulate => "manipulate",
            ActionTemplate::Wait => "wait",
            ActionTemplate::Perceive => "perceive",
        }
    }
}

impl fmt::Display for ActionTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionTemplate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionTemplate::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown template `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceiveKind {
    CheckAvailableObjects,
    PreciseMarkerDetection,
    DetectEmptyBox,
    DetectToolPulling,
    DetectIdle,
}

impl PerceiveKind {
    pub const ALL: [PerceiveKind; 5] = [
        PerceiveKind::CheckAvailableObjects,
        PerceiveKind::PreciseMarkerDetection,
        PerceiveKind::DetectEmptyBox,
        PerceiveKind::DetectToolPulling,
        PerceiveKind::DetectIdle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerceiveKind::CheckAvailableObjects => "check_available_objects",
            PerceiveKind::PreciseMarkerDetection => "precise_marker_detection",
            PerceiveKind::DetectEmptyBox => "detect_empty_box",
            PerceiveKind::DetectToolPulling => "detect_tool_pulling",
            PerceiveKind::DetectIdle => "detect_idle",
        }
    }
}

impl fmt::Display for PerceiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerceiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PerceiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown perceive kind `{s}`"))
    }
}

/// Named predicate a Wait blocks on; resolved by the simulator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum WaitCondition {
    PullSignal,
    HumanIdle,
    BoxEmpty(ObjectId),
    ObjectAvailable(ObjectId),
}

impl WaitCondition {
    pub fn object(&self) -> Option<&ObjectId> {
        match self {
            WaitCondition::BoxEmpty(o) | WaitCondition::ObjectAvailable(o) => Some(o),
            _ => None,
        }
    }
}

impl fmt::Display for WaitCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaitCondition::PullSignal => f.write_str("pull_signal"),
            WaitCondition::HumanIdle => f.write_str("human_idle"),
            WaitCondition::BoxEmpty(o) => write!(f, "box_empty({o})"),
            WaitCondition::ObjectAvailable(o) => write!(f, "object_available({o})"),
        }
    }
}

impl From<WaitCondition> for String {
    fn from(c: WaitCondition) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for WaitCondition {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Splits `name(arg)` into its parts; a bare `name` yields no argument.
fn split_call(s: &str) -> Option<(&str, Option<&str>)> {
    match s.find('(') {
        None => Some((s.trim(), None)),
        Some(i) => {
            let inner = s[i + 1..].strip_suffix(')')?;
            Some((s[..i].trim(), Some(inner.trim())))
        }
    }
}

impl FromStr for WaitCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown wait condition `{s}`");
        match split_call(s).ok_or_else(bad)? {
            ("pull_signal", None) => Ok(WaitCondition::PullSignal),
            ("human_idle", None) => Ok(WaitCondition::HumanIdle),
            ("box_empty", Some(o)) if !o.is_empty() => Ok(WaitCondition::BoxEmpty(o.into())),
            ("object_available", Some(o)) if !o.is_empty() => {
                Ok(WaitCondition::ObjectAvailable(o.into()))
            }
            _ => Err(bad()),
        }
    }
}

/// Declarative effect of a Manipulate on the object characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CharacteristicEdit {
    Assemble,
    Disassemble,
    /// Removes one item from a container.
    Take,
    /// Adds a delta to the internal degree of freedom (e.g. screwdriver turns).
    Dof(f64),
    Set { key: String, value: String },
}

impl fmt::Display for CharacteristicEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CharacteristicEdit::Assemble => f.write_str("assemble"),
            CharacteristicEdit::Disassemble => f.write_str("disassemble"),
            CharacteristicEdit::Take => f.write_str("take"),
            CharacteristicEdit::Dof(d) => write!(f, "dof({d})"),
            CharacteristicEdit::Set { key, value } => write!(f, "set({key}, {value})"),
        }
    }
}

impl From<CharacteristicEdit> for String {
    fn from(e: CharacteristicEdit) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for CharacteristicEdit {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for CharacteristicEdit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown manipulate edit `{s}`");
        match split_call(s).ok_or_else(bad)? {
            ("assemble", None) => Ok(CharacteristicEdit::Assemble),
            ("disassemble", None) => Ok(CharacteristicEdit::Disassemble),
            ("take", None) => Ok(CharacteristicEdit::Take),
            ("dof", Some(d)) => d
                .parse::<f64>()
                .ok()
                .filter(|d| d.is_finite())
                .map(CharacteristicEdit::Dof)
                .ok_or_else(bad),
            ("set", Some(kv)) => {
                let (k, v) = kv.split_once(',').ok_or_else(bad)?;
                let (k, v) = (k.trim(), v.trim());
                if k.is_empty() || v.is_empty() {
                    return Err(bad());
                }
                Ok(CharacteristicEdit::Set {
                    key: k.into(),
                    value: v.into(),
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveAction {
    pub template: ActionTemplate,
    pub agent: AgentId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effector: Option<EndEffectorId>,
    /// For Move this is the object the target was bound from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Location>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceive_kind: Option<PerceiveKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_condition: Option<WaitCondition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manip_effect: Option<CharacteristicEdit>,
}

impl PrimitiveAction {
    fn bare(template: ActionTemplate, agent: &str) -> Self {
        Self {
            template,
            agent: agent.into(),
            effector: None,
            object: None,
            target: None,
            perceive_kind: None,
            wait_condition: None,
            manip_effect: None,
        }
    }

    pub fn grasp(agent: &str, effector: &str, object: &str) -> Self {
        Self {
            effector: Some(effector.into()),
            object: Some(object.into()),
            ..Self::bare(ActionTemplate::Grasp, agent)
        }
    }

    pub fn release(agent: &str, effector: &str, object: &str) -> Self {
        Self {
            effector: Some(effector.into()),
            object: Some(object.into()),
            ..Self::bare(ActionTemplate::Release, agent)
        }
    }

    pub fn move_to(agent: &str, effector: &str, target: Location) -> Self {
        Self {
            effector: Some(effector.into()),
            target: Some(target),
            ..Self::bare(ActionTemplate::Move, agent)
        }
    }

    pub fn perceive(agent: &str, kind: PerceiveKind) -> Self {
        Self {
            perceive_kind: Some(kind),
            ..Self::bare(ActionTemplate::Perceive, agent)
        }
    }

    pub fn wait(agent: &str, condition: WaitCondition) -> Self {
        Self {
            wait_condition: Some(condition),
            ..Self::bare(ActionTemplate::Wait, agent)
        }
    }

    pub fn manipulate(agent: &str, object: &str, edit: CharacteristicEdit) -> Self {
        Self {
            object: Some(object.into()),
            manip_effect: Some(edit),
            ..Self::bare(ActionTemplate::Manipulate, agent)
        }
    }

    pub fn effector_ref(&self) -> Option<EffectorRef> {
        self.effector.as_ref().map(|e| EffectorRef {
            agent: self.agent.clone(),
            effector: e.clone(),
        })
    }

    /// Checks that the template's required fields are present.
    pub fn well_formed(&self) -> Result<(), ActionError> {
        let missing = |field: &'static str| ActionError::Malformed {
            template: self.template,
            field,
        };
        match self.template {
            ActionTemplate::Grasp | ActionTemplate::Release => {
                self.effector.as_ref().ok_or_else(|| missing("effector"))?;
                self.object.as_ref().ok_or_else(|| missing("object"))?;
            }
            ActionTemplate::Move => {
                self.effector.as_ref().ok_or_else(|| missing("effector"))?;
                self.target.as_ref().ok_or_else(|| missing("target"))?;
            }
            ActionTemplate::Perceive => {
                self.perceive_kind.ok_or_else(|| missing("perceive_kind"))?;
            }
            ActionTemplate::Wait => {
                self.wait_condition
                    .as_ref()
                    .ok_or_else(|| missing("wait_condition"))?;
            }
            ActionTemplate::Manipulate => {
                self.object.as_ref().ok_or_else(|| missing("object"))?;
                self.manip_effect
                    .as_ref()
                    .ok_or_else(|| missing("manip_effect"))?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for PrimitiveAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.agent;
        let e = self.effector.as_ref().map(|e| e.as_str()).unwrap_or("?");
        let o = self.object.as_ref().map(|o| o.as_str()).unwrap_or("?");
        match self.template {
            ActionTemplate::Grasp | ActionTemplate::Release => {
                write!(f, "{}({a}, {e}, {o})", self.template)
            }
            ActionTemplate::Move => {
                let target = match (&self.object, &self.target) {
                    (Some(o), _) => o.to_string(),
                    (None, Some(t)) => t.region.to_string(),
                    (None, None) => "?".into(),
                };
                write!(f, "move({a}, {e}, {target})")
            }
            ActionTemplate::Perceive => {
                let k = self.perceive_kind.map(|k| k.name()).unwrap_or("?");
                match &self.object {
                    Some(o) => write!(f, "perceive({a}, {k}, {o})"),
                    None => write!(f, "perceive({a}, {k})"),
                }
            }
            ActionTemplate::Wait => match &self.wait_condition {
                Some(c) => write!(f, "wait({a}, {c})"),
                None => write!(f, "wait({a}, ?)"),
            },
            ActionTemplate::Manipulate => match &self.manip_effect {
                Some(m) => write!(f, "manipulate({a}, {o}, {m})"),
                None => write!(f, "manipulate({a}, {o}, ?)"),
            },
        }
    }
}

/// Which templates each agent may execute.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CapabilityProfile(pub BTreeMap<AgentId, BTreeSet<ActionTemplate>>);

impl CapabilityProfile {
    pub fn from_decl(decl: &EntityDeclarations) -> Self {
        Self(
            decl.agents
                .iter()
                .map(|a| (a.id.clone(), a.caps.iter().copied().collect()))
                .collect(),
        )
    }

    pub fn allows(&self, agent: &AgentId, template: ActionTemplate) -> bool {
        self.0
            .get(agent)
            .map(|caps| caps.contains(&template))
            .unwrap_or(false)
    }

    pub fn robot_default() -> BTreeSet<ActionTemplate> {
        use ActionTemplate::*;
        BTreeSet::from([Grasp, Release, Move, Perceive, Wait])
    }

    pub fn human_default() -> BTreeSet<ActionTemplate> {
        ActionTemplate::ALL.into_iter().collect()
    }
}

/// A single failed feature check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub families: Vec<FeatureFamily>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fams: Vec<String> = self.families.iter().map(|f| f.to_string()).collect();
        write!(f, "{}: {}", fams.join("/"), self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Ok,
    Violated(Vec<Violation>),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn families(&self) -> BTreeSet<FeatureFamily> {
        match self {
            Verdict::Ok => BTreeSet::new(),
            Verdict::Violated(vs) => vs.iter().flat_map(|v| v.families.iter().copied()).collect(),
        }
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            Verdict::Ok => &[],
            Verdict::Violated(vs) => vs,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Ok => f.write_str("ok"),
            Verdict::Violated(vs) => {
                let parts: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
                f.write_str(&parts.join("; "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("agent `{agent}` is not capable of {template}")]
    Capability {
        agent: AgentId,
        template: ActionTemplate,
    },
    #[error("{template} action is missing its {field}")]
    Malformed {
        template: ActionTemplate,
        field: &'static str,
    },
    #[error("unknown {kind} `{id}`")]
    UnknownEntity { kind: &'static str, id: String },
    #[error("precondition violated: {0}")]
    Precondition(Verdict),
    #[error("{0} is marked as holding but no object records it as a holder")]
    HeldObjectMissing(EffectorRef),
}

fn violation(families: &[FeatureFamily], detail: impl Into<String>) -> Violation {
    Violation {
        families: families.to_vec(),
        detail: detail.into(),
    }
}

/// Resolved entity references for an action, checked against the state.
struct Bound<'a> {
    eff: Option<EffectorRef>,
    object: Option<&'a ObjectId>,
}

fn resolve<'a>(
    action: &'a PrimitiveAction,
    state: &InteractionState,
    decl: &EntityDeclarations,
) -> Result<Bound<'a>, ActionError> {
    action.well_formed()?;
    let agent = decl
        .agent(&action.agent)
        .ok_or_else(|| ActionError::UnknownEntity {
            kind: "agent",
            id: action.agent.0.clone(),
        })?;
    if !agent.caps.contains(&action.template) {
        return Err(ActionError::Capability {
            agent: action.agent.clone(),
            template: action.template,
        });
    }
    let eff = action.effector_ref();
    if let Some(e) = &eff {
        if !state.eea.contains_key(e) {
            return Err(ActionError::UnknownEntity {
                kind: "end-effector",
                id: e.to_string(),
            });
        }
    }
    let object = match action.template {
        // Perceive and Move carry the object only as a reference.
        ActionTemplate::Perceive | ActionTemplate::Move | ActionTemplate::Wait => None,
        _ => action.object.as_ref(),
    };
    if let Some(o) = object {
        if !state.op.contains_key(o) {
            return Err(ActionError::UnknownEntity {
                kind: "object",
                id: o.0.clone(),
            });
        }
    }
    if let Some(t) = &action.target {
        if decl.region(&t.region).is_none() {
            return Err(ActionError::UnknownEntity {
                kind: "region",
                id: t.region.0.clone(),
            });
        }
    }
    Ok(Bound { eff, object })
}

/// Whether `eff` may grasp `obj` given current holders: the object must be
/// free, or be a handover object held by exactly one agent of the other kind
/// while lying in a region the grasping agent reaches.
fn grasp_eligible(
    eff: &EffectorRef,
    obj: &ObjectId,
    state: &InteractionState,
    decl: &EntityDeclarations,
) -> Result<(), String> {
    let oc = &state.oc[obj];
    if oc.grasped_by.is_empty() {
        return Ok(());
    }
    let holders: Vec<String> = oc.grasped_by.iter().map(|h| h.to_string()).collect();
    let taken = || format!("{obj} is already grasped by {}", holders.join(", "));
    if !oc.extra_flag("handover") || oc.grasped_by.len() != 1 {
        return Err(taken());
    }
    let holder = oc.grasped_by.iter().next().expect("one holder");
    let other_kind = decl.agent_kind(&holder.agent) != decl.agent_kind(&eff.agent);
    let reach = reachable(&eff.agent, &state.op[obj].location, decl).unwrap_or(false);
    if holder.agent != eff.agent && other_kind && reach {
        Ok(())
    } else {
        Err(taken())
    }
}

/// End-effector a Manipulate acts with: the named one, else the agent's
/// effector holding the object, else the first free one, else the first declared.
pub fn manipulate_effector(
    action: &PrimitiveAction,
    state: &InteractionState,
    decl: &EntityDeclarations,
) -> Option<EffectorRef> {
    if let Some(e) = action.effector_ref() {
        return Some(e);
    }
    let agent = decl.agent(&action.agent)?;
    let refs: Vec<EffectorRef> = agent
        .effectors
        .iter()
        .map(|e| EffectorRef {
            agent: agent.id.clone(),
            effector: e.clone(),
        })
        .collect();
    if let Some(o) = &action.object {
        if let Some(oc) = state.oc.get(o) {
            if let Some(h) = refs.iter().find(|r| oc.grasped_by.contains(r)) {
                return Some(h.clone());
            }
        }
    }
    refs.iter()
        .find(|r| state.eea.get(r).copied().unwrap_or(false))
        .or(refs.first())
        .cloned()
}

/// Evaluates the preconditions of `action` in `state`.
///
/// Capability and well-formedness problems are errors; feature checks that
/// fail are returned in the verdict.
pub fn preconditions(
    action: &PrimitiveAction,
    state: &InteractionState,
    decl: &EntityDeclarations,
) -> Result<Verdict, ActionError> {
    use FeatureFamily::*;
    let bound = resolve(action, state, decl)?;
    let mut out = Vec::new();
    match action.template {
        ActionTemplate::Grasp => {
            let eff = bound.eff.expect("well-formed");
            let obj = bound.object.expect("well-formed");
            if !state.eea[&eff] {
                out.push(violation(&[Eea], format!("{eff} is not free")));
            }
            let ee = state.ee_location(&eff).expect("declared effector has a pose");
            let at = &state.op[obj].location;
            if ee.region != at.region || ee.distance(at) > GRASP_TOLERANCE {
                out.push(violation(
                    &[Ap, Op],
                    format!("{eff} is not at the location of {obj}"),
                ));
            }
            if let Err(msg) = grasp_eligible(&eff, obj, state, decl) {
                out.push(violation(&[Oc], msg));
            }
        }
        ActionTemplate::Release => {
            let eff = bound.eff.expect("well-formed");
            let obj = bound.object.expect("well-formed");
            if state.eea[&eff] || !state.oc[obj].grasped_by.contains(&eff) {
                out.push(violation(&[Eea], format!("{eff} is not holding {obj}")));
            }
        }
        ActionTemplate::Move => {
            let target = action.target.as_ref().expect("well-formed");
            let ok = reachable(&action.agent, target, decl).map_err(|_| {
                ActionError::UnknownEntity {
                    kind: "region",
                    id: target.region.0.clone(),
                }
            })?;
            if !ok {
                out.push(violation(
                    &[Ap],
                    format!("{} cannot reach {}", action.agent, target.region),
                ));
            }
        }
        ActionTemplate::Manipulate => {
            let obj = bound.object.expect("well-formed");
            let oc = &state.oc[obj];
            let eff = manipulate_effector(action, state, decl);
            let usable = eff
                .as_ref()
                .map(|e| state.eea.get(e).copied().unwrap_or(false) || oc.grasped_by.contains(e))
                .unwrap_or(false);
            if !usable {
                out.push(violation(
                    &[Eea],
                    format!("{} has no free hand to manipulate {obj}", action.agent),
                ));
            }
            let loc = &state.op[obj].location;
            if !reachable(&action.agent, loc, decl).unwrap_or(false) {
                out.push(violation(
                    &[Op],
                    format!("{obj} is out of reach of {}", action.agent),
                ));
            }
            let held_by_other = oc.grasped_by.iter().any(|h| h.agent != action.agent);
            match action.manip_effect.as_ref().expect("well-formed") {
                CharacteristicEdit::Assemble => {
                    if oc.assembled {
                        out.push(violation(&[Oc], format!("{obj} is already assembled")));
                    } else if held_by_other {
                        out.push(violation(&[Oc], format!("{obj} is held by another agent")));
                    }
                }
                CharacteristicEdit::Disassemble => {
                    if !oc.assembled {
                        out.push(violation(&[Oc], format!("{obj} is not assembled")));
                    } else if held_by_other {
                        out.push(violation(&[Oc], format!("{obj} is held by another agent")));
                    }
                }
                CharacteristicEdit::Take => match oc.content_count {
                    None => out.push(violation(&[Oc], format!("{obj} is not a container"))),
                    Some(0) => out.push(violation(&[Oc], format!("{obj} is empty"))),
                    Some(_) => {}
                },
                CharacteristicEdit::Dof(_) => {
                    let holds = eff.as_ref().map(|e| oc.grasped_by.contains(e)).unwrap_or(false);
                    if !holds {
                        out.push(violation(
                            &[Eea],
                            format!("{} must hold {obj} to actuate it", action.agent),
                        ));
                    }
                }
                CharacteristicEdit::Set { .. } => {
                    if held_by_other {
                        out.push(violation(&[Oc], format!("{obj} is held by another agent")));
                    }
                }
            }
        }
        ActionTemplate::Wait | ActionTemplate::Perceive => {}
    }
    Ok(if out.is_empty() {
        Verdict::Ok
    } else {
        Verdict::Violated(out)
    })
}

/// Applies the effects of `action`, advancing the clock by `duration`.
pub fn apply(
    action: &PrimitiveAction,
    state: &InteractionState,
    duration: f64,
    decl: &EntityDeclarations,
) -> Result<InteractionState, ActionError> {
    let verdict = preconditions(action, state, decl)?;
    if !verdict.is_ok() {
        return Err(ActionError::Precondition(verdict));
    }
    let mut s = state.clone();
    s.clock += duration.max(0.0);
    match action.template {
        ActionTemplate::Grasp => {
            let eff = action.effector_ref().expect("well-formed");
            let obj = action.object.as_ref().expect("well-formed");
            s.eea.insert(eff.clone(), false);
            set_gripper(&mut s, &eff, 0.0);
            let oc = s.oc.get_mut(obj).expect("resolved");
            oc.grasped_by.insert(eff);
            oc.extras.insert("grasped".into(), "true".into());
        }
        ActionTemplate::Release => {
            let eff = action.effector_ref().expect("well-formed");
            let obj = action.object.as_ref().expect("well-formed");
            s.eea.insert(eff.clone(), true);
            set_gripper(&mut s, &eff, 1.0);
            let oc = s.oc.get_mut(obj).expect("resolved");
            oc.grasped_by.remove(&eff);
            if oc.grasped_by.is_empty() {
                oc.extras.insert("grasped".into(), "false".into());
            }
        }
        ActionTemplate::Move => {
            let eff = action.effector_ref().expect("well-formed");
            let target = action.target.clone().expect("well-formed");
            if !state.eea[&eff] {
                let held = state
                    .held_by(&eff)
                    .cloned()
                    .ok_or_else(|| ActionError::HeldObjectMissing(eff.clone()))?;
                s.op.get_mut(&held).expect("held object exists").location = target.clone();
            }
            set_ee_pose(&mut s, &eff, target);
        }
        ActionTemplate::Manipulate => {
            let obj = action.object.as_ref().expect("well-formed");
            let eff = manipulate_effector(action, state, decl).expect("checked by preconditions");
            let at = s.op[obj].location.clone();
            set_ee_pose(&mut s, &eff, at);
            let oc = s.oc.get_mut(obj).expect("resolved");
            match action.manip_effect.as_ref().expect("well-formed") {
                CharacteristicEdit::Assemble => oc.assembled = true,
                CharacteristicEdit::Disassemble => oc.assembled = false,
                CharacteristicEdit::Take => {
                    oc.content_count = oc.content_count.map(|c| c.saturating_sub(1));
                }
                CharacteristicEdit::Dof(delta) => {
                    let pose = s.op.get_mut(obj).expect("resolved");
                    pose.internal_dof = Some(pose.internal_dof.unwrap_or(0.0) + delta);
                }
                CharacteristicEdit::Set { key, value } => {
                    oc.extras.insert(key.clone(), value.clone());
                }
            }
        }
        ActionTemplate::Wait | ActionTemplate::Perceive => {}
    }
    Ok(s)
}

fn set_gripper(s: &mut InteractionState, eff: &EffectorRef, opening: f64) {
    if let Some(p) = s.ap.get_mut(&eff.agent) {
        p.gripper_opening.insert(eff.effector.clone(), opening);
    }
}

fn set_ee_pose(s: &mut InteractionState, eff: &EffectorRef, loc: Location) {
    if let Some(p) = s.ap.get_mut(&eff.agent) {
        p.ee_pose.insert(eff.effector.clone(), loc);
    }
}

/// Feature families a template may write.
pub fn affected_features(template: ActionTemplate, holding: bool) -> BTreeSet<FeatureFamily> {
    use FeatureFamily::*;
    match template {
        ActionTemplate::Grasp | ActionTemplate::Release => BTreeSet::from([Eea, Ap, Oc]),
        ActionTemplate::Move if holding => BTreeSet::from([Ap, Op]),
        ActionTemplate::Move => BTreeSet::from([Ap]),
        ActionTemplate::Manipulate => BTreeSet::from([Ap, Op, Oc]),
        ActionTemplate::Wait | ActionTemplate::Perceive => BTreeSet::new(),
    }
}

/// Feature families a template reads as preconditions.
pub fn precondition_features(template: ActionTemplate) -> BTreeSet<FeatureFamily> {
    use FeatureFamily::*;
    match template {
        ActionTemplate::Grasp => BTreeSet::from([Eea, Ap, Op, Oc]),
        ActionTemplate::Release => BTreeSet::from([Eea]),
        ActionTemplate::Manipulate => BTreeSet::from([Eea, Op, Oc]),
        ActionTemplate::Move | ActionTemplate::Wait | ActionTemplate::Perceive => BTreeSet::new(),
    }
}
