//! Interaction state: end-effector availability (EEA), agent pose (AP),
//! object pose (OP) and object characteristics (OC), plus the entity
//! declarations those four feature vectors range over.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ActionTemplate;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

id_type!(
    /// Agent identifier, e.g. `R` or `H`.
    AgentId
);
id_type!(
    /// End-effector name, only meaningful together with its agent.
    EndEffectorId
);
id_type!(ObjectId);
id_type!(RegionId);

/// An end-effector qualified by its agent. Serialized as `agent.effector`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct EffectorRef {
    pub agent: AgentId,
    pub effector: EndEffectorId,
}

impl EffectorRef {
    pub fn new(agent: impl Into<String>, effector: impl Into<String>) -> Self {
        Self {
            agent: AgentId(agent.into()),
            effector: EndEffectorId(effector.into()),
        }
    }
}

impl fmt::Display for EffectorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.agent, self.effector)
    }
}

impl From<EffectorRef> for String {
    fn from(e: EffectorRef) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for EffectorRef {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for EffectorRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('.') {
            Some((a, e)) if !a.is_empty() && !e.is_empty() => Ok(EffectorRef::new(a, e)),
            _ => Err(format!("malformed effector reference `{s}`")),
        }
    }
}

/// A point in the planar world frame, tagged with the named region it lies in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub region: RegionId,
    pub coords: [f64; 2],
}

impl Location {
    pub fn new(region: impl Into<String>, x: f64, y: f64) -> Self {
        Self {
            region: RegionId(region.into()),
            coords: [x, y],
        }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        let dx = self.coords[0] - other.coords[0];
        let dy = self.coords[1] - other.coords[1];
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub base: Location,
    pub ee_pose: BTreeMap<EndEffectorId, Location>,
    /// 1 = fully open, 0 = closed on an object.
    pub gripper_opening: BTreeMap<EndEffectorId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub location: Location,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_dof: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CharacteristicSet {
    pub grasped_by: BTreeSet<EffectorRef>,
    pub assembled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_count: Option<u32>,
    pub extras: BTreeMap<String, String>,
}

impl CharacteristicSet {
    pub fn extra_flag(&self, key: &str) -> bool {
        self.extras.get(key).map(|v| v == "true").unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionState {
    /// true = end-effector free.
    pub eea: BTreeMap<EffectorRef, bool>,
    pub ap: BTreeMap<AgentId, AgentPose>,
    pub op: BTreeMap<ObjectId, ObjectPose>,
    pub oc: BTreeMap<ObjectId, CharacteristicSet>,
    pub clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Robot,
    Human,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Robot => "robot",
            AgentKind::Human => "human",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDecl {
    pub id: RegionId,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl RegionDecl {
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    /// Drop point used when an agent is sent to the region as a whole.
    pub fn center_location(&self) -> Location {
        Location {
            region: self.id.clone(),
            coords: self.center(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecl {
    pub id: AgentId,
    pub kind: AgentKind,
    pub caps: Vec<ActionTemplate>,
    pub reach: Vec<RegionId>,
    pub effectors: Vec<EndEffectorId>,
    pub base: RegionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDecl {
    pub id: ObjectId,
    pub kind: String,
    pub region: RegionId,
    /// Explicit placement; objects without one are laid out on a grid.
    pub coords: Option<[f64; 2]>,
    pub content: Option<u32>,
    /// Object may be held by a robot and a human at the same time during a transfer.
    pub handover: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EntityDeclarations {
    pub regions: Vec<RegionDecl>,
    pub agents: Vec<AgentDecl>,
    pub objects: Vec<ObjectDecl>,
}

/// Grid pitch for objects placed without explicit coordinates.
pub const LAYOUT_PITCH: f64 = 0.1;

impl EntityDeclarations {
    pub fn region(&self, id: &RegionId) -> Option<&RegionDecl> {
        self.regions.iter().find(|r| &r.id == id)
    }

    pub fn agent(&self, id: &AgentId) -> Option<&AgentDecl> {
        self.agents.iter().find(|a| &a.id == id)
    }

    pub fn object(&self, id: &ObjectId) -> Option<&ObjectDecl> {
        self.objects.iter().find(|o| &o.id == id)
    }

    pub fn agent_kind(&self, id: &AgentId) -> Option<AgentKind> {
        self.agent(id).map(|a| a.kind)
    }

    pub fn robots(&self) -> impl Iterator<Item = &AgentDecl> {
        self.agents.iter().filter(|a| a.kind == AgentKind::Robot)
    }

    pub fn humans(&self) -> impl Iterator<Item = &AgentDecl> {
        self.agents.iter().filter(|a| a.kind == AgentKind::Human)
    }

    /// Regions covered by robot cameras: the union of robot reach sets.
    pub fn visible_regions(&self) -> BTreeSet<RegionId> {
        self.robots().flat_map(|a| a.reach.iter().cloned()).collect()
    }

    /// Whether `id` names any declared region, agent or object.
    pub fn is_declared(&self, id: &str) -> bool {
        self.regions.iter().any(|r| r.id.0 == id)
            || self.agents.iter().any(|a| a.id.0 == id)
            || self.objects.iter().any(|o| o.id.0 == id)
    }

    /// Initial object locations, resolving grid layout for objects without coordinates.
    pub fn object_locations(&self) -> Result<Vec<Location>, StateError> {
        let mut slot: BTreeMap<&RegionId, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.objects.len());
        for obj in &self.objects {
            let region = self
                .region(&obj.region)
                .ok_or_else(|| StateError::UndeclaredRegion {
                    entity: obj.id.0.clone(),
                    region: obj.region.0.clone(),
                })?;
            let coords = match obj.coords {
                Some(c) => {
                    if !region.contains(c) {
                        return Err(StateError::OutOfBounds {
                            entity: obj.id.0.clone(),
                            region: region.id.0.clone(),
                        });
                    }
                    c
                }
                None => {
                    let k = slot.entry(&region.id).or_insert(0);
                    let c = grid_slot(region, *k);
                    *k += 1;
                    c
                }
            };
            out.push(Location {
                region: region.id.clone(),
                coords,
            });
        }
        Ok(out)
    }
}

fn grid_slot(region: &RegionDecl, k: usize) -> [f64; 2] {
    let width = region.max[0] - region.min[0];
    let cols = ((width / LAYOUT_PITCH).floor() as usize).max(1);
    let (col, row) = (k % cols, k / cols);
    let half = LAYOUT_PITCH / 2.0;
    let x = (region.min[0] + half + LAYOUT_PITCH * col as f64).min(region.max[0]);
    let y = (region.min[1] + half + LAYOUT_PITCH * row as f64).min(region.max[1]);
    [x.max(region.min[0]), y.max(region.min[1])]
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("duplicate identifier `{0}`")]
    DuplicateId(String),
    #[error("`{entity}` refers to undeclared region `{region}`")]
    UndeclaredRegion { entity: String, region: String },
    #[error("`{entity}` lies outside the bounds of region `{region}`")]
    OutOfBounds { entity: String, region: String },
    #[error("region `{0}` has empty or inverted bounds")]
    InvalidBounds(String),
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("agent `{0}` declares no end-effectors")]
    NoEffectors(String),
    #[error("states are over different entity sets ({0})")]
    MismatchedEntities(&'static str),
}

/// Builds the initial interaction state: every end-effector free, nothing
/// grasped, clock at zero, every object at its declared location.
pub fn new_state(decl: &EntityDeclarations) -> Result<InteractionState, StateError> {
    let mut seen = BTreeSet::new();
    let ids = decl
        .regions
        .iter()
        .map(|r| r.id.0.as_str())
        .chain(decl.agents.iter().map(|a| a.id.0.as_str()))
        .chain(decl.objects.iter().map(|o| o.id.0.as_str()));
    for id in ids {
        if !seen.insert(id) {
            return Err(StateError::DuplicateId(id.to_string()));
        }
    }
    for r in &decl.regions {
        if !(r.min[0] < r.max[0] && r.min[1] < r.max[1]) {
            return Err(StateError::InvalidBounds(r.id.0.clone()));
        }
    }

    let mut eea = BTreeMap::new();
    let mut ap = BTreeMap::new();
    for agent in &decl.agents {
        if agent.effectors.is_empty() {
            return Err(StateError::NoEffectors(agent.id.0.clone()));
        }
        let mut effs = BTreeSet::new();
        for e in &agent.effectors {
            if !effs.insert(e) {
                return Err(StateError::DuplicateId(format!("{}.{}", agent.id, e)));
            }
        }
        let base = decl
            .region(&agent.base)
            .ok_or_else(|| StateError::UndeclaredRegion {
                entity: agent.id.0.clone(),
                region: agent.base.0.clone(),
            })?
            .center_location();
        for r in &agent.reach {
            if decl.region(r).is_none() {
                return Err(StateError::UndeclaredRegion {
                    entity: agent.id.0.clone(),
                    region: r.0.clone(),
                });
            }
        }
        let mut pose = AgentPose {
            base: base.clone(),
            ee_pose: BTreeMap::new(),
            gripper_opening: BTreeMap::new(),
        };
        for e in &agent.effectors {
            eea.insert(
                EffectorRef {
                    agent: agent.id.clone(),
                    effector: e.clone(),
                },
                true,
            );
            pose.ee_pose.insert(e.clone(), base.clone());
            pose.gripper_opening.insert(e.clone(), 1.0);
        }
        ap.insert(agent.id.clone(), pose);
    }

    let mut op = BTreeMap::new();
    let mut oc = BTreeMap::new();
    for (obj, location) in decl.objects.iter().zip(decl.object_locations()?) {
        op.insert(
            obj.id.clone(),
            ObjectPose {
                location,
                orientation: None,
                internal_dof: None,
            },
        );
        let mut extras = BTreeMap::new();
        extras.insert("grasped".to_string(), "false".to_string());
        if obj.handover {
            extras.insert("handover".to_string(), "true".to_string());
        }
        oc.insert(
            obj.id.clone(),
            CharacteristicSet {
                grasped_by: BTreeSet::new(),
                assembled: false,
                content_count: obj.content,
                extras,
            },
        );
    }

    Ok(InteractionState {
        eea,
        ap,
        op,
        oc,
        clock: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureFamily {
    #[serde(rename = "EEA")]
    Eea,
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "OC")]
    Oc,
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureFamily::Eea => "EEA",
            FeatureFamily::Ap => "AP",
            FeatureFamily::Op => "OP",
            FeatureFamily::Oc => "OC",
        })
    }
}

/// Keys whose values differ between two states, per feature family.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureDiff {
    pub eea: BTreeSet<EffectorRef>,
    pub ap: BTreeSet<AgentId>,
    pub op: BTreeSet<ObjectId>,
    pub oc: BTreeSet<ObjectId>,
}

impl FeatureDiff {
    pub fn is_empty(&self) -> bool {
        self.eea.is_empty() && self.ap.is_empty() && self.op.is_empty() && self.oc.is_empty()
    }

    /// Families with at least one differing key.
    pub fn families(&self) -> BTreeSet<FeatureFamily> {
        let mut out = BTreeSet::new();
        if !self.eea.is_empty() {
            out.insert(FeatureFamily::Eea);
        }
        if !self.ap.is_empty() {
            out.insert(FeatureFamily::Ap);
        }
        if !self.op.is_empty() {
            out.insert(FeatureFamily::Op);
        }
        if !self.oc.is_empty() {
            out.insert(FeatureFamily::Oc);
        }
        out
    }
}

fn differing_keys<K: Ord + Clone, V: PartialEq>(
    a: &BTreeMap<K, V>,
    b: &BTreeMap<K, V>,
    family: &'static str,
) -> Result<BTreeSet<K>, StateError> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(StateError::MismatchedEntities(family));
    }
    Ok(a.iter()
        .zip(b.values())
        .filter(|((_, va), vb)| va != vb)
        .map(|((k, _), _)| k.clone())
        .collect())
}

/// Per-family set of keys whose values differ. The clock is ignored.
pub fn diff(a: &InteractionState, b: &InteractionState) -> Result<FeatureDiff, StateError> {
    Ok(FeatureDiff {
        eea: differing_keys(&a.eea, &b.eea, "EEA")?,
        ap: differing_keys(&a.ap, &b.ap, "AP")?,
        op: differing_keys(&a.op, &b.op, "OP")?,
        oc: differing_keys(&a.oc, &b.oc, "OC")?,
    })
}

/// True iff the location's region is in the agent's declared reach.
pub fn reachable(
    agent: &AgentId,
    loc: &Location,
    decl: &EntityDeclarations,
) -> Result<bool, StateError> {
    let a = decl
        .agent(agent)
        .ok_or_else(|| StateError::UnknownAgent(agent.0.clone()))?;
    if decl.region(&loc.region).is_none() {
        return Err(StateError::UndeclaredRegion {
            entity: agent.0.clone(),
            region: loc.region.0.clone(),
        });
    }
    Ok(a.reach.contains(&loc.region))
}

/// Normalizes a yaw angle into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    use std::f64::consts::PI;
    let mut y = yaw.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvariantViolation {
    #[error("EEA of {0} disagrees with the recorded holders")]
    HolderMismatch(EffectorRef),
    #[error("object `{0}` has more than two holders")]
    TooManyHolders(ObjectId),
    #[error("object `{0}` has two holders outside a robot/human handover")]
    InvalidDualHold(ObjectId),
    #[error("gripper opening of {0} out of [0,1]")]
    GripperRange(EffectorRef),
}

impl InteractionState {
    /// Object currently held by the given end-effector, if any.
    pub fn held_by(&self, eff: &EffectorRef) -> Option<&ObjectId> {
        self.oc
            .iter()
            .find(|(_, c)| c.grasped_by.contains(eff))
            .map(|(id, _)| id)
    }

    pub fn is_free(&self, eff: &EffectorRef) -> Option<bool> {
        self.eea.get(eff).copied()
    }

    pub fn ee_location(&self, eff: &EffectorRef) -> Option<&Location> {
        self.ap.get(&eff.agent)?.ee_pose.get(&eff.effector)
    }

    pub fn object_location(&self, obj: &ObjectId) -> Option<&Location> {
        self.op.get(obj).map(|p| &p.location)
    }

    /// Checks the EEA/holder duality and the holder-count rules.
    pub fn check_invariants(&self, decl: &EntityDeclarations) -> Result<(), InvariantViolation> {
        for (eff, free) in &self.eea {
            let holds = self
                .oc
                .values()
                .filter(|c| c.grasped_by.contains(eff))
                .count();
            let ok = if *free { holds == 0 } else { holds == 1 };
            if !ok {
                return Err(InvariantViolation::HolderMismatch(eff.clone()));
            }
            let opening = self
                .ap
                .get(&eff.agent)
                .and_then(|p| p.gripper_opening.get(&eff.effector))
                .copied()
                .unwrap_or(1.0);
            if !(0.0..=1.0).contains(&opening) {
                return Err(InvariantViolation::GripperRange(eff.clone()));
            }
        }
        for (id, c) in &self.oc {
            match c.grasped_by.len() {
                0 | 1 => {}
                2 => {
                    let kinds: BTreeSet<_> = c
                        .grasped_by
                        .iter()
                        .filter_map(|h| decl.agent_kind(&h.agent))
                        .collect();
                    if kinds.len() != 2 {
                        return Err(InvariantViolation::InvalidDualHold(id.clone()));
                    }
                }
                _ => return Err(InvariantViolation::TooManyHolders(id.clone())),
            }
        }
        Ok(())
    }
}
