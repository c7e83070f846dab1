//! Scripted human co-worker. Picks the most urgent job that the ground
//! truth allows; a job is a short sequence of primitives run back to back.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;

use crate::action::{preconditions, CharacteristicEdit, PrimitiveAction};
use crate::state::{
    AgentDecl, AgentId, AgentKind, EffectorRef, EndEffectorId, EntityDeclarations, InteractionState, Location,
    ObjectId, RegionId,
};

use super::scenario::PolicyKind;

/// Regions the scripted human reasons about.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Reached by both robot and human; where deliveries happen.
    pub shared: RegionId,
    /// The human's own bench.
    pub home: RegionId,
    /// Robot-side region where a careless human may drop a tool.
    pub misplace: RegionId,
}

impl Layout {
    pub fn derive(decl: &EntityDeclarations, human: &AgentDecl) -> Option<Self> {
        let robot_reach: BTreeSet<&RegionId> = decl.robots().flat_map(|r| r.reach.iter()).collect();
        let shared = human.reach.iter().find(|r| robot_reach.contains(r) && **r != human.base)?;
        let misplace = human
            .reach
            .iter()
            .find(|r| robot_reach.contains(r) && *r != shared)
            .unwrap_or(shared);
        Some(Self {
            shared: shared.clone(),
            home: human.base.clone(),
            misplace: misplace.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub label: &'static str,
    pub actions: VecDeque<PrimitiveAction>,
    /// The final grasp of this job takes an object out of a robot gripper.
    pub pull: bool,
}

impl Job {
    fn new(label: &'static str, actions: Vec<PrimitiveAction>) -> Self {
        Self {
            label,
            actions: actions.into(),
            pull: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HumanModel {
    pub id: AgentId,
    pub effectors: Vec<EndEffectorId>,
    pub layout: Layout,
    pub screws: u32,
    /// A screw was driven since the tool was last picked up.
    driven: bool,
    /// Objects the human put down on purpose; left alone until the robot puts them down again.
    pub returned: BTreeSet<ObjectId>,
    /// Pieces already considered for an independent pick.
    considered: BTreeSet<ObjectId>,
    /// Joints lined up for the next screw; at most one ahead.
    prepared: u32,
    joints: u32,
    /// Screws driven since the joints were last checked.
    unchecked: u32,
    /// Object being pulled out of a robot gripper and when the pull began.
    pub pull: Option<(ObjectId, f64)>,
}

fn kind_is(decl: &EntityDeclarations, o: &ObjectId, kind: &str) -> bool {
    decl.object(o).is_some_and(|d| d.kind == kind)
}

impl HumanModel {
    pub fn new(human: &AgentDecl, layout: Layout) -> Self {
        Self {
            id: human.id.clone(),
            effectors: human.effectors.clone(),
            layout,
            screws: 0,
            driven: false,
            returned: BTreeSet::new(),
            considered: BTreeSet::new(),
            prepared: 0,
            joints: 0,
            unchecked: 0,
            pull: None,
        }
    }

    fn hand(&self, e: &EndEffectorId) -> EffectorRef {
        EffectorRef {
            agent: self.id.clone(),
            effector: e.clone(),
        }
    }

    pub fn free_hand(&self, s: &InteractionState) -> Option<EndEffectorId> {
        self.effectors
            .iter()
            .find(|e| s.eea.get(&self.hand(e)).copied().unwrap_or(false))
            .cloned()
    }

    /// Hand holding `obj`, if any.
    pub fn holding_hand(&self, s: &InteractionState, obj: &ObjectId) -> Option<EndEffectorId> {
        let oc = s.oc.get(obj)?;
        self.effectors.iter().find(|e| oc.grasped_by.contains(&self.hand(e))).cloned()
    }

    fn region_center(&self, decl: &EntityDeclarations, r: &RegionId) -> Location {
        decl.region(r).map(|d| d.center_location()).expect("layout regions are declared")
    }

    fn mv(&self, hand: &EndEffectorId, to: Location) -> PrimitiveAction {
        PrimitiveAction::move_to(self.id.as_str(), hand.as_str(), to)
    }

    fn fetch_to(&self, hand: &EndEffectorId, s: &InteractionState, obj: &ObjectId) -> Vec<PrimitiveAction> {
        vec![
            self.mv(hand, s.op[obj].location.clone()),
            PrimitiveAction::grasp(self.id.as_str(), hand.as_str(), obj.as_str()),
        ]
    }

    fn robot_holders(s: &InteractionState, decl: &EntityDeclarations, obj: &ObjectId) -> usize {
        s.oc[obj]
            .grasped_by
            .iter()
            .filter(|h| decl.agent_kind(&h.agent) == Some(AgentKind::Robot))
            .count()
    }

    /// Chooses the next job for a compliant-style human, drawing from `rng`
    /// only for policy decisions. Updates bookkeeping for the chosen job.
    /// `robot_waiting` is true while the robot is watching for the human to
    /// go idle; the human does not start optional work then.
    pub fn next_job<R: Rng>(
        &mut self,
        s: &InteractionState,
        decl: &EntityDeclarations,
        policy: PolicyKind,
        robot_waiting: bool,
        rng: &mut R,
    ) -> Option<Job> {
        let ok = |a: &PrimitiveAction| preconditions(a, s, decl).map(|v| v.is_ok()).unwrap_or(false);
        let tools: Vec<&ObjectId> = s.op.keys().filter(|o| kind_is(decl, o, "tool")).collect();

        // Tool in hand: drive a screw, then put the tool back.
        for t in &tools {
            let Some(hand) = self.holding_hand(s, t) else { continue };
            if s.oc[*t].grasped_by.len() != 1 {
                continue; // robot has not let go yet
            }
            if !self.driven && self.screws > 0 {
                let a = PrimitiveAction::manipulate(self.id.as_str(), t.as_str(), CharacteristicEdit::Dof(1.0));
                if ok(&a) {
                    self.screws -= 1;
                    self.prepared = self.prepared.saturating_sub(1);
                    self.unchecked += 1;
                    self.driven = true;
                    return Some(Job::new("drive_screw", vec![a]));
                }
            }
            let misplace = matches!(policy, PolicyKind::ErrorProne(p) if rng.random::<f64>() < p);
            let region = if misplace { &self.layout.misplace } else { &self.layout.shared };
            self.driven = false;
            self.returned.insert((*t).clone());
            let label = if misplace { "misplace_tool" } else { "return_tool" };
            return Some(Job::new(
                label,
                vec![
                    self.mv(&hand, self.region_center(decl, region)),
                    PrimitiveAction::release(self.id.as_str(), hand.as_str(), t.as_str()),
                ],
            ));
        }

        // Screws offered in a box the robot is holding out.
        for (o, oc) in &s.oc {
            let offered = oc.content_count.is_some_and(|c| c > 0)
                && Self::robot_holders(s, decl, o) > 0
                && s.op[o].location.region == self.layout.shared;
            if offered {
                let a = PrimitiveAction::manipulate(self.id.as_str(), o.as_str(), CharacteristicEdit::Take);
                if ok(&a) {
                    self.screws += 1;
                    return Some(Job::new("take_screw", vec![a]));
                }
            }
        }

        let hand = self.free_hand(s)?;
        for t in &tools {
            let oc = &s.oc[*t];
            let at = &s.op[*t].location;
            // Tool held out by the robot: pull it.
            if !self.returned.contains(*t)
                && oc.grasped_by.len() == 1 && Self::robot_holders(s, decl, t) == 1 && at.region == self.layout.shared {
                let mut job = Job::new("pull_tool", self.fetch_to(&hand, s, t));
                job.pull = true;
                return Some(job);
            }
            // Tool left on the table by the robot.
            let reachable = decl.agent(&self.id).is_some_and(|d| d.reach.contains(&at.region));
            if oc.grasped_by.is_empty() && self.screws > 0 && !self.returned.contains(*t) && reachable {
                return Some(Job::new("pick_tool", self.fetch_to(&hand, s, t)));
            }
        }

        // Delivered pieces: carry to the bench and assemble.
        for (o, oc) in &s.oc {
            if kind_is(decl, o, "piece")
                && !oc.assembled
                && oc.grasped_by.is_empty()
                && s.op[o].location.region == self.layout.shared
            {
                let mut actions = self.fetch_to(&hand, s, o);
                actions.push(self.mv(&hand, self.region_center(decl, &self.layout.home)));
                actions.push(PrimitiveAction::manipulate(self.id.as_str(), o.as_str(), CharacteristicEdit::Assemble));
                actions.push(PrimitiveAction::release(self.id.as_str(), hand.as_str(), o.as_str()));
                return Some(Job::new("assemble_piece", actions));
            }
        }

        if let PolicyKind::IndependentPicker(p) = policy {
            let candidates: Vec<ObjectId> = s
                .oc
                .iter()
                .filter(|(o, oc)| {
                    let region = &s.op[*o].location.region;
                    kind_is(decl, o, "piece")
                        && !oc.assembled
                        && oc.grasped_by.is_empty()
                        && *region != self.layout.shared
                        && *region != self.layout.home
                        && !self.considered.contains(*o)
                })
                .map(|(o, _)| o.clone())
                .collect();
            for o in candidates {
                self.considered.insert(o.clone());
                if rng.random::<f64>() < p {
                    let mut actions = self.fetch_to(&hand, s, &o);
                    actions.push(self.mv(&hand, self.region_center(decl, &self.layout.shared)));
                    actions.push(PrimitiveAction::release(self.id.as_str(), hand.as_str(), o.as_str()));
                    return Some(Job::new("independent_pick", actions));
                }
            }
        }

        // Optional work, never started while the robot is waiting for the
        // human to go idle: line up the joint for the next screw, or once
        // out of screws, check the joints driven since the last check.
        if robot_waiting {
            return None;
        }
        let mut bench = s.oc.iter().filter(|(o, oc)| {
            kind_is(decl, o, "piece")
                && oc.assembled
                && oc.grasped_by.is_empty()
                && s.op[*o].location.region == self.layout.home
        });
        if self.screws == 0 {
            if self.unchecked == 0 {
                return None;
            }
            let (o, _) = bench.next()?;
            let a = PrimitiveAction::manipulate(
                self.id.as_str(),
                o.as_str(),
                CharacteristicEdit::Set {
                    key: "checked".into(),
                    value: self.joints.to_string(),
                },
            );
            if !ok(&a) {
                return None;
            }
            self.unchecked = 0;
            return Some(Job::new("check_joints", vec![a]));
        }
        if self.prepared > 0 {
            return None;
        }
        let (base, _) = bench.next()?;
        let a = PrimitiveAction::manipulate(
            self.id.as_str(),
            base.as_str(),
            CharacteristicEdit::Set {
                key: "joints".into(),
                value: (self.joints + 1).to_string(),
            },
        );
        if !ok(&a) {
            return None;
        }
        self.prepared += 1;
        self.joints += 1;
        Some(Job::new("prepare_joint", vec![a]))
    }
}
