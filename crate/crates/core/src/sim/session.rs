use std::collections::{BTreeMap, BTreeSet, VecDeque};

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::action::{
    apply, preconditions, ActionTemplate, CharacteristicEdit, PerceiveKind, PrimitiveAction, Verdict, WaitCondition,
};
use crate::planner::{self, Domain, Plan};
use crate::state::{
    new_state, AgentId, AgentKind, EffectorRef, FeatureFamily, InteractionState, Location, ObjectId, RegionId,
};

use super::human::{HumanModel, Job, Layout};
use super::log::{ActionEndPayload, ActionStartPayload, EventKind, EventLog, LogHeader, SimEvent, LOG_FORMAT, LOG_VERSION};
use super::perception::{
    check_available_objects, idle_reading, precise_marker, PerceiveData, PerceiveResult, BOX_POLL,
    CONTRADICTION_DISTANCE, IDLE_CONFIRM, IDLE_POLL,
};
use super::scenario::{PolicyKind, Scenario};
use super::SimError;

/// Consecutive repairs without completing a plan step before the session is declared stuck.
pub const MAX_RECOVERIES: u32 = 6;
/// Virtual-time ceiling for one session, s.
pub const MAX_SESSION_TIME: f64 = 1.0e6;
/// Ground-truth poll period of a pull-signal wait, s.
const PULL_POLL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
enum Monitor {
    EmptyBox { object: ObjectId, next: f64, deadline: f64 },
    ToolPull { object: ObjectId, k: u64, deadline: f64 },
    Idle { next: f64, streak: u32, deadline: f64 },
    Wait { condition: WaitCondition, next: f64, poll: f64, deadline: f64 },
}

#[derive(Debug, Clone, PartialEq)]
struct Running {
    action: PrimitiveAction,
    step: Option<usize>,
    start: f64,
    /// Fixed completion time; `None` while a monitor decides.
    end: Option<f64>,
    monitor: Option<Monitor>,
    /// Human grasp that begins a pull on a robot-held object.
    pull: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct RepairRequest {
    reason: String,
    focus: Option<ObjectId>,
}

/// Outcomes of earlier perceives that a following wait may consume.
#[derive(Debug, Clone, Default, PartialEq)]
struct Signals {
    pull: bool,
    idle: bool,
    box_empty: BTreeSet<ObjectId>,
}

/// Operator input in interactive sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HumanEvent {
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
    PullTool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub template: Option<ActionTemplate>,
    pub families: Vec<FeatureFamily>,
    pub detail: String,
}

impl Rejection {
    fn new(template: Option<ActionTemplate>, families: Vec<FeatureFamily>, detail: impl Into<String>) -> Self {
        Self {
            template,
            families,
            detail: detail.into(),
        }
    }

    /// One-line description, e.g. `grasp: OC: O1 is already grasped by R.r`.
    pub fn violation(&self) -> String {
        let mut out = String::new();
        if let Some(t) = self.template {
            out.push_str(t.name());
            out.push_str(": ");
        }
        if !self.families.is_empty() {
            let f: Vec<String> = self.families.iter().map(|f| f.to_string()).collect();
            out.push_str(&f.join("/"));
            out.push_str(": ");
        }
        out.push_str(&self.detail);
        out
    }
}

/// A running collaboration: plan, belief, ground truth, human and event log.
///
/// Each instant is processed in a fixed order: finished actions, robot
/// monitors, robot dispatch, human decision, goal check.
#[derive(Debug, Clone)]
pub struct Session {
    scenario: Scenario,
    domain: Domain,
    truth: InteractionState,
    belief: InteractionState,
    plan: Plan,
    cursor: usize,
    rng: ChaCha8Rng,
    now: f64,
    started: bool,
    finished: bool,
    robot_id: AgentId,
    robot: Option<Running>,
    queue: VecDeque<PrimitiveAction>,
    repair: Option<RepairRequest>,
    recoveries: u32,
    human: Option<HumanModel>,
    human_running: Option<Running>,
    human_job: Option<Job>,
    declared_idle: bool,
    flagged: bool,
    signals: Signals,
    header: LogHeader,
    events: Vec<SimEvent>,
    emitted: usize,
}

fn finite_min(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

impl Session {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let domain = scenario.domain()?;
        let decl = &domain.entities;
        let truth = new_state(decl).map_err(|e| SimError::Domain(e.to_string()))?;
        let robot_id = decl
            .robots()
            .next()
            .map(|r| r.id.clone())
            .ok_or_else(|| SimError::Domain("domain declares no robot".into()))?;
        let human = decl
            .humans()
            .next()
            .and_then(|h| Layout::derive(decl, h).map(|l| HumanModel::new(h, l)));
        let plan = planner::plan(&domain, &truth)?;
        let agents: BTreeMap<AgentId, AgentKind> = decl.agents.iter().map(|a| (a.id.clone(), a.kind)).collect();
        let header = LogHeader {
            log: LOG_FORMAT.into(),
            version: LOG_VERSION,
            scenario: scenario.clone(),
            agents,
            plan_steps: plan.len(),
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            declared_idle: scenario.policy == PolicyKind::Interactive,
            scenario,
            domain,
            belief: truth.clone(),
            truth,
            plan,
            cursor: 0,
            now: 0.0,
            started: false,
            finished: false,
            robot_id,
            robot: None,
            queue: VecDeque::new(),
            repair: None,
            recoveries: 0,
            human,
            human_running: None,
            human_job: None,
            flagged: false,
            signals: Signals::default(),
            header,
            events: Vec::new(),
            emitted: 0,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn truth(&self) -> &InteractionState {
        &self.truth
    }

    pub fn belief(&self) -> &InteractionState {
        &self.belief
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// Index of the next plan step to dispatch.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    /// Events produced since the previous call.
    pub fn take_new_events(&mut self) -> Vec<SimEvent> {
        let out = self.events[self.emitted..].to_vec();
        self.emitted = self.events.len();
        out
    }

    pub fn log(&self) -> EventLog {
        EventLog {
            header: self.header.clone(),
            events: self.events.clone(),
            final_state: self.finished.then(|| self.truth.clone()),
        }
    }

    fn interactive(&self) -> bool {
        self.scenario.policy == PolicyKind::Interactive
    }

    fn timeout(&self) -> f64 {
        if self.interactive() {
            f64::INFINITY
        } else {
            self.scenario.wait_timeout
        }
    }

    fn emit(&mut self, kind: EventKind, agent: Option<AgentId>, payload: serde_json::Value) {
        let seq = self.events.len() as u64;
        self.events.push(SimEvent {
            t: self.now,
            seq,
            kind,
            agent,
            payload,
        });
    }

    fn human_idle_truth(&self) -> bool {
        if self.interactive() {
            return self.declared_idle;
        }
        self.human_running.is_none() && self.human_job.is_none()
    }

    /// The robot is running the idle detector or waiting on its signal.
    fn robot_watching_human(&self) -> bool {
        self.robot.as_ref().is_some_and(|r| {
            r.action.perceive_kind == Some(PerceiveKind::DetectIdle)
                || r.action.wait_condition == Some(WaitCondition::HumanIdle)
        })
    }

    fn next_robot_time(&self) -> Option<f64> {
        let r = self.robot.as_ref()?;
        if let Some(end) = r.end {
            return Some(end);
        }
        Some(match r.monitor.as_ref()? {
            Monitor::EmptyBox { next, .. } | Monitor::Idle { next, .. } | Monitor::Wait { next, .. } => *next,
            Monitor::ToolPull { k, .. } => self.scenario.shear.sample_time(r.start, *k),
        })
    }

    /// Time of the next instant with something to do.
    pub fn next_instant(&self) -> Option<f64> {
        if self.finished {
            return None;
        }
        if !self.started {
            return Some(0.0);
        }
        finite_min(self.next_robot_time(), self.human_running.as_ref().and_then(|h| h.end))
    }

    /// Processes the next instant. Returns `false` once the goal is reached.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.finished {
            return Ok(false);
        }
        let t = match self.next_instant() {
            Some(t) => t,
            None => {
                return Err(SimError::Deadlock {
                    t: self.now,
                    reason: "no agent has anything left to do but the plan is unfinished".into(),
                })
            }
        };
        if t > MAX_SESSION_TIME {
            return Err(SimError::Deadlock {
                t,
                reason: "session time limit exceeded".into(),
            });
        }
        self.process(t)?;
        Ok(!self.finished)
    }

    /// Processes every instant up to and including `t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: f64) -> Result<(), SimError> {
        while let Some(next) = self.next_instant() {
            if next > t {
                break;
            }
            self.step()?;
        }
        if !self.finished {
            self.now = self.now.max(t);
        }
        Ok(())
    }

    /// Runs to completion.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    fn process(&mut self, t: f64) -> Result<(), SimError> {
        self.now = t;
        self.started = true;
        if self.robot.as_ref().and_then(|r| r.end).is_some_and(|e| e <= t) {
            self.finish_robot_fixed()?;
        }
        if self.human_running.as_ref().and_then(|h| h.end).is_some_and(|e| e <= t) {
            self.finish_human();
        }
        self.poll_robot(t)?;
        self.dispatch(t)?;
        self.human_decide(t)?;
        self.check_goal();
        Ok(())
    }

    // ---- robot ----

    fn bump_recovery(&mut self, reason: &str) -> Result<(), SimError> {
        self.recoveries += 1;
        if self.recoveries > MAX_RECOVERIES {
            return Err(SimError::Deadlock {
                t: self.now,
                reason: format!("repair failed {MAX_RECOVERIES} times in a row: {reason}"),
            });
        }
        Ok(())
    }

    fn rebind(&self, action: &mut PrimitiveAction) {
        if action.template == ActionTemplate::Move {
            if let Some(loc) = action.object.as_ref().and_then(|o| self.belief.object_location(o)) {
                action.target = Some(loc.clone());
            }
        }
    }

    fn perceive(&self, kind: PerceiveKind) -> PrimitiveAction {
        PrimitiveAction::perceive(self.robot_id.as_str(), kind)
    }

    fn dispatch(&mut self, t: f64) -> Result<(), SimError> {
        for _ in 0..64 {
            if self.finished || self.robot.is_some() {
                return Ok(());
            }
            if let Some(a) = self.queue.pop_front() {
                return self.start_robot(a, None, t);
            }
            if self.flagged {
                // Re-decompose what is left, then look; the overview
                // requests a second repair if it contradicts the plan.
                self.flagged = false;
                self.replan(RepairRequest {
                    reason: "human event observed".into(),
                    focus: None,
                })?;
                if self.repair.is_none() {
                    self.queue.push_back(self.perceive(PerceiveKind::CheckAvailableObjects));
                }
                continue;
            }
            if let Some(req) = self.repair.take() {
                self.replan(req)?;
                continue;
            }
            let Some(step) = self.plan.steps.get(self.cursor) else {
                return Ok(());
            };
            let mut action = step.action.clone();
            self.rebind(&mut action);
            let decl = &self.domain.entities;
            let believed = preconditions(&action, &self.belief, decl)?;
            if !believed.is_ok() {
                self.bump_recovery(&believed.to_string())?;
                self.repair = Some(RepairRequest {
                    reason: format!("{action} not executable in belief: {believed}"),
                    focus: action.object.clone(),
                });
                continue;
            }
            let actual = preconditions(&action, &self.truth, decl)?;
            if !actual.is_ok() {
                self.bump_recovery(&actual.to_string())?;
                let held_elsewhere = matches!(action.template, ActionTemplate::Grasp | ActionTemplate::Manipulate)
                    && action.object.as_ref().is_some_and(|o| {
                        self.truth.oc[o].grasped_by.iter().any(|h| h.agent != action.agent)
                    });
                if held_elsewhere {
                    let o = action.object.clone().expect("checked");
                    debug!("t={t:.2} {o} is held by another agent; waiting");
                    self.queue
                        .push_back(PrimitiveAction::wait(self.robot_id.as_str(), WaitCondition::ObjectAvailable(o)));
                } else {
                    debug!("t={t:.2} {action} diverged: {actual}");
                    self.queue.push_back(self.perceive(PerceiveKind::CheckAvailableObjects));
                    self.repair = Some(RepairRequest {
                        reason: format!("{action} not executable: {actual}"),
                        focus: action.object.clone(),
                    });
                }
                continue;
            }
            let index = self.cursor;
            self.cursor += 1;
            self.recoveries = 0;
            return self.start_robot(action, Some(index), t);
        }
        Err(SimError::Deadlock {
            t,
            reason: "executor made no progress".into(),
        })
    }

    /// Repairs the plan from the belief state by restarting ever larger
    /// parts of the decomposition. With a focus object, the innermost
    /// compound task mentioning it is tried first.
    fn replan(&mut self, req: RepairRequest) -> Result<(), SimError> {
        if self.cursor >= self.plan.len() {
            return Ok(());
        }
        let tree = planner::explain(&self.plan)?;
        let mut levels = Vec::new();
        while let Some(tasks) = tree.remaining(self.cursor, levels.len()) {
            levels.push(tasks);
        }
        let mut order: Vec<usize> = (0..levels.len()).collect();
        if let Some(o) = &req.focus {
            if let Some(k) = (1..levels.len()).find(|&k| levels[k][0].mentions(o.as_str())) {
                order = (k..levels.len()).chain(0..k).collect();
            }
        }
        for k in order {
            match planner::replan(&self.domain, &self.belief, &levels[k]) {
                Ok(p) => {
                    debug!("t={:.2} replan level {k}: {} steps ({})", self.now, p.len(), req.reason);
                    let steps = p.len();
                    self.plan = p;
                    self.cursor = 0;
                    self.emit(
                        EventKind::Replan,
                        Some(self.robot_id.clone()),
                        json!({"reason": req.reason, "level": k, "steps": steps}),
                    );
                    return Ok(());
                }
                Err(e) => debug!("replan level {k} failed: {e}"),
            }
        }
        // Nothing fits the current belief: look again before retrying.
        self.bump_recovery(&req.reason)?;
        self.queue.push_back(self.perceive(PerceiveKind::DetectIdle));
        self.queue.push_back(self.perceive(PerceiveKind::CheckAvailableObjects));
        self.repair = Some(req);
        Ok(())
    }

    fn duration(&mut self, key: &str) -> f64 {
        self.scenario.durations.get(key).sample(&mut self.rng)
    }

    fn robot_holding(&self) -> Option<ObjectId> {
        let decl = &self.domain.entities;
        let robot = decl.agent(&self.robot_id)?;
        robot.effectors.iter().find_map(|e| {
            self.truth
                .held_by(&EffectorRef {
                    agent: self.robot_id.clone(),
                    effector: e.clone(),
                })
                .cloned()
        })
    }

    fn start_robot(&mut self, action: PrimitiveAction, step: Option<usize>, t: f64) -> Result<(), SimError> {
        let decl = &self.domain.entities;
        self.truth = apply(&action, &self.truth, 0.0, decl)?;
        self.truth.clock = t;
        self.belief = apply(&action, &self.belief, 0.0, decl)?;
        self.belief.clock = t;
        if let (ActionTemplate::Release, Some(o), Some(h)) = (action.template, &action.object, self.human.as_mut()) {
            h.returned.remove(o);
            if h.pull.as_ref().is_some_and(|(p, _)| p == o) {
                h.pull = None;
            }
        }
        let timeout = self.timeout();
        let mut running = Running {
            action: action.clone(),
            step,
            start: t,
            end: None,
            monitor: None,
            pull: false,
        };
        match action.template {
            ActionTemplate::Perceive => {
                let kind = action.perceive_kind.expect("well-formed");
                let key = format!("perceive.{}", kind.name());
                match kind {
                    PerceiveKind::CheckAvailableObjects | PerceiveKind::PreciseMarkerDetection => {
                        running.end = Some(t + self.duration(&key));
                    }
                    PerceiveKind::DetectEmptyBox => {
                        let object = action.object.clone().ok_or_else(|| {
                            SimError::InvalidContext("detect_empty_box needs a box".into())
                        })?;
                        self.signals.box_empty.remove(&object);
                        let first = t + self.duration(&key);
                        running.monitor = Some(Monitor::EmptyBox {
                            object,
                            next: first,
                            deadline: first + timeout,
                        });
                    }
                    PerceiveKind::DetectToolPulling => {
                        self.signals.pull = false;
                        let object = action.object.clone().or_else(|| self.robot_holding()).ok_or_else(|| {
                            SimError::InvalidContext("detect_tool_pulling: the robot gripper is empty".into())
                        })?;
                        match self.robot_holding() {
                            Some(_) => {
                                running.monitor = Some(Monitor::ToolPull {
                                    object,
                                    k: 1,
                                    deadline: t + timeout,
                                });
                            }
                            // Nothing in the gripper: the detector reports no pull after one sample.
                            _ => running.end = Some(t + self.scenario.shear.period()),
                        }
                    }
                    PerceiveKind::DetectIdle => {
                        self.signals.idle = false;
                        let first = t + self.duration(&key);
                        running.monitor = Some(Monitor::Idle {
                            next: first,
                            streak: 0,
                            deadline: first + timeout,
                        });
                    }
                }
            }
            ActionTemplate::Wait => {
                let condition = action.wait_condition.clone().expect("well-formed");
                let signalled = match &condition {
                    WaitCondition::PullSignal => std::mem::take(&mut self.signals.pull),
                    WaitCondition::HumanIdle => std::mem::take(&mut self.signals.idle),
                    WaitCondition::BoxEmpty(b) => self.signals.box_empty.remove(b),
                    WaitCondition::ObjectAvailable(_) => self.wait_holds(&condition),
                };
                if signalled {
                    running.end = Some(t + self.duration("wait"));
                } else {
                    let poll = match condition {
                        WaitCondition::PullSignal => PULL_POLL,
                        WaitCondition::HumanIdle => IDLE_POLL,
                        _ => BOX_POLL,
                    };
                    running.monitor = Some(Monitor::Wait {
                        condition,
                        next: t + poll,
                        poll,
                        deadline: t + timeout,
                    });
                }
            }
            template => {
                running.end = Some(t + self.duration(template.name()));
            }
        }
        self.emit(
            EventKind::ActionStart,
            Some(self.robot_id.clone()),
            serde_json::to_value(ActionStartPayload { step, action }).expect("serializable"),
        );
        self.robot = Some(running);
        Ok(())
    }

    /// Ground-truth value of a wait condition.
    fn wait_holds(&self, c: &WaitCondition) -> bool {
        match c {
            WaitCondition::PullSignal => self.human.as_ref().is_some_and(|h| h.pull.is_some()),
            WaitCondition::HumanIdle => self.human_idle_truth(),
            WaitCondition::BoxEmpty(b) => self.truth.oc.get(b).and_then(|oc| oc.content_count) == Some(0),
            WaitCondition::ObjectAvailable(o) => {
                let decl = &self.domain.entities;
                self.truth.oc.get(o).is_some_and(|oc| {
                    oc.grasped_by
                        .iter()
                        .all(|h| decl.agent_kind(&h.agent) != Some(AgentKind::Human))
                })
            }
        }
    }

    fn end_robot(&mut self, timed_out: bool) {
        let r = self.robot.take().expect("robot running");
        self.emit(
            EventKind::ActionEnd,
            Some(self.robot_id.clone()),
            serde_json::to_value(ActionEndPayload {
                step: r.step,
                template: r.action.template,
                timed_out,
            })
            .expect("serializable"),
        );
    }

    fn publish(&mut self, result: PerceiveResult) {
        self.emit(
            EventKind::PerceiveResult,
            Some(self.robot_id.clone()),
            serde_json::to_value(&result).expect("serializable"),
        );
    }

    fn finish_robot_fixed(&mut self) -> Result<(), SimError> {
        let r = self.robot.as_ref().expect("robot running").clone();
        let duration = self.now - r.start;
        match r.action.template {
            ActionTemplate::Perceive => {
                let kind = r.action.perceive_kind.expect("well-formed");
                let data = match kind {
                    PerceiveKind::CheckAvailableObjects => {
                        let objects = check_available_objects(&self.truth, &self.domain.entities, &mut self.rng);
                        self.absorb_overview(&objects);
                        PerceiveData::AvailableObjects { objects }
                    }
                    PerceiveKind::PreciseMarkerDetection => {
                        let object = r
                            .action
                            .object
                            .clone()
                            .ok_or_else(|| SimError::InvalidContext("precise_marker_detection needs an object".into()))?;
                        let location = precise_marker(&self.truth, &self.domain.entities, &object, &mut self.rng);
                        self.absorb_marker(&object, location.as_ref());
                        PerceiveData::RefinedPose { object, location }
                    }
                    PerceiveKind::DetectToolPulling => PerceiveData::PullDetected {
                        object: r.action.object.clone().expect("checked at start"),
                        detected: false,
                    },
                    // Monitored kinds finish through poll_robot.
                    _ => unreachable!("monitored perceive with fixed end"),
                };
                self.publish(PerceiveResult { kind, duration, data });
            }
            ActionTemplate::Wait => {
                let condition = r.action.wait_condition.clone().expect("well-formed");
                self.emit(
                    EventKind::WaitSatisfied,
                    Some(self.robot_id.clone()),
                    json!({"condition": condition}),
                );
            }
            _ => {}
        }
        self.end_robot(false);
        Ok(())
    }

    fn poll_robot(&mut self, t: f64) -> Result<(), SimError> {
        let Some(r) = self.robot.clone() else { return Ok(()) };
        let Some(monitor) = r.monitor.clone() else { return Ok(()) };
        let duration = t - r.start;
        match monitor {
            Monitor::EmptyBox { object, next, deadline } => {
                if next > t {
                    return Ok(());
                }
                let empty = self.truth.oc.get(&object).and_then(|oc| oc.content_count) == Some(0);
                if empty || next >= deadline {
                    if empty {
                        self.signals.box_empty.insert(object.clone());
                        if let Some(oc) = self.belief.oc.get_mut(&object) {
                            oc.content_count = Some(0);
                        }
                    }
                    self.publish(PerceiveResult {
                        kind: PerceiveKind::DetectEmptyBox,
                        duration,
                        data: PerceiveData::BoxEmpty { object, empty },
                    });
                    self.end_robot(false);
                } else {
                    self.set_monitor(Monitor::EmptyBox {
                        object,
                        next: next + BOX_POLL,
                        deadline,
                    });
                }
            }
            Monitor::ToolPull { object, k, deadline } => {
                let shear = self.scenario.shear;
                let at = shear.sample_time(r.start, k);
                if at > t {
                    return Ok(());
                }
                let pull_start = self
                    .human
                    .as_ref()
                    .and_then(|h| h.pull.as_ref())
                    .filter(|(o, _)| *o == object)
                    .map(|(_, t0)| *t0);
                let reading = shear.sample(at, pull_start, &mut self.rng);
                let detected = shear.fires(reading);
                if detected || at >= deadline {
                    if detected {
                        self.signals.pull = true;
                        self.sync_object(&object);
                    }
                    self.publish(PerceiveResult {
                        kind: PerceiveKind::DetectToolPulling,
                        duration,
                        data: PerceiveData::PullDetected { object, detected },
                    });
                    self.end_robot(false);
                } else {
                    self.set_monitor(Monitor::ToolPull {
                        object,
                        k: k + 1,
                        deadline,
                    });
                }
            }
            Monitor::Idle { next, streak, deadline } => {
                if next > t {
                    return Ok(());
                }
                let truly = self.human_idle_truth();
                let reading = idle_reading(truly, self.scenario.perception_noise, &mut self.rng);
                let streak = if reading { streak + 1 } else { 0 };
                if streak >= IDLE_CONFIRM || next >= deadline {
                    let idle = streak >= IDLE_CONFIRM;
                    self.signals.idle = idle;
                    self.publish(PerceiveResult {
                        kind: PerceiveKind::DetectIdle,
                        duration,
                        data: PerceiveData::Idle { idle },
                    });
                    self.end_robot(false);
                } else {
                    self.set_monitor(Monitor::Idle {
                        next: next + IDLE_POLL,
                        streak,
                        deadline,
                    });
                }
            }
            Monitor::Wait {
                condition,
                next,
                poll,
                deadline,
            } => {
                if next > t {
                    return Ok(());
                }
                if self.wait_holds(&condition) {
                    match &condition {
                        WaitCondition::PullSignal => {
                            if let Some(o) = self.robot_holding() {
                                self.sync_object(&o);
                            }
                        }
                        WaitCondition::BoxEmpty(b) => {
                            if let Some(oc) = self.belief.oc.get_mut(b) {
                                oc.content_count = Some(0);
                            }
                        }
                        _ => {}
                    }
                    self.emit(
                        EventKind::WaitSatisfied,
                        Some(self.robot_id.clone()),
                        json!({"condition": condition}),
                    );
                    self.end_robot(false);
                } else if next >= deadline {
                    self.end_robot(true);
                    self.bump_recovery("wait timed out")?;
                    self.repair = Some(RepairRequest {
                        reason: format!("wait for {condition} timed out"),
                        focus: condition.object().cloned(),
                    });
                } else {
                    self.set_monitor(Monitor::Wait {
                        condition,
                        next: next + poll,
                        poll,
                        deadline,
                    });
                }
            }
        }
        Ok(())
    }

    fn set_monitor(&mut self, m: Monitor) {
        if let Some(r) = self.robot.as_mut() {
            r.monitor = Some(m);
        }
    }

    /// Copies an object's holders (and the affected hands) from ground truth into the belief.
    fn sync_object(&mut self, o: &ObjectId) {
        let (Some(oc), Some(old)) = (self.truth.oc.get(o).cloned(), self.belief.oc.get(o).cloned()) else {
            return;
        };
        for h in old.grasped_by.union(&oc.grasped_by) {
            if let Some(v) = self.truth.eea.get(h) {
                self.belief.eea.insert(h.clone(), *v);
            }
        }
        self.belief.oc.insert(o.clone(), oc);
    }

    fn robot_holds_in_belief(&self, o: &ObjectId) -> bool {
        self.belief.oc[o].grasped_by.iter().any(|h| h.agent == self.robot_id)
    }

    /// Objects the rest of the current plan refers to.
    fn mentioned_later(&self, o: &ObjectId) -> bool {
        self.plan.steps[self.cursor.min(self.plan.len())..]
            .iter()
            .any(|s| s.action.object.as_ref() == Some(o))
    }

    fn home_location(&self) -> Option<Location> {
        let h = self.human.as_ref()?;
        self.domain.entities.region(&h.layout.home).map(|r| r.center_location())
    }

    fn forget_human_holders(&mut self, o: &ObjectId) {
        let decl = &self.domain.entities;
        let humans: Vec<EffectorRef> = self.belief.oc[o]
            .grasped_by
            .iter()
            .filter(|h| decl.agent_kind(&h.agent) == Some(AgentKind::Human))
            .cloned()
            .collect();
        for h in humans {
            self.belief.eea.insert(h.clone(), true);
            let oc = self.belief.oc.get_mut(o).expect("known object");
            oc.grasped_by.remove(&h);
            if oc.grasped_by.is_empty() {
                oc.extras.insert("grasped".into(), "false".into());
            }
        }
    }

    /// Folds an overview report into the belief; requests a repair when a
    /// contradicted object matters to the rest of the plan.
    fn absorb_overview(&mut self, report: &BTreeMap<ObjectId, Location>) {
        let home = self.home_location();
        let ids: Vec<ObjectId> = self.belief.op.keys().cloned().collect();
        let mut contradicted = Vec::new();
        for o in ids {
            if self.robot_holds_in_belief(&o) {
                continue;
            }
            let old = self.belief.op[&o].location.clone();
            match report.get(&o) {
                Some(loc) => {
                    if old.region != loc.region || old.distance(loc) > CONTRADICTION_DISTANCE {
                        contradicted.push(o.clone());
                    }
                    self.belief.op.get_mut(&o).expect("known").location = loc.clone();
                    self.forget_human_holders(&o);
                }
                None => {
                    let Some(home) = home.clone() else { continue };
                    if old.region != home.region {
                        contradicted.push(o.clone());
                        self.belief.op.get_mut(&o).expect("known").location = home;
                    }
                }
            }
        }
        if self.repair.is_none() {
            if let Some(o) = contradicted.into_iter().find(|o| self.mentioned_later(o)) {
                self.repair = Some(RepairRequest {
                    reason: format!("{o} is not where it was believed to be"),
                    focus: Some(o),
                });
            }
        }
    }

    fn absorb_marker(&mut self, o: &ObjectId, seen: Option<&Location>) {
        match seen {
            Some(loc) => self.belief.op.get_mut(o).expect("known").location = loc.clone(),
            None => {
                if let Some(home) = self.home_location() {
                    self.belief.op.get_mut(o).expect("known").location = home;
                }
                if self.repair.is_none() {
                    self.repair = Some(RepairRequest {
                        reason: format!("marker of {o} not found"),
                        focus: Some(o.clone()),
                    });
                }
            }
        }
    }

    // ---- human ----

    fn human_duration(&mut self, a: &PrimitiveAction) -> f64 {
        let key = match (&a.template, &a.manip_effect) {
            (ActionTemplate::Manipulate, Some(CharacteristicEdit::Assemble | CharacteristicEdit::Disassemble)) => {
                "human.assemble".to_string()
            }
            (ActionTemplate::Manipulate, Some(CharacteristicEdit::Take)) => "human.take".to_string(),
            (ActionTemplate::Manipulate, Some(CharacteristicEdit::Dof(_))) => "human.dof".to_string(),
            (ActionTemplate::Manipulate, _) => "human.set".to_string(),
            (t, _) => format!("human.{}", t.name()),
        };
        self.duration(&key) * self.scenario.policy.human_scale()
    }

    fn finish_human(&mut self) {
        let Some(r) = self.human_running.take() else { return };
        let agent = r.action.agent.clone();
        if let Some(h) = self.human.as_mut() {
            if r.pull {
                if let Some(o) = &r.action.object {
                    h.pull = Some((o.clone(), self.now));
                }
            }
            if r.action.template == ActionTemplate::Release
                && h.pull.as_ref().map(|(o, _)| Some(o) == r.action.object.as_ref()).unwrap_or(false)
            {
                h.pull = None;
            }
        }
        self.emit(
            EventKind::ActionEnd,
            Some(agent),
            serde_json::to_value(ActionEndPayload {
                step: None,
                template: r.action.template,
                timed_out: false,
            })
            .expect("serializable"),
        );
    }

    fn human_decide(&mut self, t: f64) -> Result<(), SimError> {
        if self.human.is_none() || self.human_running.is_some() {
            return Ok(());
        }
        for _ in 0..4 {
            if self.human_job.is_none() {
                if self.interactive() {
                    return Ok(());
                }
                let policy = self.scenario.policy;
                let waiting = self.robot_watching_human();
                let h = self.human.as_mut().expect("checked");
                self.human_job = h.next_job(&self.truth, &self.domain.entities, policy, waiting, &mut self.rng);
                if self.human_job.is_none() {
                    return Ok(());
                }
            }
            let job = self.human_job.as_mut().expect("set above");
            let Some(action) = job.actions.pop_front() else {
                self.human_job = None;
                continue;
            };
            let pull = job.pull && action.template == ActionTemplate::Grasp;
            let label = job.label;
            let verdict = preconditions(&action, &self.truth, &self.domain.entities)?;
            if !verdict.is_ok() {
                debug!("t={t:.2} human job {label} aborted at {action}: {verdict}");
                let agent = action.agent.clone();
                self.emit(
                    EventKind::HumanEvent,
                    Some(agent),
                    json!({"event": "job_aborted", "job": label, "action": action.to_string(), "detail": verdict.to_string()}),
                );
                self.human_job = None;
                return Ok(());
            }
            self.start_human(action, pull, t)?;
            if self.human_job.as_ref().is_some_and(|j| j.actions.is_empty()) {
                self.human_job = None;
            }
            return Ok(());
        }
        Ok(())
    }

    fn start_human(&mut self, action: PrimitiveAction, pull: bool, t: f64) -> Result<(), SimError> {
        self.truth = apply(&action, &self.truth, 0.0, &self.domain.entities)?;
        self.truth.clock = t;
        let d = self.human_duration(&action);
        let agent = action.agent.clone();
        self.emit(
            EventKind::ActionStart,
            Some(agent),
            serde_json::to_value(ActionStartPayload {
                step: None,
                action: action.clone(),
            })
            .expect("serializable"),
        );
        self.human_running = Some(Running {
            action,
            step: None,
            start: t,
            end: Some(t + d),
            monitor: None,
            pull,
        });
        Ok(())
    }

    fn check_goal(&mut self) {
        let done = !self.finished
            && self.robot.is_none()
            && self.queue.is_empty()
            && self.repair.is_none()
            && !self.flagged
            && self.cursor >= self.plan.len()
            && self.human_running.is_none()
            && self.human_job.is_none();
        if done {
            self.emit(EventKind::GoalReached, None, json!({"steps_executed": self.cursor}));
            self.truth.clock = self.now;
            self.finished = true;
        }
    }

    // ---- interactive input ----

    fn reject(template: Option<ActionTemplate>, verdict: &Verdict) -> Rejection {
        Rejection::new(template, verdict.families().into_iter().collect(), verdict.to_string())
    }

    /// Builds an operator job and checks it against a copy of the ground truth.
    fn operator_job(&self, ev: &HumanEvent) -> Result<Job, Rejection> {
        let decl = &self.domain.entities;
        let h = self
            .human
            .as_ref()
            .ok_or_else(|| Rejection::new(None, vec![], "domain has no human agent"))?;
        let me = h.id.as_str();
        let s = &self.truth;
        let need_object = |template: ActionTemplate, o: &Option<ObjectId>| -> Result<ObjectId, Rejection> {
            let o = o
                .clone()
                .ok_or_else(|| Rejection::new(Some(template), vec![], "an object is required"))?;
            if !s.op.contains_key(&o) {
                return Err(Rejection::new(Some(template), vec![], format!("unknown object `{o}`")));
            }
            Ok(o)
        };
        let region_loc = |template: ActionTemplate, r: &RegionId| -> Result<Location, Rejection> {
            decl.region(r)
                .map(|d| d.center_location())
                .ok_or_else(|| Rejection::new(Some(template), vec![], format!("unknown region `{r}`")))
        };
        let no_hand = |template| Rejection::new(Some(template), vec![FeatureFamily::Eea], format!("{me} has no free hand"));
        let (actions, pull) = match ev {
            HumanEvent::PullTool => {
                let Some(o) = self.robot_holding() else {
                    return Err(Rejection::new(
                        Some(ActionTemplate::Perceive),
                        vec![FeatureFamily::Eea],
                        "detect_tool_pulling: the robot gripper is empty",
                    ));
                };
                let hand = h.free_hand(s).ok_or_else(|| no_hand(ActionTemplate::Grasp))?;
                (
                    vec![
                        PrimitiveAction::move_to(me, hand.as_str(), s.op[&o].location.clone()),
                        PrimitiveAction::grasp(me, hand.as_str(), o.as_str()),
                    ],
                    true,
                )
            }
            HumanEvent::HumanAction {
                template,
                object,
                region,
                edit,
            } => {
                let template = *template;
                let actions = match template {
                    ActionTemplate::Grasp => {
                        let o = need_object(template, object)?;
                        // Taking a held object is a pull_tool, not a pick.
                        if let Some(holder) = s.oc[&o].grasped_by.iter().next() {
                            return Err(Rejection::new(
                                Some(template),
                                vec![FeatureFamily::Oc],
                                format!("{o} is already grasped by {}.{}", holder.agent, holder.effector),
                            ));
                        }
                        let hand = h.free_hand(s).ok_or_else(|| no_hand(template))?;
                        vec![
                            PrimitiveAction::move_to(me, hand.as_str(), s.op[&o].location.clone()),
                            PrimitiveAction::grasp(me, hand.as_str(), o.as_str()),
                        ]
                    }
                    ActionTemplate::Release => {
                        let held = h.effectors.iter().find_map(|e| {
                            s.held_by(&EffectorRef {
                                agent: h.id.clone(),
                                effector: e.clone(),
                            })
                            .cloned()
                        });
                        let o = match object {
                            Some(_) => need_object(template, object)?,
                            None => held.ok_or_else(|| {
                                Rejection::new(Some(template), vec![FeatureFamily::Eea], format!("{me} holds nothing"))
                            })?,
                        };
                        let hand = h.holding_hand(s, &o).ok_or_else(|| {
                            Rejection::new(Some(template), vec![FeatureFamily::Eea], format!("{me} is not holding {o}"))
                        })?;
                        let mut v = Vec::new();
                        if let Some(r) = region {
                            v.push(PrimitiveAction::move_to(me, hand.as_str(), region_loc(template, r)?));
                        }
                        v.push(PrimitiveAction::release(me, hand.as_str(), o.as_str()));
                        v
                    }
                    ActionTemplate::Move => {
                        let target = match (region, object) {
                            (Some(r), _) => region_loc(template, r)?,
                            (None, Some(_)) => s.op[&need_object(template, object)?].location.clone(),
                            (None, None) => {
                                return Err(Rejection::new(Some(template), vec![], "a region or object is required"))
                            }
                        };
                        let hand = h
                            .effectors
                            .iter()
                            .find(|e| {
                                s.is_free(&EffectorRef {
                                    agent: h.id.clone(),
                                    effector: (*e).clone(),
                                }) == Some(false)
                            })
                            .or(h.effectors.first())
                            .cloned()
                            .ok_or_else(|| no_hand(template))?;
                        vec![PrimitiveAction::move_to(me, hand.as_str(), target)]
                    }
                    ActionTemplate::Manipulate => {
                        let o = need_object(template, object)?;
                        let edit = edit.clone().unwrap_or(CharacteristicEdit::Assemble);
                        vec![PrimitiveAction::manipulate(me, o.as_str(), edit)]
                    }
                    ActionTemplate::Perceive | ActionTemplate::Wait => {
                        return Err(Rejection::new(
                            Some(template),
                            vec![],
                            "operators perceive and wait on their own; nothing to simulate",
                        ))
                    }
                };
                (actions, false)
            }
            HumanEvent::IdleToggle { .. } => unreachable!("handled by caller"),
        };
        let mut probe = s.clone();
        for a in &actions {
            match preconditions(a, &probe, decl) {
                Ok(Verdict::Ok) => {}
                Ok(v) => return Err(Self::reject(Some(a.template), &v)),
                Err(e) => return Err(Rejection::new(Some(a.template), vec![], e.to_string())),
            }
            probe = apply(a, &probe, 0.0, decl).map_err(|e| Rejection::new(Some(a.template), vec![], e.to_string()))?;
        }
        let label = match ev {
            HumanEvent::PullTool => "pull_tool",
            _ => "operator",
        };
        Ok(Job {
            label,
            actions: actions.into(),
            pull,
        })
    }

    /// Validates an operator event against the ground truth and applies it
    /// at the current virtual time.
    pub fn inject_human_event(&mut self, ev: HumanEvent) -> Result<Ack, Rejection> {
        if self.finished {
            return Err(Rejection::new(None, vec![], "session has finished"));
        }
        let agent = self.human.as_ref().map(|h| h.id.clone());
        if let HumanEvent::IdleToggle { flag } = ev {
            self.declared_idle = flag;
            self.emit(EventKind::HumanEvent, agent, json!({"event": "idle_toggle", "flag": flag}));
            return Ok(Ack { t: self.now });
        }
        if self.human_running.is_some() || self.human_job.is_some() {
            return Err(Rejection::new(None, vec![], "the human is still busy with the previous action"));
        }
        let job = self.operator_job(&ev)?;
        let mut payload = serde_json::to_value(&ev).expect("serializable");
        payload["accepted"] = json!(true);
        self.emit(EventKind::HumanEvent, agent, payload);
        if !matches!(ev, HumanEvent::PullTool) {
            self.flagged = true;
        }
        self.human_job = Some(job);
        let t = self.now;
        self.human_decide(t).map_err(|e| Rejection::new(None, vec![], e.to_string()))?;
        // A robot with nothing to do picks the event up straight away.
        self.dispatch(t).map_err(|e| Rejection::new(None, vec![], e.to_string()))?;
        Ok(Ack { t })
    }

    /// Runs one perception routine against the current ground truth without
    /// advancing time or touching the belief. Event-driven kinds are sampled
    /// forward from now assuming the world stays as it is.
    pub fn simulate_perceive(&mut self, kind: PerceiveKind, object: Option<&ObjectId>) -> Result<PerceiveResult, SimError> {
        let key = format!("perceive.{}", kind.name());
        let need = |o: Option<&ObjectId>| -> Result<ObjectId, SimError> {
            o.cloned()
                .ok_or_else(|| SimError::InvalidContext(format!("{} needs an object", kind.name())))
        };
        let horizon = if self.interactive() { 600.0 } else { self.scenario.wait_timeout };
        Ok(match kind {
            PerceiveKind::CheckAvailableObjects => {
                let duration = self.duration(&key);
                let objects = check_available_objects(&self.truth, &self.domain.entities, &mut self.rng);
                PerceiveResult {
                    kind,
                    duration,
                    data: PerceiveData::AvailableObjects { objects },
                }
            }
            PerceiveKind::PreciseMarkerDetection => {
                let object = need(object)?;
                let duration = self.duration(&key);
                let location = precise_marker(&self.truth, &self.domain.entities, &object, &mut self.rng);
                PerceiveResult {
                    kind,
                    duration,
                    data: PerceiveData::RefinedPose { object, location },
                }
            }
            PerceiveKind::DetectEmptyBox => {
                let object = need(object)?;
                let content = self
                    .truth
                    .oc
                    .get(&object)
                    .and_then(|oc| oc.content_count)
                    .ok_or_else(|| SimError::InvalidContext(format!("{object} is not a container")))?;
                let duration = self.duration(&key);
                PerceiveResult {
                    kind,
                    duration,
                    data: PerceiveData::BoxEmpty {
                        object,
                        empty: content == 0,
                    },
                }
            }
            PerceiveKind::DetectToolPulling => {
                let held = self
                    .robot_holding()
                    .ok_or_else(|| SimError::InvalidContext("detect_tool_pulling: the robot gripper is empty".into()))?;
                let object = object.cloned().unwrap_or(held);
                let pull = self
                    .human
                    .as_ref()
                    .and_then(|h| h.pull.clone())
                    .filter(|(o, _)| *o == object)
                    .map(|(_, t0)| t0);
                let shear = self.scenario.shear;
                let fired = shear.first_crossing(self.now, pull, self.now + horizon, &mut self.rng);
                PerceiveResult {
                    kind,
                    duration: fired.unwrap_or(self.now + horizon) - self.now,
                    data: PerceiveData::PullDetected {
                        object,
                        detected: fired.is_some(),
                    },
                }
            }
            PerceiveKind::DetectIdle => {
                let truly = self.human_idle_truth();
                let mut t = self.duration(&key);
                let mut streak = 0;
                loop {
                    let reading = idle_reading(truly, self.scenario.perception_noise, &mut self.rng);
                    streak = if reading { streak + 1 } else { 0 };
                    if streak >= IDLE_CONFIRM || t >= horizon {
                        break;
                    }
                    t += IDLE_POLL;
                }
                PerceiveResult {
                    kind,
                    duration: t,
                    data: PerceiveData::Idle {
                        idle: streak >= IDLE_CONFIRM,
                    },
                }
            }
        })
    }
}
