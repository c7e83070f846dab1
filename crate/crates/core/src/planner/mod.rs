//! Depth-first HTN planner with document-order method choice and full
//! backtracking.

mod tree;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{
    apply, preconditions, ActionError, ActionTemplate, CapabilityProfile, CharacteristicEdit,
    PerceiveKind, PrimitiveAction, Verdict, WaitCondition,
};
use crate::state::{AgentId, EffectorRef, EntityDeclarations, InteractionState, ObjectId};

pub use tree::{DecompositionTree, NodeKind, TreeNode};

/// Nesting limit for compound tasks.
pub const MAX_DEPTH: usize = 10_000;
/// Upper bound on method expansions before the search gives up.
pub const MAX_EXPANSIONS: usize = 5_000_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    Var(String),
    Const(String),
}

impl Term {
    pub fn constant(s: &str) -> Self {
        Term::Const(s.to_string())
    }

    fn ground(&self, subst: &BTreeMap<&str, &str>) -> Term {
        match self {
            Term::Var(v) => match subst.get(v.as_str()) {
                Some(c) => Term::Const(c.to_string()),
                None => self.clone(),
            },
            Term::Const(_) => self.clone(),
        }
    }

    fn value(&self) -> Result<&str, PlanError> {
        match self {
            Term::Const(c) => Ok(c),
            Term::Var(v) => Err(PlanError::Unbound(v.clone())),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) | Term::Const(v) => f.write_str(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    /// Object lies in region.
    At(Term, Term),
    /// End-effector (agent, effector) is free.
    Free(Term, Term),
    /// End-effector (agent, effector) holds object.
    Holding(Term, Term, Term),
    Grasped(Term),
    Assembled(Term),
    /// Container content count is zero.
    Empty(Term),
}

impl Predicate {
    pub fn name(&self) -> &'static str {
        match self {
            Predicate::At(..) => "at",
            Predicate::Free(..) => "free",
            Predicate::Holding(..) => "holding",
            Predicate::Grasped(_) => "grasped",
            Predicate::Assembled(_) => "assembled",
            Predicate::Empty(_) => "empty",
        }
    }

    pub fn args(&self) -> Vec<&Term> {
        match self {
            Predicate::At(a, b) | Predicate::Free(a, b) => vec![a, b],
            Predicate::Holding(a, b, c) => vec![a, b, c],
            Predicate::Grasped(a) | Predicate::Assembled(a) | Predicate::Empty(a) => vec![a],
        }
    }

    fn ground(&self, s: &BTreeMap<&str, &str>) -> Predicate {
        match self {
            Predicate::At(a, b) => Predicate::At(a.ground(s), b.ground(s)),
            Predicate::Free(a, b) => Predicate::Free(a.ground(s), b.ground(s)),
            Predicate::Holding(a, b, c) => Predicate::Holding(a.ground(s), b.ground(s), c.ground(s)),
            Predicate::Grasped(a) => Predicate::Grasped(a.ground(s)),
            Predicate::Assembled(a) => Predicate::Assembled(a.ground(s)),
            Predicate::Empty(a) => Predicate::Empty(a.ground(s)),
        }
    }

    fn holds(&self, state: &InteractionState) -> Result<bool, PlanError> {
        let oc = |o: &Term| -> Result<_, PlanError> { Ok(state.oc.get(&ObjectId::from(o.value()?))) };
        Ok(match self {
            Predicate::At(o, r) => {
                let (o, r) = (o.value()?, r.value()?);
                state
                    .object_location(&ObjectId::from(o))
                    .map(|l| l.region.0 == r)
                    .unwrap_or(false)
            }
            Predicate::Free(a, e) => state
                .eea
                .get(&EffectorRef::new(a.value()?, e.value()?))
                .copied()
                .unwrap_or(false),
            Predicate::Holding(a, e, o) => {
                let eff = EffectorRef::new(a.value()?, e.value()?);
                oc(o)?.map(|c| c.grasped_by.contains(&eff)).unwrap_or(false)
            }
            Predicate::Grasped(o) => oc(o)?.map(|c| !c.grasped_by.is_empty()).unwrap_or(false),
            Predicate::Assembled(o) => oc(o)?.map(|c| c.assembled).unwrap_or(false),
            Predicate::Empty(o) => oc(o)?.map(|c| c.content_count == Some(0)).unwrap_or(false),
        })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<String> = self.args().iter().map(|t| t.to_string()).collect();
        write!(f, "{}({})", self.name(), args.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Literal {
    pub negated: bool,
    pub pred: Predicate,
}

impl Literal {
    pub fn holds(&self, state: &InteractionState) -> Result<bool, PlanError> {
        Ok(self.pred.holds(state)? != self.negated)
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("!")?;
        }
        write!(f, "{}", self.pred)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WaitPattern {
    PullSignal,
    HumanIdle,
    BoxEmpty(Term),
    ObjectAvailable(Term),
}

/// A primitive task with possibly unbound parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrimitivePattern {
    Grasp { agent: Term, effector: Term, object: Term },
    Release { agent: Term, effector: Term, object: Term },
    /// Target names either a region (its center) or an object (its current location).
    Move { agent: Term, effector: Term, target: Term },
    Perceive { agent: Term, kind: PerceiveKind, object: Option<Term> },
    Wait { agent: Term, condition: WaitPattern },
    Manipulate { agent: Term, object: Term, edit: CharacteristicEdit },
}

impl PrimitivePattern {
    pub fn template(&self) -> ActionTemplate {
        match self {
            PrimitivePattern::Grasp { .. } => ActionTemplate::Grasp,
            PrimitivePattern::Release { .. } => ActionTemplate::Release,
            PrimitivePattern::Move { .. } => ActionTemplate::Move,
            PrimitivePattern::Perceive { .. } => ActionTemplate::Perceive,
            PrimitivePattern::Wait { .. } => ActionTemplate::Wait,
            PrimitivePattern::Manipulate { .. } => ActionTemplate::Manipulate,
        }
    }

    pub fn agent(&self) -> &Term {
        match self {
            PrimitivePattern::Grasp { agent, .. }
            | PrimitivePattern::Release { agent, .. }
            | PrimitivePattern::Move { agent, .. }
            | PrimitivePattern::Perceive { agent, .. }
            | PrimitivePattern::Wait { agent, .. }
            | PrimitivePattern::Manipulate { agent, .. } => agent,
        }
    }

    /// Every term in the pattern, in argument order.
    pub fn terms(&self) -> Vec<&Term> {
        match self {
            PrimitivePattern::Grasp { agent, effector, object }
            | PrimitivePattern::Release { agent, effector, object } => vec![agent, effector, object],
            PrimitivePattern::Move { agent, effector, target } => vec![agent, effector, target],
            PrimitivePattern::Perceive { agent, object, .. } => {
                let mut v = vec![agent];
                v.extend(object.iter());
                v
            }
            PrimitivePattern::Wait { agent, condition } => match condition {
                WaitPattern::BoxEmpty(o) | WaitPattern::ObjectAvailable(o) => vec![agent, o],
                _ => vec![agent],
            },
            PrimitivePattern::Manipulate { agent, object, .. } => vec![agent, object],
        }
    }

    fn ground(&self, s: &BTreeMap<&str, &str>) -> PrimitivePattern {
        use PrimitivePattern::*;
        match self {
            Grasp { agent, effector, object } => Grasp {
                agent: agent.ground(s),
                effector: effector.ground(s),
                object: object.ground(s),
            },
            Release { agent, effector, object } => Release {
                agent: agent.ground(s),
                effector: effector.ground(s),
                object: object.ground(s),
            },
            Move { agent, effector, target } => Move {
                agent: agent.ground(s),
                effector: effector.ground(s),
                target: target.ground(s),
            },
            Perceive { agent, kind, object } => Perceive {
                agent: agent.ground(s),
                kind: *kind,
                object: object.as_ref().map(|o| o.ground(s)),
            },
            Wait { agent, condition } => Wait {
                agent: agent.ground(s),
                condition: match condition {
                    WaitPattern::BoxEmpty(o) => WaitPattern::BoxEmpty(o.ground(s)),
                    WaitPattern::ObjectAvailable(o) => WaitPattern::ObjectAvailable(o.ground(s)),
                    c => c.clone(),
                },
            },
            Manipulate { agent, object, edit } => Manipulate {
                agent: agent.ground(s),
                object: object.ground(s),
                edit: edit.clone(),
            },
        }
    }

    /// Binds a ground pattern to a concrete action, resolving Move targets
    /// against the state.
    pub fn bind(
        &self,
        state: &InteractionState,
        decl: &EntityDeclarations,
    ) -> Result<PrimitiveAction, PlanError> {
        use PrimitivePattern::*;
        Ok(match self {
            Grasp { agent, effector, object } => {
                PrimitiveAction::grasp(agent.value()?, effector.value()?, object.value()?)
            }
            Release { agent, effector, object } => {
                PrimitiveAction::release(agent.value()?, effector.value()?, object.value()?)
            }
            Move { agent, effector, target } => {
                let t = target.value()?;
                let a = if let Some(r) = decl.region(&t.into()) {
                    PrimitiveAction::move_to(agent.value()?, effector.value()?, r.center_location())
                } else if let Some(loc) = state.object_location(&t.into()) {
                    let mut a = PrimitiveAction::move_to(agent.value()?, effector.value()?, loc.clone());
                    a.object = Some(t.into());
                    a
                } else {
                    return Err(PlanError::Bind(format!(
                        "move target `{t}` is neither a region nor an object"
                    )));
                };
                a
            }
            Perceive { agent, kind, object } => {
                let mut a = PrimitiveAction::perceive(agent.value()?, *kind);
                if let Some(o) = object {
                    a.object = Some(o.value()?.into());
                }
                a
            }
            Wait { agent, condition } => {
                let c = match condition {
                    WaitPattern::PullSignal => WaitCondition::PullSignal,
                    WaitPattern::HumanIdle => WaitCondition::HumanIdle,
                    WaitPattern::BoxEmpty(o) => WaitCondition::BoxEmpty(o.value()?.into()),
                    WaitPattern::ObjectAvailable(o) => {
                        WaitCondition::ObjectAvailable(o.value()?.into())
                    }
                };
                PrimitiveAction::wait(agent.value()?, c)
            }
            Manipulate { agent, object, edit } => {
                PrimitiveAction::manipulate(agent.value()?, object.value()?, edit.clone())
            }
        })
    }
}

impl fmt::Display for WaitPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaitPattern::PullSignal => f.write_str("pull_signal"),
            WaitPattern::HumanIdle => f.write_str("human_idle"),
            WaitPattern::BoxEmpty(o) => write!(f, "box_empty({o})"),
            WaitPattern::ObjectAvailable(o) => write!(f, "object_available({o})"),
        }
    }
}

impl fmt::Display for PrimitivePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use PrimitivePattern::*;
        match self {
            Grasp { agent, effector, object } => write!(f, "grasp({agent}, {effector}, {object})"),
            Release { agent, effector, object } => {
                write!(f, "release({agent}, {effector}, {object})")
            }
            Move { agent, effector, target } => write!(f, "move({agent}, {effector}, {target})"),
            Perceive { agent, kind, object: None } => write!(f, "perceive({agent}, {kind})"),
            Perceive { agent, kind, object: Some(o) } => {
                write!(f, "perceive({agent}, {kind}, {o})")
            }
            Wait { agent, condition } => write!(f, "wait({agent}, {condition})"),
            Manipulate { agent, object, edit } => write!(f, "manipulate({agent}, {object}, {edit})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Primitive(PrimitivePattern),
    Compound { name: String, args: Vec<Term> },
}

impl Task {
    pub fn compound(name: &str, args: &[&str]) -> Self {
        Task::Compound {
            name: name.to_string(),
            args: args.iter().map(|a| Term::constant(a)).collect(),
        }
    }

    pub fn ground(&self, s: &BTreeMap<&str, &str>) -> Task {
        match self {
            Task::Primitive(p) => Task::Primitive(p.ground(s)),
            Task::Compound { name, args } => Task::Compound {
                name: name.clone(),
                args: args.iter().map(|a| a.ground(s)).collect(),
            },
        }
    }

    /// Whether the task mentions `id` as a constant argument.
    pub fn mentions(&self, id: &str) -> bool {
        let hit = |t: &Term| matches!(t, Term::Const(c) if c == id);
        match self {
            Task::Primitive(p) => p.terms().into_iter().any(hit),
            Task::Compound { args, .. } => args.iter().any(hit),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Primitive(p) => write!(f, "{p}"),
            Task::Compound { name, args } => {
                let a: Vec<String> = args.iter().map(|t| t.to_string()).collect();
                write!(f, "{name}({})", a.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub task_name: String,
    pub params: Vec<String>,
    pub precondition: Vec<Literal>,
    pub subtasks: Vec<Task>,
}

impl Method {
    fn substitution<'a>(&'a self, args: &'a [String]) -> BTreeMap<&'a str, &'a str> {
        self.params
            .iter()
            .map(|p| p.as_str())
            .zip(args.iter().map(|a| a.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub template: ActionTemplate,
    pub capable_agents: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub entities: EntityDeclarations,
    /// Methods in document order; alternatives for one task keep their relative order.
    pub methods: Vec<Method>,
    pub goal: Task,
}

impl Domain {
    pub fn capabilities(&self) -> CapabilityProfile {
        CapabilityProfile::from_decl(&self.entities)
    }

    pub fn operators(&self) -> Vec<Operator> {
        ActionTemplate::ALL
            .into_iter()
            .map(|t| Operator {
                template: t,
                capable_agents: self
                    .entities
                    .agents
                    .iter()
                    .filter(|a| a.caps.contains(&t))
                    .map(|a| a.id.clone())
                    .collect(),
            })
            .collect()
    }

    pub fn methods_for<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Method> + 'a {
        self.methods.iter().filter(move |m| m.task_name == name)
    }

    /// Compound task names in order of first appearance.
    pub fn task_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for m in &self.methods {
            if !out.contains(&m.task_name.as_str()) {
                out.push(&m.task_name);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub index: usize,
    pub action: PrimitiveAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<DecompositionTree>,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = &PrimitiveAction> {
        self.steps.iter().map(|s| &s.action)
    }

    /// Structured step records: index, agent, template, bound action and method chain.
    pub fn records(&self) -> Vec<StepRecord> {
        self.steps
            .iter()
            .map(|s| StepRecord {
                step: s.index,
                agent: s.action.agent.clone(),
                template: s.action.template,
                text: s.action.to_string(),
                action: s.action.clone(),
                methods: self
                    .tree
                    .as_ref()
                    .map(|t| t.method_chain(s.index))
                    .unwrap_or_default(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub agent: AgentId,
    pub template: ActionTemplate,
    pub text: String,
    pub action: PrimitiveAction,
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no decomposition for {task} (deepest frontier at step {step}): {reason}")]
    NoDecomposition {
        task: String,
        step: usize,
        reason: String,
    },
    #[error("recursion depth limit {limit} exceeded while expanding {task}")]
    RecursionLimit { task: String, limit: usize },
    #[error("search abandoned after {0} method expansions")]
    SearchLimit(usize),
    #[error("compound task `{0}` has no methods")]
    UnknownTask(String),
    #[error("variable `{0}` is unbound")]
    Unbound(String),
    #[error("cannot bind primitive: {0}")]
    Bind(String),
    #[error("action error: {0}")]
    Action(#[from] ActionError),
    #[error("plan carries no decomposition provenance")]
    MissingProvenance,
}

/// First failing step of a plan under forward simulation.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("step {index} ({action}) fails: {reason}")]
pub struct ValidationFailure {
    pub index: usize,
    pub action: String,
    pub reason: String,
    pub verdict: Option<Verdict>,
}

struct Item {
    task: Task,
    parent: usize,
    slot: usize,
    depth: usize,
}

struct Cons {
    item: Item,
    next: Agenda,
}

type Agenda = Option<Rc<Cons>>;

fn push_front(items: Vec<Item>, rest: Agenda) -> Agenda {
    items
        .into_iter()
        .rev()
        .fold(rest, |next, item| Some(Rc::new(Cons { item, next })))
}

struct ChoicePoint {
    state: InteractionState,
    agenda: Agenda,
    next_method: usize,
    plan_len: usize,
    tree_len: usize,
}

struct Frontier {
    task: String,
    step: usize,
    reason: String,
}

struct Search<'d> {
    domain: &'d Domain,
    index: HashMap<&'d str, Vec<&'d Method>>,
    state: InteractionState,
    steps: Vec<PlanStep>,
    tree: DecompositionTree,
    stack: Vec<ChoicePoint>,
    frontier: Option<Frontier>,
    expansions: usize,
}

impl<'d> Search<'d> {
    fn new(domain: &'d Domain, state: &InteractionState, tasks: &[Task]) -> Self {
        let mut index: HashMap<&str, Vec<&Method>> = HashMap::new();
        for m in &domain.methods {
            index.entry(m.task_name.as_str()).or_default().push(m);
        }
        Search {
            domain,
            index,
            state: state.clone(),
            steps: Vec::new(),
            tree: DecompositionTree::with_root(tasks.to_vec()),
            stack: Vec::new(),
            frontier: None,
            expansions: 0,
        }
    }

    fn fail(&mut self, task: &Task, reason: String) {
        let step = self.steps.len();
        if self.frontier.as_ref().map(|f| step > f.step).unwrap_or(true) {
            self.frontier = Some(Frontier {
                task: task.to_string(),
                step,
                reason,
            });
        }
    }

    /// First applicable method for a compound at or after `from`.
    fn choose(&mut self, task: &Task, from: usize) -> Result<Option<(usize, Vec<Task>)>, PlanError> {
        let Task::Compound { name, args } = task else {
            unreachable!("choose on primitive");
        };
        let methods = self
            .index
            .get(name.as_str())
            .ok_or_else(|| PlanError::UnknownTask(name.clone()))?
            .clone();
        let args: Vec<String> = args
            .iter()
            .map(|a| a.value().map(str::to_string))
            .collect::<Result<_, _>>()?;
        let mut last_reason = None;
        for (i, m) in methods.iter().enumerate().skip(from) {
            self.expansions += 1;
            if self.expansions > MAX_EXPANSIONS {
                return Err(PlanError::SearchLimit(MAX_EXPANSIONS));
            }
            let subst = m.substitution(&args);
            let mut failed = None;
            for lit in &m.precondition {
                let ground = Literal {
                    negated: lit.negated,
                    pred: lit.pred.ground(&subst),
                };
                if !ground.holds(&self.state)? {
                    failed = Some(ground);
                    break;
                }
            }
            match failed {
                None => {
                    let subs = m.subtasks.iter().map(|t| t.ground(&subst)).collect();
                    return Ok(Some((i, subs)));
                }
                Some(lit) => last_reason = Some(format!("method {} precondition {lit} is false", i + 1)),
            }
        }
        if let Some(reason) = last_reason {
            self.fail(task, reason);
        } else {
            self.fail(task, "no remaining methods".into());
        }
        Ok(None)
    }

    fn expand(&mut self, item: &Item, method: usize, subs: Vec<Task>, rest: Agenda) -> Agenda {
        let node = self.tree.push(
            item.parent,
            item.slot,
            NodeKind::Compound {
                name: match &item.task {
                    Task::Compound { name, .. } => name.clone(),
                    Task::Primitive(_) => unreachable!(),
                },
                method,
            },
            Some(item.task.clone()),
        );
        let items = subs
            .into_iter()
            .enumerate()
            .map(|(slot, task)| Item {
                task,
                parent: node,
                slot,
                depth: item.depth + 1,
            })
            .collect();
        push_front(items, rest)
    }

    /// Pops choice points until one has an untried applicable method.
    fn backtrack(&mut self) -> Result<Option<Agenda>, PlanError> {
        while let Some(cp) = self.stack.pop() {
            self.state = cp.state;
            self.steps.truncate(cp.plan_len);
            self.tree.truncate(cp.tree_len);
            let head = cp.agenda.as_ref().expect("choice point has a head");
            if let Some((i, subs)) = self.choose(&head.item.task, cp.next_method)? {
                self.stack.push(ChoicePoint {
                    state: self.state.clone(),
                    agenda: cp.agenda.clone(),
                    next_method: i + 1,
                    plan_len: cp.plan_len,
                    tree_len: cp.tree_len,
                });
                let rest = head.next.clone();
                return Ok(Some(self.expand(&head.item, i, subs, rest)));
            }
        }
        Ok(None)
    }

    fn run(mut self) -> Result<Plan, PlanError> {
        let roots: Vec<Item> = self
            .tree
            .root_tasks()
            .iter()
            .enumerate()
            .map(|(slot, task)| Item {
                task: task.clone(),
                parent: 0,
                slot,
                depth: 1,
            })
            .collect();
        let mut agenda = push_front(roots, None);
        while let Some(cell) = agenda.clone() {
            let item = &cell.item;
            if item.depth > MAX_DEPTH {
                return Err(PlanError::RecursionLimit {
                    task: item.task.to_string(),
                    limit: MAX_DEPTH,
                });
            }
            let advanced = match &item.task {
                Task::Primitive(p) => {
                    let action = p.bind(&self.state, &self.domain.entities)?;
                    let verdict = preconditions(&action, &self.state, &self.domain.entities);
                    match verdict {
                        Ok(Verdict::Ok) => {
                            self.state = apply(&action, &self.state, 0.0, &self.domain.entities)?;
                            let index = self.steps.len();
                            self.tree.push(item.parent, item.slot, NodeKind::Step { index }, Some(item.task.clone()));
                            self.steps.push(PlanStep { index, action });
                            Some(cell.next.clone())
                        }
                        Ok(v) => {
                            self.fail(&item.task, format!("{action}: {v}"));
                            None
                        }
                        Err(e) => {
                            self.fail(&item.task, format!("{action}: {e}"));
                            None
                        }
                    }
                }
                Task::Compound { .. } => match self.choose(&item.task, 0)? {
                    Some((i, subs)) => {
                        self.stack.push(ChoicePoint {
                            state: self.state.clone(),
                            agenda: agenda.clone(),
                            next_method: i + 1,
                            plan_len: self.steps.len(),
                            tree_len: self.tree.len(),
                        });
                        Some(self.expand(item, i, subs, cell.next.clone()))
                    }
                    None => None,
                },
            };
            agenda = match advanced {
                Some(next) => next,
                None => match self.backtrack()? {
                    Some(next) => next,
                    None => {
                        let f = self.frontier.take().unwrap_or(Frontier {
                            task: item.task.to_string(),
                            step: self.steps.len(),
                            reason: "no decomposition".into(),
                        });
                        return Err(PlanError::NoDecomposition {
                            task: f.task,
                            step: f.step,
                            reason: f.reason,
                        });
                    }
                },
            };
        }
        let mut tree = self.tree;
        tree.finish();
        Ok(Plan {
            steps: self.steps,
            tree: Some(tree),
        })
    }
}

/// Plans the domain's goal task from `state`.
pub fn plan(domain: &Domain, state: &InteractionState) -> Result<Plan, PlanError> {
    plan_tasks(domain, state, std::slice::from_ref(&domain.goal))
}

/// Plans an ordered list of ground tasks from `state`.
pub fn plan_tasks(
    domain: &Domain,
    state: &InteractionState,
    tasks: &[Task],
) -> Result<Plan, PlanError> {
    Search::new(domain, state, tasks).run()
}

/// Plans the remaining tasks from the current (belief) state. Same search as [`plan`].
pub fn replan(
    domain: &Domain,
    current: &InteractionState,
    remaining: &[Task],
) -> Result<Plan, PlanError> {
    plan_tasks(domain, current, remaining)
}

/// Forward-simulates `plan` from `state`, returning the final state or the first failing step.
pub fn validate(
    plan: &Plan,
    state: &InteractionState,
    decl: &EntityDeclarations,
) -> Result<InteractionState, ValidationFailure> {
    let mut s = state.clone();
    for (i, step) in plan.steps.iter().enumerate() {
        let failure = |reason: String, verdict: Option<Verdict>| ValidationFailure {
            index: i,
            action: step.action.to_string(),
            reason,
            verdict,
        };
        match preconditions(&step.action, &s, decl) {
            Ok(Verdict::Ok) => {}
            Ok(v) => return Err(failure(v.to_string(), Some(v))),
            Err(e) => return Err(failure(e.to_string(), None)),
        }
        s = apply(&step.action, &s, 0.0, decl).map_err(|e| failure(e.to_string(), None))?;
    }
    Ok(s)
}

/// Decomposition tree of a plan produced by this planner.
pub fn explain(plan: &Plan) -> Result<&DecompositionTree, PlanError> {
    plan.tree.as_ref().ok_or(PlanError::MissingProvenance)
}
