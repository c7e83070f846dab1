//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::cell::Cell;
use std::collections::{BTreeSet, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coplan_core::action::{
    affected_features, apply, preconditions, ActionTemplate, CharacteristicEdit, PerceiveKind, PrimitiveAction,
    WaitCondition,
};
use coplan_core::lang::{bundled_source, load_bundled, parse_str, serialize};
use coplan_core::metrics::{build_timeline, fluency, FluencyReport};
use coplan_core::planner::{plan, Domain};
use coplan_core::sim::{run, PolicyKind, Scenario};
use coplan_core::state::{
    diff, new_state, EffectorRef, EntityDeclarations, FeatureFamily, InteractionState, Location, ObjectId,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const BUNDLED: [&str; 5] = ["oddvar", "hutten", "kritter", "ragrund", "hand_over_micro"];

fn plan_bundled(name: &str) -> Result<(Domain, usize), String> {
    let d = load_bundled(name).map_err(|e| e.to_string())?;
    let s = new_state(&d.entities).map_err(|e| e.to_string())?;
    let p = plan(&d, &s).map_err(|e| format!("{name}: {e}"))?;
    Ok((d, p.len()))
}

fn plan_lengths() -> Outcome {
    let started = Instant::now();
    let mut got = Vec::new();
    for (name, expected) in [("oddvar", 545), ("hutten", 385), ("kritter", 322), ("ragrund", 195)] {
        let (_, n) = plan_bundled(name)?;
        check(n == expected, || format!("{name}: {n} steps, expected {expected}"))?;
        got.push(format!("{name}={n}"));
    }
    let secs = started.elapsed().as_secs_f64();
    check(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("{} in {secs:.2} s", got.join(" ")))
}

fn median_planning_time(name: &str) -> Result<f64, String> {
    let d = load_bundled(name).map_err(|e| e.to_string())?;
    let s = new_state(&d.entities).map_err(|e| e.to_string())?;
    let mut times = Vec::new();
    for _ in 0..10 {
        let t = Instant::now();
        plan(&d, &s).map_err(|e| e.to_string())?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((times[4] + times[5]) / 2.0)
}

fn planning_time() -> Outcome {
    let oddvar = median_planning_time("oddvar")?;
    let ragrund = median_planning_time("ragrund")?;
    check(oddvar <= 0.23, || format!("oddvar median {oddvar:.4} s"))?;
    check(ragrund <= 0.08, || format!("ragrund median {ragrund:.4} s"))?;
    Ok(format!("median oddvar {oddvar:.4} s, ragrund {ragrund:.4} s"))
}

// ---------------------------------------------------------------------------
// Frame conformance over random (state, action) pairs.

const CONFORMANCE_DOMAIN: &str = r#"
domain "conformance" {
  regions {
    left bounds [0, 0, 1, 1];
    mid bounds [1, 0, 2, 1];
    right bounds [2, 0, 3, 1];
  }
  agents {
    R kind robot caps [grasp, release, move, perceive, wait] reach [left, mid] effectors [r, l] at left;
    H kind human caps [grasp, release, move, manipulate, wait, perceive] reach [mid, right] effectors [r, l] at right;
  }
  objects {
    plank kind piece at left;
    peg kind piece at mid;
    box kind box at mid content 2;
    driver kind tool at right handover;
  }
  tasks {
    goal idle();
  }
  method idle() {
    wait(R, human_idle);
  }
}
"#;

/// Families each template may write, written out independently of the library table.
fn written_families(template: ActionTemplate, holding: bool) -> BTreeSet<FeatureFamily> {
    use FeatureFamily::*;
    let v: &[FeatureFamily] = match template {
        ActionTemplate::Grasp | ActionTemplate::Release => &[Eea, Ap, Oc],
        ActionTemplate::Move if holding => &[Ap, Op],
        ActionTemplate::Move => &[Ap],
        ActionTemplate::Manipulate => &[Ap, Op, Oc],
        ActionTemplate::Wait | ActionTemplate::Perceive => &[],
    };
    v.iter().copied().collect()
}

#[derive(Debug, Clone)]
struct PairCase {
    /// Per effector: location index and optional object index to hold.
    effectors: Vec<(usize, Option<usize>)>,
    /// Per object: location index, assembled flag, box content.
    objects: Vec<(usize, bool, u32)>,
    template: usize,
    agent: usize,
    effector: usize,
    object: usize,
    target: usize,
    variant: usize,
    duration: f64,
}

const TEMPLATES: [ActionTemplate; 6] = [
    ActionTemplate::Grasp,
    ActionTemplate::Release,
    ActionTemplate::Move,
    ActionTemplate::Manipulate,
    ActionTemplate::Wait,
    ActionTemplate::Perceive,
];

fn location_pool(decl: &EntityDeclarations, init: &InteractionState) -> Vec<Location> {
    let mut pool: Vec<Location> = decl.regions.iter().map(|r| r.center_location()).collect();
    pool.extend(init.op.values().map(|p| p.location.clone()));
    pool.push(Location::new("left", 0.21, 0.77));
    pool.push(Location::new("right", 2.9, 0.1));
    pool
}

fn pair_strategy(n_locations: usize) -> impl Strategy<Value = PairCase> {
    let effs = prop::collection::vec((0..n_locations, prop::option::weighted(0.4, 0..4usize)), 4);
    let objs = prop::collection::vec((0..n_locations, any::<bool>(), 0..3u32), 4);
    (effs, objs, 0..6usize, 0..2usize, 0..2usize, 0..4usize, 0..n_locations, 0..5usize, 0.0..10.0f64).prop_map(
        |(effectors, objects, template, agent, effector, object, target, variant, duration)| PairCase {
            effectors,
            objects,
            template,
            agent,
            effector,
            object,
            target,
            variant,
            duration,
        },
    )
}

fn build_pair(
    case: &PairCase,
    decl: &EntityDeclarations,
    init: &InteractionState,
    pool: &[Location],
) -> (InteractionState, PrimitiveAction) {
    let objects: Vec<ObjectId> = init.op.keys().cloned().collect();
    let effs: Vec<EffectorRef> = init.eea.keys().cloned().collect();
    let mut s = init.clone();
    for (obj, (loc, assembled, content)) in objects.iter().zip(&case.objects) {
        s.op.get_mut(obj).unwrap().location = pool[*loc].clone();
        let oc = s.oc.get_mut(obj).unwrap();
        oc.assembled = *assembled;
        if oc.content_count.is_some() {
            oc.content_count = Some(*content);
        }
    }
    for (eff, (loc, hold)) in effs.iter().zip(&case.effectors) {
        let pose = s.ap.get_mut(&eff.agent).unwrap();
        match hold.map(|i| &objects[i]) {
            Some(obj) if s.oc[obj].grasped_by.is_empty() => {
                let at = s.op[obj].location.clone();
                pose.ee_pose.insert(eff.effector.clone(), at);
                pose.gripper_opening.insert(eff.effector.clone(), 0.0);
                s.eea.insert(eff.clone(), false);
                let oc = s.oc.get_mut(obj).unwrap();
                oc.grasped_by.insert(eff.clone());
                oc.extras.insert("grasped".into(), "true".into());
            }
            _ => {
                pose.ee_pose.insert(eff.effector.clone(), pool[*loc].clone());
            }
        }
    }
    let agent = ["R", "H"][case.agent];
    let effector = ["r", "l"][case.effector];
    let object = objects[case.object].as_str();
    let action = match TEMPLATES[case.template] {
        ActionTemplate::Grasp => PrimitiveAction::grasp(agent, effector, object),
        ActionTemplate::Release => PrimitiveAction::release(agent, effector, object),
        ActionTemplate::Move => PrimitiveAction::move_to(agent, effector, pool[case.target].clone()),
        ActionTemplate::Manipulate => {
            let edit = [
                CharacteristicEdit::Assemble,
                CharacteristicEdit::Disassemble,
                CharacteristicEdit::Take,
                CharacteristicEdit::Dof(0.25),
                CharacteristicEdit::Set {
                    key: "colour".into(),
                    value: "red".into(),
                },
            ][case.variant]
                .clone();
            PrimitiveAction::manipulate(agent, object, edit)
        }
        ActionTemplate::Wait => {
            let cond = [
                WaitCondition::PullSignal,
                WaitCondition::HumanIdle,
                WaitCondition::BoxEmpty(ObjectId::new("box")),
                WaitCondition::ObjectAvailable(objects[case.object].clone()),
                WaitCondition::PullSignal,
            ][case.variant]
                .clone();
            PrimitiveAction::wait(agent, cond)
        }
        ActionTemplate::Perceive => PrimitiveAction::perceive(
            agent,
            [
                PerceiveKind::CheckAvailableObjects,
                PerceiveKind::PreciseMarkerDetection,
                PerceiveKind::DetectEmptyBox,
                PerceiveKind::DetectToolPulling,
                PerceiveKind::DetectIdle,
            ][case.variant],
        ),
    };
    debug_assert!(s.check_invariants(decl).is_ok());
    (s, action)
}

fn conformance() -> Outcome {
    let d = parse_str(CONFORMANCE_DOMAIN).map_err(|e| e.to_string())?;
    let decl = &d.entities;
    let init = new_state(decl).map_err(|e| e.to_string())?;
    let pool = location_pool(decl, &init);
    for t in TEMPLATES {
        for holding in [false, true] {
            check(affected_features(t, holding) == written_families(t, holding), || {
                format!("affected_features({t:?}, {holding}) disagrees with the table")
            })?;
        }
    }
    let pairs = Cell::new(0usize);
    let applied = Cell::new(0usize);
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&pair_strategy(pool.len()), |case| {
        let (s, action) = build_pair(&case, decl, &init, &pool);
        prop_assert!(s.check_invariants(decl).is_ok(), "generated state is inconsistent");
        pairs.set(pairs.get() + 1);
        let ok = matches!(preconditions(&action, &s, decl), Ok(v) if v.is_ok());
        let next = apply(&action, &s, case.duration, decl);
        prop_assert_eq!(ok, next.is_ok(), "apply disagrees with preconditions for {}", action);
        let Ok(next) = next else { return Ok(()) };
        applied.set(applied.get() + 1);
        let holding = action
            .effector_ref()
            .map(|e| s.eea.get(&e) == Some(&false))
            .unwrap_or(false);
        let touched = diff(&s, &next).map_err(|e| TestCaseError::fail(e.to_string()))?.families();
        let allowed = written_families(action.template, holding);
        prop_assert!(touched.is_subset(&allowed), "{} touched {:?}, allowed {:?}", action, touched, allowed);
        prop_assert!((next.clock - s.clock - case.duration).abs() < 1e-9);
        prop_assert!(next.eea.keys().eq(s.eea.keys()) && next.ap.keys().eq(s.ap.keys()));
        prop_assert!(next.op.keys().eq(s.op.keys()) && next.oc.keys().eq(s.oc.keys()));
        prop_assert!(next.check_invariants(decl).is_ok(), "{} broke an invariant", action);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    let (pairs, applied) = (pairs.get(), applied.get());
    check(pairs >= 10_000, || format!("only {pairs} pairs"))?;
    check(applied * 5 >= pairs, || format!("only {applied} of {pairs} pairs were applicable"))?;
    Ok(format!("{pairs} pairs, {applied} applied, 0 violations"))
}

// ---------------------------------------------------------------------------
// HTN plans against a brute-force forward-search oracle on generated micro-domains.

const REGIONS: [&str; 4] = ["a", "b", "c", "d"];

struct Micro {
    source: String,
    /// Per agent: name, effectors, reachable region indices, base region index.
    agents: Vec<(String, Vec<String>, BTreeSet<usize>, usize)>,
    /// Per object: initial region index.
    objects: Vec<usize>,
    /// (object index, target region index) in goal order.
    goals: Vec<(usize, usize)>,
}

fn region_center(i: usize) -> [f64; 2] {
    [i as f64 * 1.5 + 0.5, 0.5]
}

fn micro_domain(seed: u64) -> Micro {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = Vec::new();
    let n_robot_effs = rng.random_range(1..=2);
    for (name, effs) in [("R", n_robot_effs), ("H", 1)] {
        let base = rng.random_range(0..REGIONS.len());
        let mut reach: BTreeSet<usize> = (0..REGIONS.len()).filter(|_| rng.random_bool(0.6)).collect();
        reach.insert(base);
        let effectors: Vec<String> = (1..=effs).map(|k| format!("{}{k}", name.to_lowercase())).collect();
        agents.push((name.to_string(), effectors, reach, base));
    }
    let n_objects = rng.random_range(1..=3);
    let objects: Vec<usize> = (0..n_objects).map(|_| rng.random_range(0..REGIONS.len())).collect();
    let mut goals: Vec<(usize, usize)> = (0..n_objects).map(|o| (o, rng.random_range(0..REGIONS.len()))).collect();
    goals.shuffle(&mut rng);

    let mut src = format!("# generated micro-domain {seed}\ndomain \"micro{seed}\" {{\n  regions {{\n");
    for (i, r) in REGIONS.iter().enumerate() {
        let x = i as f64 * 1.5;
        src += &format!("    {r} bounds [{x}, 0, {}, 1];\n", x + 1.0);
    }
    src += "  }\n  agents {\n";
    for (name, effs, reach, base) in &agents {
        let (kind, caps) = if name == "R" {
            ("robot", "grasp, release, move, perceive, wait")
        } else {
            ("human", "grasp, release, move, manipulate, wait, perceive")
        };
        let reach: Vec<&str> = reach.iter().map(|i| REGIONS[*i]).collect();
        src += &format!(
            "    {name} kind {kind} caps [{caps}] reach [{}] effectors [{}] at {};\n",
            reach.join(", "),
            effs.join(", "),
            REGIONS[*base]
        );
    }
    src += "  }\n  objects {\n";
    for (i, r) in objects.iter().enumerate() {
        src += &format!("    o{i} kind piece at {};\n", REGIONS[*r]);
    }
    src += "  }\n  tasks {\n    goal deliver_all();\n  }\n";
    src += "  method deliver_all() {\n";
    for (o, t) in &goals {
        src += &format!("    deliver(o{o}, {});\n", REGIONS[*t]);
    }
    src += "  }\n";
    let mut methods = vec!["  method deliver(o, t) pre [at(o, t)] {}\n".to_string()];
    for (name, effs, _, _) in &agents {
        for e in effs {
            methods.push(format!(
                "  method deliver(o, t) pre [!at(o, t)] {{\n    move({name}, {e}, o);\n    grasp({name}, {e}, o);\n    move({name}, {e}, t);\n    release({name}, {e}, o);\n  }}\n"
            ));
            // Skips the approach move, so it only works when the hand is already there.
            methods.push(format!(
                "  method deliver(o, t) pre [!at(o, t)] {{\n    grasp({name}, {e}, o);\n    move({name}, {e}, t);\n    release({name}, {e}, o);\n  }}\n"
            ));
        }
    }
    methods.shuffle(&mut rng);
    for m in methods {
        src += &m;
    }
    src += "}\n";
    Micro {
        source: src,
        agents,
        objects,
        goals,
    }
}

/// Abstract position: a region center or an object's initial slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Pos {
    Center(usize),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Abstract {
    /// Per effector (flattened over agents).
    hand: Vec<Pos>,
    held: Vec<Option<usize>>,
    /// Per object.
    at: Vec<Pos>,
}

struct Oracle<'a> {
    m: &'a Micro,
    /// (agent index, effector name) per flattened effector.
    effs: Vec<(usize, String)>,
}

impl<'a> Oracle<'a> {
    fn new(m: &'a Micro) -> Self {
        let effs = m
            .agents
            .iter()
            .enumerate()
            .flat_map(|(a, (_, es, _, _))| es.iter().map(move |e| (a, e.clone())))
            .collect();
        Self { m, effs }
    }

    fn region(&self, p: Pos) -> usize {
        match p {
            Pos::Center(r) => r,
            Pos::Slot(o) => self.m.objects[o],
        }
    }

    fn start(&self) -> Abstract {
        Abstract {
            hand: self.effs.iter().map(|(a, _)| Pos::Center(self.m.agents[*a].3)).collect(),
            held: vec![None; self.effs.len()],
            at: (0..self.m.objects.len()).map(Pos::Slot).collect(),
        }
    }

    fn is_goal(&self, s: &Abstract) -> bool {
        s.held.iter().all(Option::is_none) && self.m.goals.iter().all(|(o, t)| self.region(s.at[*o]) == *t)
    }

    fn positions(&self) -> Vec<Pos> {
        (0..REGIONS.len())
            .map(Pos::Center)
            .chain((0..self.m.objects.len()).map(Pos::Slot))
            .collect()
    }

    fn grasp(&self, s: &Abstract, e: usize, o: usize) -> Option<Abstract> {
        let free = s.held[e].is_none() && !s.held.contains(&Some(o));
        (free && s.hand[e] == s.at[o]).then(|| {
            let mut n = s.clone();
            n.held[e] = Some(o);
            n
        })
    }

    fn release(&self, s: &Abstract, e: usize, o: usize) -> Option<Abstract> {
        (s.held[e] == Some(o)).then(|| {
            let mut n = s.clone();
            n.held[e] = None;
            n
        })
    }

    fn mv(&self, s: &Abstract, e: usize, p: Pos) -> Option<Abstract> {
        let reach = &self.m.agents[self.effs[e].0].2;
        reach.contains(&self.region(p)).then(|| {
            let mut n = s.clone();
            n.hand[e] = p;
            if let Some(o) = s.held[e] {
                n.at[o] = p;
            }
            n
        })
    }

    /// Length of a shortest plan reaching the goal, searched exhaustively.
    fn shortest(&self, limit: usize) -> Option<usize> {
        let start = self.start();
        let mut seen = HashSet::from([start.clone()]);
        let mut queue = VecDeque::from([(start, 0usize)]);
        let positions = self.positions();
        while let Some((s, d)) = queue.pop_front() {
            if self.is_goal(&s) {
                return Some(d);
            }
            if d == limit {
                continue;
            }
            let mut next = Vec::new();
            for e in 0..self.effs.len() {
                for &p in &positions {
                    next.extend(self.mv(&s, e, p));
                }
                for o in 0..self.m.objects.len() {
                    next.extend(self.grasp(&s, e, o));
                    next.extend(self.release(&s, e, o));
                }
            }
            for n in next {
                if seen.insert(n.clone()) {
                    queue.push_back((n, d + 1));
                }
            }
        }
        None
    }

    /// Executes concrete plan steps in the abstract model.
    fn execute(&self, steps: &[PrimitiveAction], slots: &[[f64; 2]]) -> Result<Abstract, String> {
        let mut s = self.start();
        for (i, a) in steps.iter().enumerate() {
            let e = self
                .effs
                .iter()
                .position(|(ag, eff)| {
                    self.m.agents[*ag].0 == a.agent.as_str() && a.effector.as_ref().map(|x| x.as_str()) == Some(eff)
                })
                .ok_or_else(|| format!("step {i}: unknown effector in {a}"))?;
            let obj = || -> Result<usize, String> {
                let id = a.object.as_ref().ok_or(format!("step {i}: no object"))?;
                id.as_str()[1..].parse().map_err(|_| format!("step {i}: bad object {id}"))
            };
            let next = match a.template {
                ActionTemplate::Grasp => self.grasp(&s, e, obj()?),
                ActionTemplate::Release => self.release(&s, e, obj()?),
                ActionTemplate::Move => {
                    let c = a.target.as_ref().ok_or(format!("step {i}: no target"))?.coords;
                    let near = |p: [f64; 2]| (p[0] - c[0]).abs() < 1e-9 && (p[1] - c[1]).abs() < 1e-9;
                    let p = (0..REGIONS.len())
                        .find(|r| near(region_center(*r)))
                        .map(Pos::Center)
                        .or_else(|| slots.iter().position(|sl| near(*sl)).map(Pos::Slot))
                        .ok_or(format!("step {i}: target {c:?} is not a known position"))?;
                    self.mv(&s, e, p)
                }
                other => return Err(format!("step {i}: unexpected {other:?}")),
            };
            s = next.ok_or_else(|| format!("step {i}: {a} is not executable"))?;
        }
        Ok(s)
    }

    /// Every goal object can be carried by one agent reaching both its start and target.
    fn carriable(&self) -> bool {
        self.m.goals.iter().all(|(o, t)| {
            *t == self.m.objects[*o]
                || self
                    .m
                    .agents
                    .iter()
                    .any(|(_, _, reach, _)| reach.contains(t) && reach.contains(&self.m.objects[*o]))
        })
    }
}

fn oracle_equivalence() -> Outcome {
    let mut planned = 0;
    let mut unplannable = 0;
    for seed in 0..120u64 {
        let m = micro_domain(seed);
        let d = parse_str(&m.source).map_err(|e| format!("micro {seed}: {e}"))?;
        let s0 = new_state(&d.entities).map_err(|e| e.to_string())?;
        let slots: Vec<[f64; 2]> = s0.op.values().map(|p| p.location.coords).collect();
        let oracle = Oracle::new(&m);
        match plan(&d, &s0) {
            Ok(p) => {
                planned += 1;
                check(oracle.carriable(), || format!("micro {seed}: planned an uncarriable goal"))?;
                check(p.len() <= 12, || format!("micro {seed}: {} steps", p.len()))?;
                let steps: Vec<PrimitiveAction> = p.actions().cloned().collect();
                let end = oracle.execute(&steps, &slots).map_err(|e| format!("micro {seed}: {e}"))?;
                check(oracle.is_goal(&end), || format!("micro {seed}: plan does not reach the goal"))?;
                let best = oracle.shortest(12).ok_or(format!("micro {seed}: oracle finds no plan"))?;
                // Plans need not be minimal, but can never beat exhaustive search.
                check(best <= p.len(), || format!("micro {seed}: plan {} steps, shortest {best}", p.len()))?;
            }
            Err(e) => {
                unplannable += 1;
                check(!oracle.carriable(), || format!("micro {seed}: no plan although carriable: {e}"))?;
            }
        }
        if planned >= 60 && seed >= 80 {
            break;
        }
    }
    check(planned >= 50, || format!("only {planned} micro-domains had plans"))?;
    Ok(format!("{planned} planned micro-domains agree with the oracle, {unplannable} correctly unplannable"))
}

// ---------------------------------------------------------------------------
// Simulation criteria.

fn policies() -> [PolicyKind; 5] {
    [
        PolicyKind::Compliant,
        PolicyKind::IndependentPicker(0.5),
        PolicyKind::VariableSpeed(0.7),
        PolicyKind::VariableSpeed(1.4),
        PolicyKind::ErrorProne(0.1),
    ]
}

fn fluency_identity() -> Outcome {
    let mut n = 0;
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let domain = BUNDLED[(i % 5) as usize];
        let policy = policies()[((i / 5) % 5) as usize];
        let log = run(&Scenario::bundled(domain, i, policy).map_err(|e| e.to_string())?)
            .map_err(|e| format!("{domain} seed {i} {policy}: {e}"))?;
        let r = fluency(&build_timeline(&log).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let residual = (r.c_act + r.h_idle + r.r_idle - r.f_del - 100.0).abs();
        worst = worst.max(residual);
        check(residual <= 1e-9, || format!("{domain} seed {i}: residual {residual:e}"))?;
        for v in [r.h_idle, r.r_idle, r.f_del, r.c_act] {
            check((0.0..=100.0).contains(&v), || format!("{domain} seed {i}: {r:?}"))?;
        }
        n += 1;
    }
    Ok(format!("{n} sessions, worst residual {worst:.1e}"))
}

fn robustness() -> Outcome {
    let mut replans = 0;
    let mut parts = Vec::new();
    for policy in [PolicyKind::IndependentPicker(0.5), PolicyKind::ErrorProne(0.1)] {
        for i in 0..100u64 {
            let domain = BUNDLED[(i % 4) as usize];
            let log = run(&Scenario::bundled(domain, 1000 + i, policy).map_err(|e| e.to_string())?)
                .map_err(|e| format!("{domain} seed {} {policy}: {e}", 1000 + i))?;
            check(log.goal_reached(), || format!("{domain} seed {} {policy}: goal not reached", 1000 + i))?;
            log.verify_replay()
                .map_err(|e| format!("{domain} seed {} {policy}: replay {e}", 1000 + i))?;
            replans += log.count(coplan_core::sim::EventKind::Replan);
        }
        parts.push(format!("100 {policy}"));
    }
    Ok(format!("{} sessions reached the goal and replay cleanly, {replans} replans", parts.join(" + ")))
}

fn determinism() -> Outcome {
    let mut n = 0;
    for (i, domain) in BUNDLED.iter().enumerate() {
        for policy in policies() {
            let sc = Scenario::bundled(domain, 77 + i as u64, policy).map_err(|e| e.to_string())?;
            let a = run(&sc).map_err(|e| e.to_string())?.to_ndjson();
            let b = run(&sc).map_err(|e| e.to_string())?.to_ndjson();
            check(a == b, || format!("{domain} {policy}: logs differ"))?;
            let log = coplan_core::sim::EventLog::from_ndjson(&a).map_err(|e| e.to_string())?;
            let replayed = coplan_core::sim::replay(&log).map_err(|e| format!("{domain} {policy}: {e}"))?;
            check(Some(&replayed) == log.final_state.as_ref(), || {
                format!("{domain} {policy}: replay differs from the final state")
            })?;
            n += 1;
        }
    }
    Ok(format!("{n} scenarios byte-identical and replay-exact"))
}

fn fluency_profile() -> Outcome {
    const TARGET: [(&str, f64); 4] = [("r_idle", 30.83), ("c_act", 30.74), ("h_idle", 24.33), ("f_del", 3.86)];
    let mut worst = 0.0f64;
    let mut batches = Vec::new();
    for seed in 1..=10u64 {
        let mut batch = Vec::new();
        for domain in ["oddvar", "hutten", "kritter", "ragrund"] {
            let log = run(&Scenario::bundled(domain, seed, PolicyKind::Compliant).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            batch.push(fluency(&build_timeline(&log).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
        }
        let m = FluencyReport::mean(&batch).ok_or("empty batch")?;
        for ((name, target), got) in TARGET.iter().zip([m.r_idle, m.c_act, m.h_idle, m.f_del]) {
            worst = worst.max((got - target).abs());
            check((got - target).abs() <= 10.0, || format!("batch {seed}: {name} {got:.2} vs {target}"))?;
        }
        check(m.r_idle > m.c_act && m.r_idle > m.h_idle && m.r_idle > m.f_del, || {
            format!("batch {seed}: r_idle {:.2} is not the largest", m.r_idle)
        })?;
        batches.push(m);
    }
    let all = FluencyReport::mean(&batches).ok_or("no batches")?;
    Ok(format!(
        "10 batches in band (max deviation {worst:.2}); mean r {:.2} c {:.2} h {:.2} f {:.2}",
        all.r_idle, all.c_act, all.h_idle, all.f_del
    ))
}

// ---------------------------------------------------------------------------
// Parser round-trip over bundled and fuzzed sources.

fn mutate(src: &str, rng: &mut ChaCha8Rng) -> String {
    let mut lines: Vec<String> = src.lines().map(str::to_string).collect();
    for _ in 0..rng.random_range(1..=3) {
        let i = rng.random_range(0..lines.len());
        match rng.random_range(0..6) {
            0 => {
                lines.remove(i);
            }
            1 => {
                let l = lines[i].clone();
                lines.insert(i, l);
            }
            2 => lines.insert(i, format!("  # note {}", rng.random_range(0..1000))),
            3 => lines[i] = lines[i].replace(' ', "  \t"),
            4 => {
                let j = rng.random_range(0..lines.len());
                lines.swap(i, j);
            }
            _ => {
                let n = rng.random_range(0..10);
                lines[i] = lines[i].replacen('0', &n.to_string(), 1);
            }
        }
    }
    lines.join("\n")
}

fn parser_round_trip() -> Outcome {
    let mut sources: Vec<(String, String)> = BUNDLED
        .iter()
        .map(|n| (n.to_string(), bundled_source(n).unwrap().to_string()))
        .collect();
    let bundled = sources.len();
    for seed in 0..100 {
        sources.push((format!("micro {seed}"), micro_domain(seed).source));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut rejected = 0;
    for k in 0..2000 {
        let base = sources[k % (bundled + 100)].1.clone();
        let m = mutate(&base, &mut rng);
        if parse_str(&m).is_ok() {
            sources.push((format!("mutant {k}"), m));
        } else {
            rejected += 1;
        }
    }
    for (label, src) in &sources {
        let d = parse_str(src).map_err(|e| format!("{label}: {e}"))?;
        let first = serialize(&d);
        let again = parse_str(&first).map_err(|e| format!("{label}: serialized form does not parse: {e}"))?;
        check(again == d, || format!("{label}: parse of serialized form differs"))?;
        let second = serialize(&again);
        check(first == second, || format!("{label}: serialization is not a fixed point"))?;
    }
    let fuzzed = sources.len() - bundled;
    check(fuzzed >= 500, || format!("only {fuzzed} fuzzed sources accepted"))?;
    Ok(format!("{bundled} bundled + {fuzzed} fuzzed sources are fixed points ({rejected} mutants rejected)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("plan-length calibration", plan_lengths),
        ("planning time", planning_time),
        ("action conformance", conformance),
        ("oracle equivalence", oracle_equivalence),
        ("fluency identity", fluency_identity),
        ("replanning robustness", robustness),
        ("determinism and replay", determinism),
        ("fluency profile", fluency_profile),
        ("parser round-trip", parser_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

