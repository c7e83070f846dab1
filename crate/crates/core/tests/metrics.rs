use std::collections::BTreeMap;

use coplan_core::action::{ActionTemplate, PerceiveKind, PrimitiveAction};
use coplan_core::metrics::{build_timeline, build_timeline_until, fluency, perception_timing, Interval, MetricsError};
use coplan_core::sim::{
    run, ActionEndPayload, ActionStartPayload, EventKind, EventLog, LogHeader, PolicyKind, Scenario, SimEvent,
    LOG_FORMAT, LOG_VERSION,
};
use coplan_core::state::{AgentId, AgentKind, Location};

struct LogBuilder {
    events: Vec<SimEvent>,
}

impl LogBuilder {
    fn new() -> Self {
        Self { events: Vec::new() }
    }

    fn push(&mut self, t: f64, kind: EventKind, agent: &str, payload: serde_json::Value) -> &mut Self {
        let seq = self.events.len() as u64;
        self.events.push(SimEvent {
            t,
            seq,
            kind,
            agent: Some(AgentId::new(agent)),
            payload,
        });
        self
    }

    fn action(&mut self, a: PrimitiveAction, start: f64, end: f64) -> &mut Self {
        let agent = a.agent.as_str().to_string();
        let template = a.template;
        self.start(a, start);
        let end_payload = ActionEndPayload {
            step: None,
            template,
            timed_out: false,
        };
        self.push(end, EventKind::ActionEnd, &agent, serde_json::to_value(end_payload).unwrap())
    }

    fn start(&mut self, a: PrimitiveAction, t: f64) -> &mut Self {
        let agent = a.agent.as_str().to_string();
        let p = ActionStartPayload { step: None, action: a };
        self.push(t, EventKind::ActionStart, &agent, serde_json::to_value(p).unwrap())
    }

    fn marker(&mut self, t: f64) -> &mut Self {
        self.push(t, EventKind::GoalReached, "R", serde_json::json!({}))
    }

    fn build(&self) -> EventLog {
        EventLog {
            header: LogHeader {
                log: LOG_FORMAT.into(),
                version: LOG_VERSION,
                scenario: Scenario::bundled("hand_over_micro", 1, PolicyKind::Compliant).unwrap(),
                agents: BTreeMap::from([(AgentId::new("R"), AgentKind::Robot), (AgentId::new("H"), AgentKind::Human)]),
                plan_steps: 0,
            },
            events: self.events.clone(),
            final_state: None,
        }
    }
}

fn mv(agent: &str) -> PrimitiveAction {
    PrimitiveAction::move_to(agent, "r", Location::new("shared_ws", 0.5, 0.8))
}

#[test]
fn robot_moves_count_as_activity() {
    let log = LogBuilder::new().action(mv("R"), 0.0, 10.0).marker(15.0).build();
    let tl = build_timeline(&log).unwrap();
    assert_eq!(tl.span, 15.0);
    assert_eq!(tl.robot, vec![Interval::new(0.0, 10.0)]);
    assert!(tl.human.is_empty());
}

#[test]
fn robot_perception_counts_as_idle() {
    let log = LogBuilder::new()
        .action(PrimitiveAction::perceive("R", PerceiveKind::CheckAvailableObjects), 0.0, 5.0)
        .action(mv("H"), 0.0, 2.0)
        .build();
    let tl = build_timeline(&log).unwrap();
    assert!(tl.robot.is_empty());
    assert_eq!(tl.human, vec![Interval::new(0.0, 2.0)]);
    let r = fluency(&tl).unwrap();
    assert_eq!(r.r_idle, 100.0);
}

#[test]
fn malformed_logs_are_rejected() {
    let overlap = LogBuilder::new().start(mv("R"), 0.0).start(mv("R"), 1.0).build();
    assert!(matches!(build_timeline(&overlap), Err(MetricsError::Overlap { .. })));
    let dangling = LogBuilder::new().start(mv("R"), 0.0).marker(3.0).build();
    assert_eq!(build_timeline(&dangling), Err(MetricsError::UnmatchedStart(0)));
    let stray = LogBuilder::new()
        .push(
            1.0,
            EventKind::ActionEnd,
            "R",
            serde_json::json!({"step": null, "template": ActionTemplate::Move}),
        )
        .build();
    assert_eq!(build_timeline(&stray), Err(MetricsError::UnmatchedEnd(0)));
    let empty = LogBuilder::new().build();
    assert_eq!(fluency(&build_timeline(&empty).unwrap()), Err(MetricsError::EmptySpan));
}

#[test]
fn declared_idle_spans_are_not_human_activity() {
    let log = LogBuilder::new()
        .start(mv("H"), 0.0)
        .push(2.0, EventKind::HumanEvent, "H", serde_json::json!({"event": "idle_toggle", "flag": true}))
        .push(6.0, EventKind::HumanEvent, "H", serde_json::json!({"event": "idle_toggle", "flag": false}))
        .push(10.0, EventKind::ActionEnd, "H", serde_json::json!({"step": null, "template": ActionTemplate::Move}))
        .build();
    let tl = build_timeline(&log).unwrap();
    assert_eq!(tl.human, vec![Interval::new(0.0, 2.0), Interval::new(6.0, 10.0)]);
}

fn transformed(log: &EventLog, f: impl Fn(f64) -> f64) -> EventLog {
    let mut out = log.clone();
    for e in &mut out.events {
        e.t = f(e.t);
    }
    out
}

#[test]
fn shifting_or_scaling_a_session_keeps_percentages() {
    let log = run(&Scenario::bundled("ragrund", 9, PolicyKind::Compliant).unwrap()).unwrap();
    let base = fluency(&build_timeline(&log).unwrap()).unwrap();
    for (label, other) in [
        ("shift", transformed(&log, |t| t + 1234.5)),
        ("scale", transformed(&log, |t| t * 0.37)),
        ("both", transformed(&log, |t| 3.0 * t + 17.0)),
    ] {
        let r = fluency(&build_timeline(&other).unwrap()).unwrap();
        for (x, y) in [(base.h_idle, r.h_idle), (base.r_idle, r.r_idle), (base.f_del, r.f_del), (base.c_act, r.c_act)] {
            assert!((x - y).abs() < 1e-9, "{label}: {base:?} vs {r:?}");
        }
    }
}

#[test]
fn simulated_sessions_satisfy_the_partition_identity() {
    for (name, seed) in [("oddvar", 1), ("hutten", 2), ("kritter", 3), ("ragrund", 4), ("hand_over_micro", 5)] {
        let log = run(&Scenario::bundled(name, seed, PolicyKind::Compliant).unwrap()).unwrap();
        let r = fluency(&build_timeline(&log).unwrap()).unwrap();
        assert!(r.identity_residual().abs() < 1e-9, "{name}: {r:?}");
    }
}

#[test]
fn timing_totals_match_the_log() {
    let logs: Vec<EventLog> = [("oddvar", 42), ("kritter", 7)]
        .into_iter()
        .map(|(d, s)| run(&Scenario::bundled(d, s, PolicyKind::Compliant).unwrap()).unwrap())
        .collect();
    let report = perception_timing(&logs).unwrap();
    let direct: f64 = logs
        .iter()
        .flat_map(|l| l.events.iter())
        .filter_map(|e| e.perceive_result())
        .map(|r| r.duration)
        .sum();
    let from_report: f64 = report
        .kinds
        .values()
        .filter_map(|k| k.stats.map(|s| k.count as f64 * s.mean_s))
        .sum();
    assert!((direct - from_report).abs() < 1e-6 * direct.max(1.0), "{direct} vs {from_report}");
    for k in report.kinds.values() {
        if let Some(s) = k.stats {
            assert!(s.min_s <= s.mean_s && s.mean_s <= s.max_s);
        }
    }
}

#[test]
fn idle_detection_takes_longer_than_object_checks() {
    let log = run(&Scenario::bundled("oddvar", 42, PolicyKind::Compliant).unwrap()).unwrap();
    let report = perception_timing([&log]).unwrap();
    let idle = report.get(PerceiveKind::DetectIdle).stats.unwrap().mean_s;
    let cao = report.get(PerceiveKind::CheckAvailableObjects).stats.unwrap().mean_s;
    assert!(idle > cao, "detect_idle {idle} vs check_available_objects {cao}");
}

#[test]
fn running_actions_are_cut_at_the_query_time() {
    let log = LogBuilder::new().action(mv("H"), 0.0, 2.0).start(mv("R"), 1.0).build();
    assert_eq!(build_timeline(&log), Err(MetricsError::UnmatchedStart(2)));
    let tl = build_timeline_until(&log, 5.0).unwrap();
    assert_eq!(tl.span, 5.0);
    assert_eq!(tl.robot, vec![Interval::new(1.0, 5.0)]);
    assert_eq!(tl.human, vec![Interval::new(0.0, 2.0)]);
}
