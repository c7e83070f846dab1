use super::*;
use crate::action::{ActionTemplate, PerceiveKind, WaitCondition};
use crate::state::{FeatureFamily, ObjectId};

fn compliant(name: &str, seed: u64) -> Scenario {
    Scenario::bundled(name, seed, PolicyKind::Compliant).unwrap()
}

fn robot_starts(log: &EventLog) -> impl Iterator<Item = ActionStartPayload> + '_ {
    log.events
        .iter()
        .filter(|e| e.agent.as_ref().is_some_and(|a| a.as_str() == "R"))
        .filter_map(|e| e.action_start())
}

const BOX_DOMAIN: &str = r#"
domain "box_probe" {
  regions {
    robot_ws bounds [0, 0, 1.2, 0.6];
    shared_ws bounds [0, 0.6, 1.2, 1];
    human_ws bounds [0, 1, 1.2, 1.6];
  }
  agents {
    R kind robot caps [grasp, release, move, perceive, wait] reach [robot_ws, shared_ws] effectors [r] at robot_ws;
    H kind human caps [grasp, release, move, manipulate, wait, perceive] reach [human_ws, shared_ws] effectors [r] at human_ws;
  }
  objects {
    spent kind box at robot_ws content 0 handover;
    full kind box at robot_ws content 3 handover;
  }
  tasks {
    goal look();
  }
  method look() {
    perceive(R, check_available_objects);
  }
}
"#;

#[test]
fn hand_over_micro_waits_once_for_the_pull() {
    let log = run(&compliant("hand_over_micro", 1)).unwrap();
    assert!(log.goal_reached());
    let waits: Vec<usize> = log
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::WaitSatisfied)
        .filter(|(_, e)| e.payload["condition"] == serde_json::json!(WaitCondition::PullSignal))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(waits.len(), 1);
    let next_robot_start = log.events[waits[0]..]
        .iter()
        .filter(|e| e.agent.as_ref().is_some_and(|a| a.as_str() == "R"))
        .find_map(|e| e.action_start())
        .unwrap();
    assert_eq!(next_robot_start.action.template, ActionTemplate::Release);
    log.verify_replay().unwrap();
}

#[test]
fn identical_scenarios_give_identical_bytes() {
    let a = run(&compliant("oddvar", 42)).unwrap();
    let b = run(&compliant("oddvar", 42)).unwrap();
    assert_eq!(a.to_ndjson(), b.to_ndjson());
    assert!(a.goal_reached());
    let c = run(&compliant("oddvar", 43)).unwrap();
    assert_ne!(a.to_ndjson(), c.to_ndjson());
}

#[test]
fn every_bundled_domain_completes_under_compliant() {
    for name in ["oddvar", "hutten", "kritter", "ragrund", "hand_over_micro"] {
        let log = run(&compliant(name, 5)).unwrap();
        assert!(log.goal_reached(), "{name}");
        let final_state = log.verify_replay().unwrap();
        assert_eq!(Some(final_state), log.final_state, "{name}");
    }
}

#[test]
fn log_is_ordered_and_actions_are_paired() {
    let log = run(&compliant("ragrund", 3)).unwrap();
    assert_eq!(log.events[0].t, 0.0);
    for w in log.events.windows(2) {
        assert!(w[0].t <= w[1].t);
        assert_eq!(w[0].seq + 1, w[1].seq);
    }
    let mut open = std::collections::BTreeMap::new();
    for e in &log.events {
        let agent = e.agent.clone();
        match e.kind {
            EventKind::ActionStart => assert!(open.insert(agent, e.t).is_none(), "agent overlaps itself"),
            EventKind::ActionEnd => assert!(open.remove(&agent).is_some(), "end without start"),
            _ => {}
        }
    }
    assert!(open.is_empty());
    let objects = |s: &crate::state::InteractionState| s.op.keys().cloned().collect::<Vec<_>>();
    let start = Session::new(compliant("ragrund", 3)).unwrap();
    assert_eq!(objects(start.truth()), objects(log.final_state.as_ref().unwrap()));
}

#[test]
fn eager_picker_forces_a_replan_and_still_finishes() {
    let sc = Scenario::bundled("kritter", 11, PolicyKind::IndependentPicker(1.0)).unwrap();
    let log = run(&sc).unwrap();
    assert!(log.count(EventKind::Replan) >= 1);
    assert!(log.goal_reached());
    log.verify_replay().unwrap();
}

#[test]
fn interactive_runs_need_the_stepping_api() {
    let sc = Scenario::bundled("hand_over_micro", 1, PolicyKind::Interactive).unwrap();
    assert_eq!(run(&sc), Err(SimError::Interactive));
}

#[test]
fn empty_box_is_reported_without_waiting() {
    let sc = Scenario::new("box_probe", BOX_DOMAIN, 1, PolicyKind::Compliant);
    let mut s = Session::new(sc).unwrap();
    let spent = ObjectId::from("spent");
    let r = s.simulate_perceive(PerceiveKind::DetectEmptyBox, Some(&spent)).unwrap();
    assert_eq!(r.data, PerceiveData::BoxEmpty { object: spent, empty: true });
    let table = s.scenario().durations.get("perceive.detect_empty_box");
    assert!(r.duration > 0.0 && r.duration <= table.mean + table.jitter);
    let full = ObjectId::from("full");
    let r = s.simulate_perceive(PerceiveKind::DetectEmptyBox, Some(&full)).unwrap();
    assert!(matches!(r.data, PerceiveData::BoxEmpty { empty: false, .. }));
}

#[test]
fn pull_detection_needs_a_held_object() {
    let mut s = Session::new(compliant("hand_over_micro", 1)).unwrap();
    let err = s.simulate_perceive(PerceiveKind::DetectToolPulling, None).unwrap_err();
    assert!(matches!(err, SimError::InvalidContext(_)));
    assert!(s.simulate_perceive(PerceiveKind::DetectEmptyBox, None).is_err());
}

#[test]
fn declared_idle_is_what_the_detector_sees() {
    let mut sc = Scenario::bundled("oddvar", 1, PolicyKind::Interactive).unwrap();
    sc.perception_noise = 0.0;
    let mut s = Session::new(sc).unwrap();
    s.inject_human_event(HumanEvent::IdleToggle { flag: false }).unwrap();
    let r = s.simulate_perceive(PerceiveKind::DetectIdle, None).unwrap();
    assert_eq!(r.data, PerceiveData::Idle { idle: false });
    s.inject_human_event(HumanEvent::IdleToggle { flag: true }).unwrap();
    let r = s.simulate_perceive(PerceiveKind::DetectIdle, None).unwrap();
    assert_eq!(r.data, PerceiveData::Idle { idle: true });
}

#[test]
fn operator_pick_is_acknowledged_then_noticed() {
    let sc = Scenario::bundled("oddvar", 2, PolicyKind::Interactive).unwrap();
    let mut s = Session::new(sc).unwrap();
    s.run_until(1.0).unwrap();
    let target = ObjectId::from("rail3");
    let pick = HumanEvent::HumanAction {
        template: ActionTemplate::Grasp,
        object: Some(target.clone()),
        region: None,
        edit: None,
    };
    let ack = s.inject_human_event(pick).unwrap();
    assert_eq!(ack.t, s.now());
    s.run_until(ack.t + 60.0).unwrap();
    let log = s.log();
    let grasped = log
        .events
        .iter()
        .find(|e| {
            e.agent.as_ref().is_some_and(|a| a.as_str() == "H")
                && e.action_end().is_some_and(|p| p.template == ActionTemplate::Grasp)
        })
        .expect("the operator grasp completes")
        .t;
    let after: Vec<&SimEvent> = log.events.iter().filter(|e| e.t > grasped).collect();
    let cao = after
        .iter()
        .position(|e| {
            e.perceive_result()
                .is_some_and(|r| matches!(r.data, PerceiveData::AvailableObjects { .. }))
        })
        .expect("a later object check");
    let Some(PerceiveResult {
        data: PerceiveData::AvailableObjects { objects },
        ..
    }) = after[cao].perceive_result()
    else {
        unreachable!()
    };
    assert!(!objects.contains_key(&target));
    assert!(after[cao..].iter().any(|e| e.kind == EventKind::Replan));
}

#[test]
fn operator_cannot_take_from_the_robot_gripper() {
    let sc = Scenario::bundled("hand_over_micro", 1, PolicyKind::Interactive).unwrap();
    let mut s = Session::new(sc).unwrap();
    let tool = ObjectId::from("screwdriver");
    while s.truth().oc[&tool].grasped_by.is_empty() {
        assert!(s.step().unwrap(), "the robot never grasped the tool");
    }
    let before = s.events().len();
    let rej = s
        .inject_human_event(HumanEvent::HumanAction {
            template: ActionTemplate::Grasp,
            object: Some(tool),
            region: None,
            edit: None,
        })
        .unwrap_err();
    assert_eq!(rej.template, Some(ActionTemplate::Grasp));
    assert!(rej.families.contains(&FeatureFamily::Oc), "{}", rej.violation());
    assert_eq!(s.events().len(), before);
}

#[test]
fn operator_pull_is_followed_by_the_release() {
    let sc = Scenario::bundled("hand_over_micro", 1, PolicyKind::Interactive).unwrap();
    let mut s = Session::new(sc).unwrap();
    let tool = ObjectId::from("screwdriver");
    let shared = crate::state::RegionId::from("shared_ws");
    while s.truth().op[&tool].location.region != shared {
        assert!(s.step().unwrap());
    }
    s.inject_human_event(HumanEvent::PullTool).unwrap();
    s.run_to_end().unwrap();
    let log = s.log();
    assert!(log.goal_reached());
    assert_eq!(robot_starts(&log).last().unwrap().action.template, ActionTemplate::Release);
    log.verify_replay().unwrap();
}
