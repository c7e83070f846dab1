use super::*;
use crate::planner::{plan, Task};
use crate::state::new_state;

const MINIMAL: &str = r#"
domain "minimal" {
  regions {
    bench bounds [0, 0, 1, 1];
  }
  agents {
    R kind robot caps [grasp, release, move, perceive, wait] reach [bench] effectors [g] at bench;
  }
  objects {
    cup kind piece at bench;
  }
  tasks {
    goal look();
  }
  method look() {
    perceive(R, check_available_objects);
  }
}
"#;

fn rule(src: &str) -> SemanticRule {
    match parse_str(src).unwrap_err().kind {
        ParseErrorKind::Semantic(r) => r,
        ParseErrorKind::Syntax => panic!("expected semantic error"),
    }
}

#[test]
fn minimal_source_parses() {
    let d = parse_str(MINIMAL).unwrap();
    assert_eq!(d.name, "minimal");
    assert_eq!(d.methods.len(), 1);
    assert_eq!(d.entities.agents.len(), 1);
    assert_eq!(d.entities.objects.len(), 1);
    assert_eq!(d.goal, Task::compound("look", &[]));
    let s = new_state(&d.entities).unwrap();
    assert_eq!(plan(&d, &s).unwrap().len(), 1);
}

#[test]
fn unclosed_method_reports_end_of_input() {
    let src = "domain \"x\" {\n  method m() {\n    wait(R, pull_signal);\n";
    let e = parse_str(src).unwrap_err();
    assert_eq!(e.kind, ParseErrorKind::Syntax);
    assert_eq!((e.line, e.col), (4, 1));
    assert!(e.message.contains("end of input"), "{}", e.message);
}

#[test]
fn unknown_capability_is_unknown_template() {
    let src = MINIMAL.replace("caps [grasp,", "caps [fly, grasp,");
    let e = parse_str(&src).unwrap_err();
    assert_eq!(e.kind, ParseErrorKind::Semantic(SemanticRule::UnknownTemplate));
    assert!(e.message.contains("unknown template"));
    assert_eq!(e.line, 7);
}

#[test]
fn semantic_rules() {
    assert_eq!(rule(&MINIMAL.replace("cup kind", "bench kind")), SemanticRule::DuplicateId);
    assert_eq!(rule(&MINIMAL.replace("goal look()", "goal peek()")), SemanticRule::MissingMethod);
    assert_eq!(rule(&MINIMAL.replace("goal look()", "goal look(cup)")), SemanticRule::ArityMismatch);
    assert_eq!(
        rule(&MINIMAL.replace("check_available_objects", "smell")),
        SemanticRule::UnknownPerceiveKind
    );
    assert_eq!(
        rule(&MINIMAL.replace("perceive(R, check_available_objects)", "grasp(R, g, mug)")),
        SemanticRule::UndeclaredEntity
    );
    assert_eq!(
        rule(&MINIMAL.replace("perceive(R, check_available_objects)", "grasp(R, hand, cup)")),
        SemanticRule::UnknownEffector
    );
    assert_eq!(
        rule(&MINIMAL.replace("perceive(R, check_available_objects)", "manipulate(R, cup, assemble)")),
        SemanticRule::CapabilityMismatch
    );
    assert_eq!(rule(&MINIMAL.replace("kind robot", "kind android")), SemanticRule::UnknownAgentKind);
    assert_eq!(rule(&MINIMAL.replace("  tasks {\n    goal look();\n  }\n", "")), SemanticRule::MissingGoal);
    assert_eq!(rule(&MINIMAL.replace("method look()", "method look() pre [shiny(cup)]")), SemanticRule::UnknownPredicate);
    assert_eq!(rule(&MINIMAL.replace("at bench;\n  }\n  tasks", "at bench @ [3, 3];\n  }\n  tasks")), SemanticRule::InvalidPlacement);
}

#[test]
fn short_forms_default_the_agent() {
    let src = MINIMAL.replace("perceive(R, check_available_objects);", "perceive(detect_idle);\n    wait(human_idle);");
    let d = parse_str(&src).unwrap();
    let text = serialize(&d);
    assert!(text.contains("perceive(R, detect_idle);"));
    assert!(text.contains("wait(R, human_idle);"));
}

#[test]
fn minimal_round_trip() {
    let d = parse_str(MINIMAL).unwrap();
    let text = serialize(&d);
    assert_eq!(parse_str(&text).unwrap(), d);
    assert_eq!(serialize(&parse_str(&text).unwrap()), text);
}

#[test]
fn bundled_round_trip_and_stable() {
    for name in BUNDLED {
        let d = load_bundled(name).unwrap();
        let once = serialize(&d);
        let again = parse_str(&once).unwrap();
        assert_eq!(again, d, "{name}");
        assert_eq!(serialize(&again), once, "{name}");
    }
    let a = serialize(&load_bundled("hand_over_micro").unwrap());
    let b = serialize(&load_bundled("hand_over_micro").unwrap());
    assert_eq!(a, b);
}

#[test]
fn unknown_bundled_name() {
    assert_eq!(load_bundled("billy"), Err(BundledError::UnknownName("billy".into())));
}

#[test]
fn trailing_garbage_errors_after_prefix() {
    let prefix = MINIMAL.trim_end();
    let prefix_lines = prefix.lines().count();
    let e = parse_str(&format!("{prefix} method")).unwrap_err();
    assert!(e.line >= prefix_lines);
}

#[test]
fn edits_and_conditions_round_trip() {
    let body = "manipulate(H, cup, dof(-0.25));\n    manipulate(H, cup, set(colour, \"dark red\"));\n    wait(H, box_empty(cup));\n    wait(H, object_available(cup));";
    let src = MINIMAL
        .replace("perceive(R, check_available_objects);", body)
        .replace(
            "effectors [g] at bench;",
            "effectors [g] at bench;\n    H kind human caps [grasp, release, move, manipulate, wait, perceive] reach [bench] effectors [r] at bench;",
        );
    let d = parse_str(&src).unwrap();
    let text = serialize(&d);
    assert!(text.contains("dof(-0.25)"));
    assert!(text.contains("set(colour, \"dark red\")"));
    assert_eq!(parse_str(&text).unwrap(), d);
}

#[test]
fn bundled_plan_lengths() {
    for (name, steps) in [("oddvar", 545), ("hutten", 385), ("kritter", 322), ("ragrund", 195), ("hand_over_micro", 8)] {
        let d = load_bundled(name).unwrap();
        let s = new_state(&d.entities).unwrap();
        let p = plan(&d, &s).unwrap();
        assert_eq!(p.len(), steps, "{name}");
        crate::planner::validate(&p, &s, &d.entities).unwrap();
    }
}

#[test]
fn bundled_component_counts() {
    for (name, count) in [("oddvar", 31), ("hutten", 24), ("kritter", 13), ("ragrund", 16)] {
        let d = load_bundled(name).unwrap();
        let pieces = d.entities.objects.iter().filter(|o| o.kind == "piece").count() as u32;
        let screws: u32 = d.entities.objects.iter().filter(|o| o.kind == "box").filter_map(|o| o.content).sum();
        assert_eq!(pieces + screws, count, "{name}");
    }
}
