use std::fmt::Write as _;

use crate::action::CharacteristicEdit;
use crate::planner::{Domain, Literal, Method, PrimitivePattern, Task, WaitPattern};

const INDENT: &str = "  ";

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Shortest text that parses back to the same value.
fn num(x: f64) -> String {
    format!("{x}")
}

fn list<T: AsRef<str>>(items: &[T]) -> String {
    let v: Vec<&str> = items.iter().map(|s| s.as_ref()).collect();
    format!("[{}]", v.join(", "))
}

fn edit(e: &CharacteristicEdit) -> String {
    match e {
        CharacteristicEdit::Set { key, value } => {
            let v = if is_ident(value) { value.clone() } else { quote(value) };
            format!("set({key}, {v})")
        }
        CharacteristicEdit::Dof(d) => format!("dof({})", num(*d)),
        other => other.to_string(),
    }
}

fn primitive(p: &PrimitivePattern) -> String {
    match p {
        PrimitivePattern::Manipulate { agent, object, edit: e } => {
            format!("manipulate({agent}, {object}, {})", edit(e))
        }
        PrimitivePattern::Wait { agent, condition } => match condition {
            WaitPattern::BoxEmpty(o) => format!("wait({agent}, box_empty({o}))"),
            WaitPattern::ObjectAvailable(o) => format!("wait({agent}, object_available({o}))"),
            c => format!("wait({agent}, {c})"),
        },
        other => other.to_string(),
    }
}

fn task(t: &Task) -> String {
    match t {
        Task::Primitive(p) => primitive(p),
        Task::Compound { .. } => t.to_string(),
    }
}

fn literal(l: &Literal) -> String {
    l.to_string()
}

fn method(out: &mut String, m: &Method) {
    let _ = write!(out, "{INDENT}method {}({})", m.task_name, m.params.join(", "));
    if !m.precondition.is_empty() {
        let pre: Vec<String> = m.precondition.iter().map(literal).collect();
        let _ = write!(out, " pre [{}]", pre.join(", "));
    }
    if m.subtasks.is_empty() {
        out.push_str(" {}\n");
        return;
    }
    out.push_str(" {\n");
    for t in &m.subtasks {
        let _ = writeln!(out, "{INDENT}{INDENT}{};", task(t));
    }
    let _ = writeln!(out, "{INDENT}}}");
}

/// Canonical text form: sections in fixed order, declaration order within
/// each section, two-space indentation, one primitive per line.
pub fn serialize(d: &Domain) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "domain {} {{", quote(&d.name));
    let e = &d.entities;

    let _ = writeln!(out, "{INDENT}regions {{");
    for r in &e.regions {
        let _ = writeln!(
            out,
            "{INDENT}{INDENT}{} bounds [{}, {}, {}, {}];",
            r.id,
            num(r.min[0]),
            num(r.min[1]),
            num(r.max[0]),
            num(r.max[1])
        );
    }
    let _ = writeln!(out, "{INDENT}}}");

    let _ = writeln!(out, "{INDENT}agents {{");
    for a in &e.agents {
        let caps: Vec<&str> = a.caps.iter().map(|c| c.name()).collect();
        let reach: Vec<&str> = a.reach.iter().map(|r| r.as_str()).collect();
        let effs: Vec<&str> = a.effectors.iter().map(|x| x.as_str()).collect();
        let _ = writeln!(
            out,
            "{INDENT}{INDENT}{} kind {} caps {} reach {} effectors {} at {};",
            a.id,
            a.kind,
            list(&caps),
            list(&reach),
            list(&effs),
            a.base
        );
    }
    let _ = writeln!(out, "{INDENT}}}");

    let _ = writeln!(out, "{INDENT}objects {{");
    for o in &e.objects {
        let _ = write!(out, "{INDENT}{INDENT}{} kind {} at {}", o.id, o.kind, o.region);
        if let Some([x, y]) = o.coords {
            let _ = write!(out, " @ [{}, {}]", num(x), num(y));
        }
        if let Some(n) = o.content {
            let _ = write!(out, " content {n}");
        }
        if o.handover {
            out.push_str(" handover");
        }
        out.push_str(";\n");
    }
    let _ = writeln!(out, "{INDENT}}}");

    let _ = writeln!(out, "{INDENT}tasks {{");
    let _ = writeln!(out, "{INDENT}{INDENT}goal {};", task(&d.goal));
    let _ = writeln!(out, "{INDENT}}}");

    for m in &d.methods {
        method(&mut out, m);
    }
    out.push_str("}\n");
    out
}
