use std::collections::{BTreeMap, BTreeSet};

use super::lexer::{tokenize, Tok, Token};
use super::{ParseError, ParseErrorKind, SemanticRule};
use crate::action::{ActionTemplate, CharacteristicEdit, PerceiveKind};
use crate::planner::{Domain, Literal, Method, Predicate, PrimitivePattern, Task, Term, WaitPattern};
use crate::state::{
    new_state, AgentDecl, AgentKind, EntityDeclarations, ObjectDecl, RegionDecl, StateError,
};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pos {
    line: usize,
    col: usize,
}

#[derive(Debug, Clone)]
enum ArgKind {
    Ident(String),
    Num(f64, String),
    Str(String),
    Call(String, Vec<Arg>),
}

#[derive(Debug, Clone)]
struct Arg {
    kind: ArgKind,
    pos: Pos,
}

#[derive(Debug, Clone)]
struct Call {
    name: String,
    args: Vec<Arg>,
    pos: Pos,
}

struct RawLiteral {
    negated: bool,
    call: Call,
}

struct RawMethod {
    name: String,
    params: Vec<(String, Pos)>,
    pre: Vec<RawLiteral>,
    body: Vec<Call>,
    pos: Pos,
}

struct RawAgent {
    id: String,
    kind: (String, Pos),
    caps: Vec<(String, Pos)>,
    reach: Vec<(String, Pos)>,
    effectors: Vec<(String, Pos)>,
    base: (String, Pos),
    pos: Pos,
}

struct RawObject {
    decl: ObjectDecl,
    pos: Pos,
}

#[derive(Default)]
struct RawDomain {
    name: String,
    regions: Vec<(RegionDecl, Pos)>,
    agents: Vec<RawAgent>,
    objects: Vec<RawObject>,
    goals: Vec<Call>,
    methods: Vec<RawMethod>,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

fn syntax(tok: &Token, expected: &[&str], message: String) -> ParseError {
    ParseError {
        line: tok.line,
        col: tok.col,
        expected: expected.iter().map(|s| s.to_string()).collect(),
        message,
        kind: ParseErrorKind::Syntax,
    }
}

fn semantic(pos: Pos, rule: SemanticRule, message: String) -> ParseError {
    ParseError {
        line: pos.line,
        col: pos.col,
        expected: Vec::new(),
        message,
        kind: ParseErrorKind::Semantic(rule),
    }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn here(&self) -> Pos {
        let t = self.peek();
        Pos {
            line: t.line,
            col: t.col,
        }
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        let t = self.peek();
        let list = expected.join(", ");
        syntax(t, expected, format!("expected {list}, found {}", t.tok))
    }

    fn is_punct(&self, c: char) -> bool {
        self.peek().tok == Tok::Punct(c)
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn punct(&mut self, c: char) -> Result<(), ParseError> {
        if self.is_punct(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&[&format!("`{c}`")]))
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.is_keyword(kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&[&format!("`{kw}`")]))
        }
    }

    fn ident(&mut self) -> Result<(String, Pos), ParseError> {
        let pos = self.here();
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok((s, pos))
            }
            _ => Err(self.unexpected(&["identifier"])),
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        match &self.peek().tok {
            Tok::Num(v, _) => {
                let v = *v;
                self.bump();
                Ok(v)
            }
            _ => Err(self.unexpected(&["number"])),
        }
    }

    fn ident_list(&mut self) -> Result<Vec<(String, Pos)>, ParseError> {
        self.punct('[')?;
        let mut out = Vec::new();
        if self.is_punct(']') {
            self.bump();
            return Ok(out);
        }
        loop {
            out.push(self.ident()?);
            if self.is_punct(',') {
                self.bump();
            } else if self.is_punct(']') {
                self.bump();
                return Ok(out);
            } else {
                return Err(self.unexpected(&["`,`", "`]`"]));
            }
        }
    }

    fn number_list(&mut self, n: usize) -> Result<Vec<f64>, ParseError> {
        self.punct('[')?;
        let mut out = Vec::new();
        for i in 0..n {
            if i > 0 {
                self.punct(',')?;
            }
            out.push(self.number()?);
        }
        self.punct(']')?;
        Ok(out)
    }

    fn file(&mut self) -> Result<RawDomain, ParseError> {
        let mut d = RawDomain::default();
        self.keyword("domain")?;
        d.name = match &self.peek().tok {
            Tok::Str(s) => {
                let s = s.clone();
                self.bump();
                s
            }
            _ => return Err(self.unexpected(&["string"])),
        };
        self.punct('{')?;
        loop {
            let sections = ["`regions`", "`agents`", "`objects`", "`tasks`", "`method`", "`}`"];
            match &self.peek().tok {
                Tok::Punct('}') => {
                    self.bump();
                    break;
                }
                Tok::Ident(kw) => match kw.as_str() {
                    "regions" => self.regions(&mut d)?,
                    "agents" => self.agents(&mut d)?,
                    "objects" => self.objects(&mut d)?,
                    "tasks" => self.tasks(&mut d)?,
                    "method" => {
                        let m = self.method()?;
                        d.methods.push(m);
                    }
                    _ => return Err(self.unexpected(&sections)),
                },
                _ => return Err(self.unexpected(&sections)),
            }
        }
        if self.peek().tok != Tok::Eof {
            return Err(self.unexpected(&["end of input"]));
        }
        Ok(d)
    }

    fn block<F>(&mut self, kw: &str, mut item: F) -> Result<(), ParseError>
    where
        F: FnMut(&mut Self) -> Result<(), ParseError>,
    {
        self.keyword(kw)?;
        self.punct('{')?;
        while !self.is_punct('}') {
            if !matches!(self.peek().tok, Tok::Ident(_)) {
                return Err(self.unexpected(&["identifier", "`}`"]));
            }
            item(self)?;
        }
        self.bump();
        Ok(())
    }

    fn regions(&mut self, d: &mut RawDomain) -> Result<(), ParseError> {
        self.block("regions", |p| {
            let (id, pos) = p.ident()?;
            p.keyword("bounds")?;
            let b = p.number_list(4)?;
            p.punct(';')?;
            d.regions.push((
                RegionDecl {
                    id: id.as_str().into(),
                    min: [b[0], b[1]],
                    max: [b[2], b[3]],
                },
                pos,
            ));
            Ok(())
        })
    }

    fn agents(&mut self, d: &mut RawDomain) -> Result<(), ParseError> {
        self.block("agents", |p| {
            let (id, pos) = p.ident()?;
            p.keyword("kind")?;
            let kind = p.ident()?;
            p.keyword("caps")?;
            let caps = p.ident_list()?;
            p.keyword("reach")?;
            let reach = p.ident_list()?;
            p.keyword("effectors")?;
            let effectors = p.ident_list()?;
            p.keyword("at")?;
            let base = p.ident()?;
            p.punct(';')?;
            d.agents.push(RawAgent {
                id,
                kind,
                caps,
                reach,
                effectors,
                base,
                pos,
            });
            Ok(())
        })
    }

    fn objects(&mut self, d: &mut RawDomain) -> Result<(), ParseError> {
        self.block("objects", |p| {
            let (id, pos) = p.ident()?;
            p.keyword("kind")?;
            let (kind, _) = p.ident()?;
            p.keyword("at")?;
            let (region, _) = p.ident()?;
            let mut decl = ObjectDecl {
                id: id.as_str().into(),
                kind,
                region: region.as_str().into(),
                coords: None,
                content: None,
                handover: false,
            };
            if p.is_punct('@') {
                p.bump();
                let c = p.number_list(2)?;
                decl.coords = Some([c[0], c[1]]);
            }
            if p.is_keyword("content") {
                p.bump();
                let t = p.peek().clone();
                let n = p.number()?;
                if n < 0.0 || n.fract() != 0.0 || n > u32::MAX as f64 {
                    return Err(syntax(&t, &["non-negative integer"], format!("invalid content count {n}")));
                }
                decl.content = Some(n as u32);
            }
            if p.is_keyword("handover") {
                p.bump();
                decl.handover = true;
            }
            p.punct(';')?;
            d.objects.push(RawObject { decl, pos });
            Ok(())
        })
    }

    fn tasks(&mut self, d: &mut RawDomain) -> Result<(), ParseError> {
        self.block("tasks", |p| {
            p.keyword("goal")?;
            let call = p.call()?;
            p.punct(';')?;
            d.goals.push(call);
            Ok(())
        })
    }

    fn method(&mut self) -> Result<RawMethod, ParseError> {
        self.keyword("method")?;
        let (name, pos) = self.ident()?;
        self.punct('(')?;
        let mut params = Vec::new();
        if !self.is_punct(')') {
            loop {
                params.push(self.ident()?);
                if self.is_punct(',') {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.punct(')')?;
        let mut pre = Vec::new();
        if self.is_keyword("pre") {
            self.bump();
            self.punct('[')?;
            if !self.is_punct(']') {
                loop {
                    let negated = if self.is_punct('!') {
                        self.bump();
                        true
                    } else {
                        false
                    };
                    pre.push(RawLiteral {
                        negated,
                        call: self.call()?,
                    });
                    if self.is_punct(',') {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.punct(']')?;
        }
        self.punct('{')?;
        let mut body = Vec::new();
        while !self.is_punct('}') {
            if !matches!(self.peek().tok, Tok::Ident(_)) {
                return Err(self.unexpected(&["identifier", "`}`"]));
            }
            body.push(self.call()?);
            self.punct(';')?;
        }
        self.bump();
        Ok(RawMethod {
            name,
            params,
            pre,
            body,
            pos,
        })
    }

    fn call(&mut self) -> Result<Call, ParseError> {
        let (name, pos) = self.ident()?;
        self.punct('(')?;
        let args = self.args()?;
        Ok(Call { name, args, pos })
    }

    /// Argument list after the opening parenthesis, consuming the closing one.
    fn args(&mut self) -> Result<Vec<Arg>, ParseError> {
        let mut args = Vec::new();
        if self.is_punct(')') {
            self.bump();
            return Ok(args);
        }
        loop {
            let pos = self.here();
            let kind = match self.peek().tok.clone() {
                Tok::Ident(s) => {
                    self.bump();
                    if self.is_punct('(') {
                        self.bump();
                        ArgKind::Call(s, self.args()?)
                    } else {
                        ArgKind::Ident(s)
                    }
                }
                Tok::Num(v, raw) => {
                    self.bump();
                    ArgKind::Num(v, raw)
                }
                Tok::Str(s) => {
                    self.bump();
                    ArgKind::Str(s)
                }
                _ => return Err(self.unexpected(&["identifier", "number", "string"])),
            };
            args.push(Arg { kind, pos });
            if self.is_punct(',') {
                self.bump();
            } else if self.is_punct(')') {
                self.bump();
                return Ok(args);
            } else {
                return Err(self.unexpected(&["`,`", "`)`"]));
            }
        }
    }
}

/// Scope for resolving identifiers inside a method or the goal.
struct Scope<'a> {
    decl: &'a EntityDeclarations,
    params: &'a [String],
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Agent,
    Object,
    Region,
    /// Region or object.
    Place,
}

impl Role {
    fn noun(self) -> &'static str {
        match self {
            Role::Agent => "agent",
            Role::Object => "object",
            Role::Region => "region",
            Role::Place => "region or object",
        }
    }
}

impl Scope<'_> {
    fn term(&self, arg: &Arg, role: Role) -> Result<Term, ParseError> {
        let ArgKind::Ident(s) = &arg.kind else {
            return Err(semantic(
                arg.pos,
                SemanticRule::UndeclaredEntity,
                format!("expected {} identifier", role.noun()),
            ));
        };
        if self.params.contains(s) {
            return Ok(Term::Var(s.clone()));
        }
        let d = self.decl;
        let ok = match role {
            Role::Agent => d.agent(&s.as_str().into()).is_some(),
            Role::Object => d.object(&s.as_str().into()).is_some(),
            Role::Region => d.region(&s.as_str().into()).is_some(),
            Role::Place => {
                d.region(&s.as_str().into()).is_some() || d.object(&s.as_str().into()).is_some()
            }
        };
        if ok {
            Ok(Term::Const(s.clone()))
        } else {
            Err(semantic(
                arg.pos,
                SemanticRule::UndeclaredEntity,
                format!("undeclared {} `{s}`", role.noun()),
            ))
        }
    }

    fn effector(&self, agent: &Term, arg: &Arg) -> Result<Term, ParseError> {
        let ArgKind::Ident(s) = &arg.kind else {
            return Err(semantic(arg.pos, SemanticRule::UnknownEffector, "expected end-effector name".into()));
        };
        if self.params.contains(s) {
            return Ok(Term::Var(s.clone()));
        }
        let known = match agent {
            Term::Const(a) => self
                .decl
                .agent(&a.as_str().into())
                .map(|a| a.effectors.iter().any(|e| e.0 == *s))
                .unwrap_or(false),
            Term::Var(_) => self.decl.agents.iter().any(|a| a.effectors.iter().any(|e| e.0 == *s)),
        };
        if known {
            Ok(Term::Const(s.clone()))
        } else {
            Err(semantic(
                arg.pos,
                SemanticRule::UnknownEffector,
                format!("unknown end-effector `{s}` for agent `{agent}`"),
            ))
        }
    }

    /// First declared agent able to run `template`, used when a call omits the agent.
    fn default_agent(&self, template: ActionTemplate, pos: Pos) -> Result<Term, ParseError> {
        self.decl
            .agents
            .iter()
            .find(|a| a.caps.contains(&template))
            .map(|a| Term::Const(a.id.0.clone()))
            .ok_or_else(|| {
                semantic(
                    pos,
                    SemanticRule::CapabilityMismatch,
                    format!("no agent is capable of {template}"),
                )
            })
    }

    fn arity(call: &Call, allowed: &[usize]) -> Result<(), ParseError> {
        if allowed.contains(&call.args.len()) {
            Ok(())
        } else {
            let want: Vec<String> = allowed.iter().map(|n| n.to_string()).collect();
            Err(semantic(
                call.pos,
                SemanticRule::ArityMismatch,
                format!(
                    "`{}` takes {} argument(s), found {}",
                    call.name,
                    want.join(" or "),
                    call.args.len()
                ),
            ))
        }
    }

    fn wait_condition(&self, arg: &Arg) -> Result<WaitPattern, ParseError> {
        let bad = || semantic(arg.pos, SemanticRule::UnknownCondition, "unknown wait condition".into());
        match &arg.kind {
            ArgKind::Ident(s) if s == "pull_signal" => Ok(WaitPattern::PullSignal),
            ArgKind::Ident(s) if s == "human_idle" => Ok(WaitPattern::HumanIdle),
            ArgKind::Call(name, args) if args.len() == 1 => {
                let o = self.term(&args[0], Role::Object)?;
                match name.as_str() {
                    "box_empty" => Ok(WaitPattern::BoxEmpty(o)),
                    "object_available" => Ok(WaitPattern::ObjectAvailable(o)),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }

    fn edit(&self, arg: &Arg) -> Result<CharacteristicEdit, ParseError> {
        let bad = || semantic(arg.pos, SemanticRule::UnknownEdit, "unknown manipulate edit".into());
        match &arg.kind {
            ArgKind::Ident(s) => match s.as_str() {
                "assemble" => Ok(CharacteristicEdit::Assemble),
                "disassemble" => Ok(CharacteristicEdit::Disassemble),
                "take" => Ok(CharacteristicEdit::Take),
                _ => Err(bad()),
            },
            ArgKind::Call(name, args) => match (name.as_str(), args.as_slice()) {
                ("dof", [Arg { kind: ArgKind::Num(v, _), .. }]) => Ok(CharacteristicEdit::Dof(*v)),
                ("set", [k, v]) => {
                    let text = |a: &Arg| match &a.kind {
                        ArgKind::Ident(s) | ArgKind::Str(s) => Some(s.clone()),
                        ArgKind::Num(_, raw) => Some(raw.clone()),
                        ArgKind::Call(..) => None,
                    };
                    match (&k.kind, text(v)) {
                        (ArgKind::Ident(key), Some(value)) => Ok(CharacteristicEdit::Set {
                            key: key.clone(),
                            value,
                        }),
                        _ => Err(bad()),
                    }
                }
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }

    fn perceive_kind(arg: &Arg) -> Option<PerceiveKind> {
        match &arg.kind {
            ArgKind::Ident(s) => s.parse().ok(),
            _ => None,
        }
    }

    fn primitive(&self, call: &Call, template: ActionTemplate) -> Result<PrimitivePattern, ParseError> {
        use PrimitivePattern as P;
        let a = &call.args;
        let pat = match template {
            ActionTemplate::Grasp | ActionTemplate::Release => {
                Self::arity(call, &[3])?;
                let agent = self.term(&a[0], Role::Agent)?;
                let effector = self.effector(&agent, &a[1])?;
                let object = self.term(&a[2], Role::Object)?;
                if template == ActionTemplate::Grasp {
                    P::Grasp { agent, effector, object }
                } else {
                    P::Release { agent, effector, object }
                }
            }
            ActionTemplate::Move => {
                Self::arity(call, &[3])?;
                let agent = self.term(&a[0], Role::Agent)?;
                let effector = self.effector(&agent, &a[1])?;
                let target = self.term(&a[2], Role::Place)?;
                P::Move { agent, effector, target }
            }
            ActionTemplate::Perceive => {
                Self::arity(call, &[1, 2, 3])?;
                let unknown = |arg: &Arg| {
                    semantic(arg.pos, SemanticRule::UnknownPerceiveKind, "unknown perceive kind".into())
                };
                let (agent, rest) = match Self::perceive_kind(&a[0]) {
                    Some(_) if a.len() < 3 => (self.default_agent(template, call.pos)?, &a[..]),
                    _ => (self.term(&a[0], Role::Agent)?, &a[1..]),
                };
                let Some(first) = rest.first() else {
                    return Err(semantic(call.pos, SemanticRule::ArityMismatch, "perceive needs a kind".into()));
                };
                let kind = Self::perceive_kind(first).ok_or_else(|| unknown(first))?;
                let object = match rest.get(1) {
                    Some(o) => Some(self.term(o, Role::Object)?),
                    None => None,
                };
                P::Perceive { agent, kind, object }
            }
            ActionTemplate::Wait => {
                Self::arity(call, &[1, 2])?;
                let (agent, cond) = if a.len() == 2 {
                    (self.term(&a[0], Role::Agent)?, &a[1])
                } else {
                    (self.default_agent(template, call.pos)?, &a[0])
                };
                P::Wait {
                    agent,
                    condition: self.wait_condition(cond)?,
                }
            }
            ActionTemplate::Manipulate => {
                Self::arity(call, &[3])?;
                P::Manipulate {
                    agent: self.term(&a[0], Role::Agent)?,
                    object: self.term(&a[1], Role::Object)?,
                    edit: self.edit(&a[2])?,
                }
            }
        };
        if let Term::Const(agent) = pat.agent() {
            let caps = &self.decl.agent(&agent.as_str().into()).expect("checked").caps;
            if !caps.contains(&template) {
                return Err(semantic(
                    call.pos,
                    SemanticRule::CapabilityMismatch,
                    format!("agent `{agent}` is not capable of {template}"),
                ));
            }
        }
        Ok(pat)
    }

    fn task(&self, call: &Call, arities: &BTreeMap<&str, usize>) -> Result<Task, ParseError> {
        if let Ok(t) = call.name.parse::<ActionTemplate>() {
            return Ok(Task::Primitive(self.primitive(call, t)?));
        }
        let Some(&n) = arities.get(call.name.as_str()) else {
            return Err(semantic(
                call.pos,
                SemanticRule::MissingMethod,
                format!("compound task `{}` has no method", call.name),
            ));
        };
        Self::arity(call, &[n])?;
        let args = call
            .args
            .iter()
            .map(|a| self.any_term(a))
            .collect::<Result<_, _>>()?;
        Ok(Task::Compound {
            name: call.name.clone(),
            args,
        })
    }

    /// A compound-task argument: parameter or any declared entity.
    fn any_term(&self, arg: &Arg) -> Result<Term, ParseError> {
        match &arg.kind {
            ArgKind::Ident(s) if self.params.contains(s) || self.decl.is_declared(s) => {
                Ok(if self.params.contains(s) {
                    Term::Var(s.clone())
                } else {
                    Term::Const(s.clone())
                })
            }
            ArgKind::Ident(s) => Err(semantic(
                arg.pos,
                SemanticRule::UndeclaredEntity,
                format!("undeclared entity `{s}`"),
            )),
            _ => Err(semantic(
                arg.pos,
                SemanticRule::UndeclaredEntity,
                "task arguments must be identifiers".into(),
            )),
        }
    }

    fn literal(&self, raw: &RawLiteral) -> Result<Literal, ParseError> {
        let c = &raw.call;
        let want = |k: usize| -> Result<(), ParseError> { Self::arity(c, &[k]).map(|_| ()) };
        let pred = match c.name.as_str() {
            "at" => {
                want(2)?;
                Predicate::At(self.term(&c.args[0], Role::Object)?, self.term(&c.args[1], Role::Region)?)
            }
            "free" => {
                want(2)?;
                let a = self.term(&c.args[0], Role::Agent)?;
                let e = self.effector(&a, &c.args[1])?;
                Predicate::Free(a, e)
            }
            "holding" => {
                want(3)?;
                let a = self.term(&c.args[0], Role::Agent)?;
                let e = self.effector(&a, &c.args[1])?;
                Predicate::Holding(a, e, self.term(&c.args[2], Role::Object)?)
            }
            "grasped" | "assembled" | "empty" => {
                want(1)?;
                let o = self.term(&c.args[0], Role::Object)?;
                match c.name.as_str() {
                    "grasped" => Predicate::Grasped(o),
                    "assembled" => Predicate::Assembled(o),
                    _ => Predicate::Empty(o),
                }
            }
            other => {
                return Err(semantic(
                    c.pos,
                    SemanticRule::UnknownPredicate,
                    format!("unknown predicate `{other}`"),
                ));
            }
        };
        Ok(Literal {
            negated: raw.negated,
            pred,
        })
    }
}

fn resolve(raw: RawDomain) -> Result<Domain, ParseError> {
    let mut positions: BTreeMap<String, Pos> = BTreeMap::new();
    let mut claim = |id: &str, pos: Pos| -> Result<(), ParseError> {
        if positions.insert(id.to_string(), pos).is_some() {
            return Err(semantic(pos, SemanticRule::DuplicateId, format!("duplicate identifier `{id}`")));
        }
        Ok(())
    };
    for (r, pos) in &raw.regions {
        claim(&r.id.0, *pos)?;
    }
    for a in &raw.agents {
        claim(&a.id, a.pos)?;
    }
    for o in &raw.objects {
        claim(&o.decl.id.0, o.pos)?;
    }

    let region_known = |id: &str| raw.regions.iter().any(|(r, _)| r.id.0 == id);
    let mut agents = Vec::new();
    for a in &raw.agents {
        let kind = match a.kind.0.as_str() {
            "robot" => AgentKind::Robot,
            "human" => AgentKind::Human,
            other => {
                return Err(semantic(
                    a.kind.1,
                    SemanticRule::UnknownAgentKind,
                    format!("unknown agent kind `{other}`"),
                ))
            }
        };
        let mut caps = Vec::new();
        for (c, pos) in &a.caps {
            let t: ActionTemplate = c.parse().map_err(|_| {
                semantic(*pos, SemanticRule::UnknownTemplate, format!("unknown template `{c}`"))
            })?;
            if caps.contains(&t) {
                return Err(semantic(*pos, SemanticRule::DuplicateId, format!("capability `{c}` listed twice")));
            }
            caps.push(t);
        }
        if caps.is_empty() {
            return Err(semantic(a.pos, SemanticRule::UnknownTemplate, format!("agent `{}` has no capabilities", a.id)));
        }
        for (r, pos) in a.reach.iter().chain(std::iter::once(&a.base)) {
            if !region_known(r) {
                return Err(semantic(*pos, SemanticRule::UndeclaredEntity, format!("undeclared region `{r}`")));
            }
        }
        let mut effs = BTreeSet::new();
        for (e, pos) in &a.effectors {
            if !effs.insert(e.as_str()) {
                return Err(semantic(*pos, SemanticRule::DuplicateId, format!("duplicate end-effector `{e}`")));
            }
        }
        if a.effectors.is_empty() {
            return Err(semantic(a.pos, SemanticRule::UnknownEffector, format!("agent `{}` has no end-effectors", a.id)));
        }
        agents.push(AgentDecl {
            id: a.id.as_str().into(),
            kind,
            caps,
            reach: a.reach.iter().map(|(r, _)| r.as_str().into()).collect(),
            effectors: a.effectors.iter().map(|(e, _)| e.as_str().into()).collect(),
            base: a.base.0.as_str().into(),
        });
    }
    let entities = EntityDeclarations {
        regions: raw.regions.iter().map(|(r, _)| r.clone()).collect(),
        agents,
        objects: raw.objects.iter().map(|o| o.decl.clone()).collect(),
    };
    if let Err(e) = new_state(&entities) {
        let (rule, id) = match &e {
            StateError::DuplicateId(id) => (SemanticRule::DuplicateId, id.clone()),
            StateError::UndeclaredRegion { entity, .. } => (SemanticRule::UndeclaredEntity, entity.clone()),
            StateError::OutOfBounds { entity, .. } => (SemanticRule::InvalidPlacement, entity.clone()),
            StateError::InvalidBounds(id) => (SemanticRule::InvalidPlacement, id.clone()),
            StateError::UnknownAgent(id) | StateError::NoEffectors(id) => (SemanticRule::UndeclaredEntity, id.clone()),
            StateError::MismatchedEntities(_) => (SemanticRule::UndeclaredEntity, String::new()),
        };
        let pos = positions.get(&id).copied().unwrap_or(Pos { line: 1, col: 1 });
        return Err(semantic(pos, rule, e.to_string()));
    }

    let mut arities: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &raw.methods {
        if m.name.parse::<ActionTemplate>().is_ok() {
            return Err(semantic(m.pos, SemanticRule::ReservedName, format!("method name `{}` is a primitive template", m.name)));
        }
        let n = m.params.len();
        if let Some(&prev) = arities.get(m.name.as_str()) {
            if prev != n {
                return Err(semantic(
                    m.pos,
                    SemanticRule::ArityMismatch,
                    format!("method `{}` declared with {n} parameter(s), earlier with {prev}", m.name),
                ));
            }
        }
        arities.insert(&m.name, n);
        let mut seen = BTreeSet::new();
        for (p, pos) in &m.params {
            if !seen.insert(p) {
                return Err(semantic(*pos, SemanticRule::DuplicateId, format!("duplicate parameter `{p}`")));
            }
        }
    }

    let mut methods = Vec::new();
    for m in &raw.methods {
        let params: Vec<String> = m.params.iter().map(|(p, _)| p.clone()).collect();
        let scope = Scope {
            decl: &entities,
            params: &params,
        };
        let precondition = m.pre.iter().map(|l| scope.literal(l)).collect::<Result<_, _>>()?;
        let subtasks = m.body.iter().map(|c| scope.task(c, &arities)).collect::<Result<_, _>>()?;
        methods.push(Method {
            task_name: m.name.clone(),
            params,
            precondition,
            subtasks,
        });
    }

    let goal_call = match raw.goals.as_slice() {
        [g] => g,
        [] => {
            return Err(semantic(Pos { line: 1, col: 1 }, SemanticRule::MissingGoal, "no goal task declared".into()))
        }
        [_, second, ..] => {
            return Err(semantic(second.pos, SemanticRule::DuplicateGoal, "more than one goal task".into()))
        }
    };
    let goal = Scope {
        decl: &entities,
        params: &[],
    }
    .task(goal_call, &arities)?;

    Ok(Domain {
        name: raw.name,
        entities,
        methods,
        goal,
    })
}

pub(super) fn parse_text(text: &str) -> Result<Domain, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, pos: 0 };
    resolve(p.file()?)
}
