//! Fluency metrics and perception timing computed from event logs.
//!
//! Robot perception and waiting count as idle: only Grasp, Release and Move
//! make the robot active. Every human action counts as active unless the
//! operator declared themselves idle at the time.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionTemplate, PerceiveKind};
use crate::sim::{EventKind, EventLog, PolicyKind};
use crate::state::{AgentId, AgentKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Sorts, clips to `[0, span]` and merges touching or overlapping intervals.
pub fn normalize(mut v: Vec<Interval>, span: f64) -> Vec<Interval> {
    v.iter_mut().for_each(|i| {
        i.start = i.start.clamp(0.0, span);
        i.end = i.end.clamp(0.0, span);
    });
    v.retain(|i| !i.is_empty());
    v.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
    let mut out: Vec<Interval> = Vec::with_capacity(v.len());
    for i in v {
        match out.last_mut() {
            Some(last) if i.start <= last.end => last.end = last.end.max(i.end),
            _ => out.push(i),
        }
    }
    out
}

pub fn total(v: &[Interval]) -> f64 {
    v.iter().map(Interval::len).sum()
}

/// Intersection of two normalized interval sets.
pub fn intersect(a: &[Interval], b: &[Interval]) -> Vec<Interval> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let s = a[i].start.max(b[j].start);
        let e = a[i].end.min(b[j].end);
        if s < e {
            out.push(Interval::new(s, e));
        }
        if a[i].end < b[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Removes `b` from the normalized set `a`.
pub fn subtract(a: &[Interval], b: &[Interval]) -> Vec<Interval> {
    let mut out = Vec::new();
    for x in a {
        let mut cur = x.start;
        for y in b.iter().filter(|y| y.end > x.start && y.start < x.end) {
            if y.start > cur {
                out.push(Interval::new(cur, y.start));
            }
            cur = cur.max(y.end);
        }
        if cur < x.end {
            out.push(Interval::new(cur, x.end));
        }
    }
    out
}

/// Activity of both sides over a session `[0, span]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub span: f64,
    pub robot: Vec<Interval>,
    pub human: Vec<Interval>,
}

impl Timeline {
    pub fn from_intervals(span: f64, robot: Vec<Interval>, human: Vec<Interval>) -> Self {
        Self {
            span,
            robot: normalize(robot, span),
            human: normalize(human, span),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("action_start (seq {0}) has no matching action_end")]
    UnmatchedStart(u64),
    #[error("action_end (seq {0}) has no open action")]
    UnmatchedEnd(u64),
    #[error("{agent} starts a new action at t={t} while another is running")]
    Overlap { agent: AgentId, t: f64 },
    #[error("event (seq {0}) has a malformed payload")]
    Payload(u64),
    #[error("session time is zero")]
    EmptySpan,
    #[error("unknown export format `{0}` (expected csv or json)")]
    UnknownFormat(String),
    #[error("cannot parse report: {0}")]
    Parse(String),
}

/// Per-agent activity intervals from a log, measured from its first event.
pub fn build_timeline(log: &EventLog) -> Result<Timeline, MetricsError> {
    timeline_inner(log, None)
}

/// Timeline of a session still in progress: actions that have not ended
/// yet are cut at `now`, which also ends the span.
pub fn build_timeline_until(log: &EventLog, now: f64) -> Result<Timeline, MetricsError> {
    timeline_inner(log, Some(now))
}

/// Which activity set an ended action joins; robot perception and waiting
/// join neither. Agents the header does not declare are an error.
fn side(kind: Option<&AgentKind>, template: ActionTemplate, seq: u64) -> Result<Option<AgentKind>, MetricsError> {
    match kind.ok_or(MetricsError::Payload(seq))? {
        AgentKind::Robot if !matches!(template, ActionTemplate::Grasp | ActionTemplate::Release | ActionTemplate::Move) => {
            Ok(None)
        }
        k => Ok(Some(*k)),
    }
}

fn timeline_inner(log: &EventLog, now: Option<f64>) -> Result<Timeline, MetricsError> {
    let t0 = log.events.first().map(|e| e.t).unwrap_or(0.0);
    let span = now.map_or(log.span(), |n| n.max(log.span())) - t0;
    let kinds = &log.header.agents;
    let mut open: BTreeMap<AgentId, (f64, ActionTemplate, u64)> = BTreeMap::new();
    let mut robot = Vec::new();
    let mut human = Vec::new();
    let mut declared = log.header.scenario.policy == PolicyKind::Interactive;
    let mut declared_since = 0.0;
    let mut declared_idle = Vec::new();
    for e in &log.events {
        let t = e.t - t0;
        match e.kind {
            EventKind::ActionStart => {
                let p = e.action_start().ok_or(MetricsError::Payload(e.seq))?;
                let agent = p.action.agent.clone();
                if open.contains_key(&agent) {
                    return Err(MetricsError::Overlap { agent, t: e.t });
                }
                open.insert(agent, (t, p.action.template, e.seq));
            }
            EventKind::ActionEnd => {
                let agent = e.agent.clone().ok_or(MetricsError::Payload(e.seq))?;
                let (start, template, _) = open.remove(&agent).ok_or(MetricsError::UnmatchedEnd(e.seq))?;
                match side(kinds.get(&agent), template, e.seq)? {
                    Some(AgentKind::Robot) => robot.push(Interval::new(start, t)),
                    Some(AgentKind::Human) => human.push(Interval::new(start, t)),
                    None => {}
                }
            }
            EventKind::HumanEvent => {
                if let Some(flag) = e.idle_toggle() {
                    if flag && !declared {
                        declared_since = t;
                    } else if !flag && declared {
                        declared_idle.push(Interval::new(declared_since, t));
                    }
                    declared = flag;
                }
            }
            _ => {}
        }
    }
    for (agent, (start, template, seq)) in open {
        if now.is_none() {
            return Err(MetricsError::UnmatchedStart(seq));
        }
        match side(kinds.get(&agent), template, seq)? {
            Some(AgentKind::Robot) => robot.push(Interval::new(start, span)),
            Some(AgentKind::Human) => human.push(Interval::new(start, span)),
            None => {}
        }
    }
    if declared {
        declared_idle.push(Interval::new(declared_since, span));
    }
    let human = subtract(&normalize(human, span), &normalize(declared_idle, span));
    Ok(Timeline::from_intervals(span, robot, human))
}

/// Percentages of session time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluencyReport {
    pub h_idle: f64,
    pub r_idle: f64,
    pub f_del: f64,
    pub c_act: f64,
}

impl FluencyReport {
    /// `c_act + h_idle + r_idle - f_del - 100`; zero up to rounding.
    pub fn identity_residual(&self) -> f64 {
        self.c_act + self.h_idle + self.r_idle - self.f_del - 100.0
    }

    pub fn mean(reports: &[FluencyReport]) -> Option<FluencyReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&FluencyReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(FluencyReport {
            h_idle: sum(|r| r.h_idle),
            r_idle: sum(|r| r.r_idle),
            f_del: sum(|r| r.f_del),
            c_act: sum(|r| r.c_act),
        })
    }
}

pub fn fluency(tl: &Timeline) -> Result<FluencyReport, MetricsError> {
    if !(tl.span > 0.0) {
        return Err(MetricsError::EmptySpan);
    }
    let t = tl.span;
    let r = total(&tl.robot);
    let h = total(&tl.human);
    let both = total(&intersect(&tl.robot, &tl.human));
    let pct = |x: f64| (x / t * 100.0).clamp(0.0, 100.0);
    Ok(FluencyReport {
        h_idle: pct(t - h),
        r_idle: pct(t - r),
        // Both idle = span minus the union of activity.
        f_del: pct(t - (r + h - both)),
        c_act: pct(both),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    /// Sample standard deviation; zero for a single observation.
    pub std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindTiming {
    pub count: usize,
    pub stats: Option<KindStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionTimingReport {
    pub kinds: BTreeMap<PerceiveKind, KindTiming>,
}

impl PerceptionTimingReport {
    pub fn from_durations(samples: &BTreeMap<PerceiveKind, Vec<f64>>) -> Self {
        let kinds = PerceiveKind::ALL
            .into_iter()
            .map(|k| {
                let v = samples.get(&k).map(Vec::as_slice).unwrap_or(&[]);
                let stats = (!v.is_empty()).then(|| {
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let var = if v.len() > 1 {
                        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                    } else {
                        0.0
                    };
                    KindStats {
                        mean_s: mean,
                        min_s: v.iter().copied().fold(f64::INFINITY, f64::min),
                        max_s: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        std_s: var.sqrt(),
                    }
                });
                (k, KindTiming { count: v.len(), stats })
            })
            .collect();
        Self { kinds }
    }

    pub fn get(&self, k: PerceiveKind) -> &KindTiming {
        &self.kinds[&k]
    }
}

/// Duration statistics of every perceive result in the logs.
pub fn perception_timing<'a>(logs: impl IntoIterator<Item = &'a EventLog>) -> Result<PerceptionTimingReport, MetricsError> {
    let mut samples: BTreeMap<PerceiveKind, Vec<f64>> = BTreeMap::new();
    for log in logs {
        for e in log.events.iter().filter(|e| e.kind == EventKind::PerceiveResult) {
            let r = e.perceive_result().ok_or(MetricsError::Payload(e.seq))?;
            samples.entry(r.kind).or_default().push(r.duration);
        }
    }
    Ok(PerceptionTimingReport::from_durations(&samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(MetricsError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

pub const FLUENCY_HEADER: [&str; 4] = ["h_idle", "r_idle", "f_del", "c_act"];
pub const PERCEPTION_HEADER: [&str; 6] = ["kind", "count", "mean_s", "min_s", "max_s", "std_s"];

fn csv_err(e: impl fmt::Display) -> MetricsError {
    MetricsError::Parse(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

/// One row per report under a fixed header.
pub fn export_fluency(reports: &[FluencyReport], format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(FLUENCY_HEADER).expect("in-memory writer");
            for r in reports {
                w.serialize(r).expect("in-memory writer");
            }
            finish(w)
        }
        ExportFormat::Json => serde_json::to_vec_pretty(reports).expect("serializable"),
    }
}

pub fn parse_fluency(bytes: &[u8], format: ExportFormat) -> Result<Vec<FluencyReport>, MetricsError> {
    match format {
        ExportFormat::Csv => {
            let mut r = csv::Reader::from_reader(bytes);
            let header = r.headers().map_err(csv_err)?;
            if header.iter().ne(FLUENCY_HEADER) {
                return Err(MetricsError::Parse(format!("unexpected header {header:?}")));
            }
            r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
        }
        ExportFormat::Json => serde_json::from_slice(bytes).map_err(csv_err),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    kind: PerceiveKind,
    count: usize,
    mean_s: f64,
    min_s: f64,
    max_s: f64,
    std_s: f64,
}

/// Rows only for kinds that occurred; an empty report is header-only.
pub fn export_timing(report: &PerceptionTimingReport, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(PERCEPTION_HEADER).expect("in-memory writer");
            for (kind, t) in &report.kinds {
                if let Some(s) = t.stats {
                    w.serialize(TimingRow {
                        kind: *kind,
                        count: t.count,
                        mean_s: s.mean_s,
                        min_s: s.min_s,
                        max_s: s.max_s,
                        std_s: s.std_s,
                    })
                    .expect("in-memory writer");
                }
            }
            finish(w)
        }
        ExportFormat::Json => serde_json::to_vec_pretty(report).expect("serializable"),
    }
}

pub fn parse_timing(bytes: &[u8], format: ExportFormat) -> Result<PerceptionTimingReport, MetricsError> {
    match format {
        ExportFormat::Csv => {
            let mut r = csv::Reader::from_reader(bytes);
            let header = r.headers().map_err(csv_err)?;
            if header.iter().ne(PERCEPTION_HEADER) {
                return Err(MetricsError::Parse(format!("unexpected header {header:?}")));
            }
            let mut kinds: BTreeMap<PerceiveKind, KindTiming> = PerceiveKind::ALL
                .into_iter()
                .map(|k| (k, KindTiming { count: 0, stats: None }))
                .collect();
            for row in r.deserialize::<TimingRow>() {
                let row = row.map_err(csv_err)?;
                kinds.insert(
                    row.kind,
                    KindTiming {
                        count: row.count,
                        stats: Some(KindStats {
                            mean_s: row.mean_s,
                            min_s: row.min_s,
                            max_s: row.max_s,
                            std_s: row.std_s,
                        }),
                    },
                );
            }
            Ok(PerceptionTimingReport { kinds })
        }
        ExportFormat::Json => serde_json::from_slice(bytes).map_err(csv_err),
    }
}
