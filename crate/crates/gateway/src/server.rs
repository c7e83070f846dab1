//! `/session` endpoint: one interactive simulation driven by one client.
//!
//! A single actor task owns the [`Session`]; socket tasks only forward
//! frames into its queue, so all session mutations happen in order.

use std::net::SocketAddr;
use std::time::Duration;

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use log::{debug, info, warn};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{interval, Instant, MissedTickBehavior};

use coplan_core::metrics::{build_timeline_until, fluency};
use coplan_core::sim::{EventKind, EventLog, PolicyKind, Scenario, Session, SimError, SimEvent};

use crate::wire::{Body, WireMessage};

pub const DEFAULT_PORT: u16 = 7321;

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    /// Virtual seconds per wall second.
    pub speed: f64,
    pub heartbeat: Duration,
    /// How long a dropped session waits for its client to come back.
    pub resume_window: Duration,
    /// Wall-clock period of virtual-clock advancement.
    pub tick: Duration,
    pub metrics_every: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            speed: 1.0,
            heartbeat: Duration::from_secs(5),
            resume_window: Duration::from_secs(60),
            tick: Duration::from_millis(20),
            metrics_every: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot listen: {0}")]
    Bind(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("the gateway serves interactive scenarios only (got policy {0})")]
    Policy(PolicyKind),
    #[error("speed must be a positive number (got {0})")]
    Speed(f64),
    #[error("session task failed: {0}")]
    Task(String),
}

enum Command {
    Connect {
        out: mpsc::UnboundedSender<Outgoing>,
        reply: oneshot::Sender<Result<u64, String>>,
    },
    Frame {
        conn: u64,
        text: String,
    },
    Disconnect {
        conn: u64,
    },
}

enum Outgoing {
    Text(String),
    Close,
}

/// A running gateway; the session ends when its client leaves for longer
/// than the resume window.
pub struct Gateway {
    addr: SocketAddr,
    actor: JoinHandle<Result<EventLog, SimError>>,
    server: JoinHandle<()>,
}

impl Gateway {
    /// Validates the scenario, binds `addr` and starts serving.
    pub async fn bind(scenario: Scenario, addr: SocketAddr, config: GatewayConfig) -> Result<Self, GatewayError> {
        if scenario.policy != PolicyKind::Interactive {
            return Err(GatewayError::Policy(scenario.policy));
        }
        if !(config.speed.is_finite() && config.speed > 0.0) {
            return Err(GatewayError::Speed(config.speed));
        }
        let session = Session::new(scenario)?;
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel(256);
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let actor = tokio::spawn(async move {
            let result = Actor::new(session, config).run(rx).await;
            let _ = stop_tx.send(());
            result
        });
        let app = Router::new().route("/session", get(upgrade)).with_state(tx);
        let server = tokio::spawn(async move {
            let shutdown = async {
                let _ = stop_rx.await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                warn!("gateway server stopped: {e}");
            }
        });
        info!("session gateway listening on ws://{addr}/session");
        Ok(Self { addr, actor, server })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Waits for the session to end and returns its event log.
    pub async fn finished(self) -> Result<EventLog, GatewayError> {
        let log = self.actor.await.map_err(|e| GatewayError::Task(e.to_string()))??;
        let _ = self.server.await;
        Ok(log)
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(tx): State<mpsc::Sender<Command>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, tx))
}

async fn connection(socket: WebSocket, tx: mpsc::Sender<Command>) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let (reply_tx, reply_rx) = oneshot::channel();
    if tx.send(Command::Connect { out: out_tx, reply: reply_tx }).await.is_err() {
        return;
    }
    let conn = match reply_rx.await {
        Ok(Ok(id)) => id,
        Ok(Err(refusal)) => {
            let _ = sink.send(Message::Text(refusal.into())).await;
            let _ = sink
                .send(Message::Close(Some(CloseFrame {
                    code: 1008,
                    reason: "session already has a client".into(),
                })))
                .await;
            return;
        }
        Err(_) => return,
    };
    let writer = tokio::spawn(async move {
        while let Some(out) = out_rx.recv().await {
            match out {
                Outgoing::Text(t) => {
                    if sink.send(Message::Text(t.into())).await.is_err() {
                        return;
                    }
                }
                Outgoing::Close => break,
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        if tx.send(Command::Frame { conn, text }).await.is_err() {
            break;
        }
    }
    let _ = tx.send(Command::Disconnect { conn }).await;
    let _ = writer.await;
}

struct Client {
    id: u64,
    out: mpsc::UnboundedSender<Outgoing>,
    last_seq: Option<u64>,
}

struct Actor {
    session: Session,
    config: GatewayConfig,
    session_id: String,
    seq: u64,
    speed: f64,
    paused: bool,
    client: Option<Client>,
    next_conn: u64,
    /// Set while a client that was attached is gone.
    dropped_at: Option<Instant>,
    failed: Option<SimError>,
}

impl Actor {
    fn new(session: Session, config: GatewayConfig) -> Self {
        let sc = session.scenario();
        let session_id = format!("{}-{}", sc.domain_name, sc.seed);
        Self {
            speed: config.speed,
            session,
            config,
            session_id,
            seq: 0,
            paused: false,
            client: None,
            next_conn: 1,
            dropped_at: None,
            failed: None,
        }
    }

    fn running(&self) -> bool {
        self.client.is_some() && !self.paused && !self.session.is_finished() && self.failed.is_none()
    }

    fn frame(&mut self, body: Body) -> String {
        self.seq += 1;
        WireMessage::new(self.session_id.clone(), self.seq, body).encode()
    }

    fn send(&mut self, body: Body) {
        if self.client.is_none() {
            return;
        }
        let text = self.frame(body);
        if let Some(c) = &self.client {
            let _ = c.out.send(Outgoing::Text(text));
        }
    }

    fn state_body(&self) -> Body {
        Body::State {
            t: self.session.now(),
            paused: self.paused,
            speed: self.speed,
            finished: self.session.is_finished(),
            state: self.session.truth().clone(),
        }
    }

    fn plan_body(&self) -> Body {
        let plan = self.session.plan();
        Body::Plan {
            t: self.session.now(),
            cursor: self.session.cursor(),
            steps: plan.steps.clone(),
            tree: plan.tree.clone(),
        }
    }

    async fn run(mut self, mut rx: mpsc::Receiver<Command>) -> Result<EventLog, SimError> {
        let mut tick = interval(self.config.tick);
        tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let mut heartbeat = interval(self.config.heartbeat);
        heartbeat.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let mut metrics = interval(self.config.metrics_every);
        metrics.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let mut last = Instant::now();
        loop {
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    Some(cmd) => self.command(cmd),
                    None => break,
                },
                _ = tick.tick() => {
                    let now = Instant::now();
                    let dt = now.duration_since(last).as_secs_f64();
                    last = now;
                    if self.running() {
                        let target = self.session.now() + dt * self.speed;
                        self.advance(target);
                    }
                    if self.dropped_at.is_some_and(|d| now.duration_since(d) >= self.config.resume_window) {
                        info!("client did not come back within {:?}; ending the session", self.config.resume_window);
                        break;
                    }
                }
                _ = heartbeat.tick() => {
                    let t = self.session.now();
                    self.send(Body::Heartbeat { t });
                }
                _ = metrics.tick() => {
                    if self.running() {
                        self.send_metrics();
                    }
                }
            }
        }
        if let Some(c) = self.client.take() {
            let _ = c.out.send(Outgoing::Close);
        }
        match self.failed {
            Some(e) => Err(e),
            None => Ok(self.session.log()),
        }
    }

    fn advance(&mut self, target: f64) {
        if let Err(e) = self.session.run_until(target) {
            warn!("session failed: {e}");
            self.send(Body::Error {
                message: format!("session failed: {e}"),
                seq: None,
            });
            self.failed = Some(e);
        }
        self.flush();
    }

    fn send_metrics(&mut self) {
        let log = self.session.log();
        if log.events.is_empty() {
            return;
        }
        match build_timeline_until(&log, self.session.now()).and_then(|tl| fluency(&tl)) {
            Ok(report) => {
                let t = self.session.now();
                self.send(Body::Metrics { t, report });
            }
            Err(e) => debug!("no metrics yet: {e}"),
        }
    }

    /// Streams new log events, then the state they produced.
    fn flush(&mut self) {
        let events = self.session.take_new_events();
        if events.is_empty() {
            return;
        }
        let mut finished = false;
        for e in &events {
            if let Some(body) = event_body(e) {
                let replan = matches!(body, Body::Replan { .. });
                finished |= matches!(body, Body::GoalReached { .. });
                self.send(body);
                if replan {
                    let plan = self.plan_body();
                    self.send(plan);
                }
            }
        }
        let state = self.state_body();
        self.send(state);
        if finished {
            self.send_metrics();
        }
    }

    fn command(&mut self, cmd: Command) {
        match cmd {
            Command::Connect { out, reply } => {
                if self.client.is_some() {
                    let refusal = self.frame(Body::Error {
                        message: "session already has a client".into(),
                        seq: None,
                    });
                    let _ = reply.send(Err(refusal));
                    return;
                }
                let id = self.next_conn;
                self.next_conn += 1;
                if reply.send(Ok(id)).is_err() {
                    return;
                }
                info!("client {id} attached");
                self.client = Some(Client {
                    id,
                    out,
                    last_seq: None,
                });
                self.dropped_at = None;
                let hello = Body::Hello {
                    domain: self.session.domain().name.clone(),
                    protocol_version: crate::wire::PROTOCOL_VERSION.into(),
                    entities: self.session.domain().entities.clone(),
                };
                self.send(hello);
                let state = self.state_body();
                self.send(state);
                let plan = self.plan_body();
                self.send(plan);
            }
            Command::Disconnect { conn } => {
                if self.client.as_ref().is_some_and(|c| c.id == conn) {
                    info!("client {conn} left; session paused");
                    self.client = None;
                    let now = Instant::now();
                    // A finished session has nothing to resume.
                    let over = self.session.is_finished() || self.failed.is_some();
                    self.dropped_at = Some(if over {
                        now.checked_sub(self.config.resume_window).unwrap_or(now)
                    } else {
                        now
                    });
                }
            }
            Command::Frame { conn, text } => {
                if self.client.as_ref().is_some_and(|c| c.id == conn) {
                    self.frame_in(&text);
                }
            }
        }
    }

    fn frame_in(&mut self, text: &str) {
        let msg = match WireMessage::decode(text) {
            Ok(m) => m,
            Err(e) => {
                self.send(Body::Error {
                    message: e.to_string(),
                    seq: None,
                });
                return;
            }
        };
        let seq = msg.seq;
        if !msg.body.from_client() {
            self.send(Body::Error {
                message: format!("`{}` is not a client message", msg.body.type_name()),
                seq: Some(seq),
            });
            return;
        }
        let last = self.client.as_ref().and_then(|c| c.last_seq);
        if last.is_some_and(|l| seq <= l) {
            self.send(Body::Error {
                message: format!("seq {seq} does not increase (last {})", last.unwrap_or(0)),
                seq: Some(seq),
            });
            return;
        }
        if let Some(c) = self.client.as_mut() {
            c.last_seq = Some(seq);
        }
        let t = self.session.now();
        match msg.body {
            Body::Pause {} => {
                self.paused = true;
                self.send(Body::Ack { seq, t });
                let state = self.state_body();
                self.send(state);
            }
            Body::Resume {} => {
                self.paused = false;
                self.send(Body::Ack { seq, t });
                let state = self.state_body();
                self.send(state);
            }
            Body::Speed { scale } => {
                if scale.is_finite() && scale > 0.0 {
                    self.speed = scale;
                    self.send(Body::Ack { seq, t });
                    let state = self.state_body();
                    self.send(state);
                } else {
                    self.send(Body::Reject {
                        seq,
                        violation: format!("speed must be a positive number (got {scale})"),
                        template: None,
                        families: vec![],
                    });
                }
            }
            body => {
                let ev = body.human_event().expect("remaining client types are operator events");
                match self.session.inject_human_event(ev) {
                    Ok(ack) => {
                        self.send(Body::Ack { seq, t: ack.t });
                        self.flush();
                    }
                    Err(rej) => self.send(Body::Reject {
                        seq,
                        violation: rej.violation(),
                        template: rej.template,
                        families: rej.families,
                    }),
                }
            }
        }
    }
}

/// Wire form of a log event.
pub fn event_body(e: &SimEvent) -> Option<Body> {
    let t = e.t;
    Some(match e.kind {
        EventKind::ActionStart => {
            let p = e.action_start()?;
            Body::ActionStart {
                t,
                agent: p.action.agent.clone(),
                step: p.step,
                action: p.action,
            }
        }
        EventKind::ActionEnd => {
            let p = e.action_end()?;
            Body::ActionEnd {
                t,
                agent: e.agent.clone()?,
                step: p.step,
                template: p.template,
                timed_out: p.timed_out,
            }
        }
        EventKind::PerceiveResult => Body::PerceiveResult {
            t,
            agent: e.agent.clone()?,
            result: e.perceive_result()?,
        },
        EventKind::WaitSatisfied => Body::WaitSatisfied {
            t,
            agent: e.agent.clone()?,
            condition: serde_json::from_value(e.payload.get("condition")?.clone()).ok()?,
        },
        EventKind::HumanEvent => Body::HumanEvent {
            t,
            agent: e.agent.clone(),
            event: e.payload.clone(),
        },
        EventKind::Replan => {
            let p = e.replan()?;
            Body::Replan {
                t,
                reason: p.reason,
                level: p.level,
                steps: p.steps,
            }
        }
        EventKind::GoalReached => Body::GoalReached { t },
    })
}
