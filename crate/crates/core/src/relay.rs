//! Live hybrid Wizard-of-Oz relay.
//!
//! Each live session runs one actor task that owns the event log and
//! serializes every event: the user client streams utterances and frame
//! notices, the wizard triggers classification/generation and decides on
//! messages, approved messages are delivered to the user. Every
//! server-to-client frame is a logged event with a per-session `seq`.
//!
//! Delivery is at-least-once: a `deliver` stays pending until the user client
//! acknowledges it with `{"kind":"deliver","body":{"message_id":..,"ack":true}}`
//! and is re-sent on reconnect. Clients deduplicate by message id.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

use crate::chain::ChainError;
use crate::context::{assemble, Session};
use crate::engine::{Engine, GenerateError, GenerateParams};
use crate::library::{read_manifest, write_manifest, BRIEF_FILE, FRAMES_DIR, TRANSCRIPT_FILE};
use crate::media::{parse_frame_name, FrameIndex};
use crate::session::{
    is_valid_session_id, validate_session, Decision, FrameRef, MessageType, Origin,
    SessionManifest, Speaker, TaskPhase, Timecode, Utterance,
};
use crate::store::{write_atomic, StoreError};
use crate::transcript::{normalize_text, serialize_srt};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const UNNOTICED_FRAMES_DIR: &str = "frames_unnoticed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Wizard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Hello,
    Utterance,
    FrameNotice,
    ClassifyRequest,
    GenerateRequest,
    ChainResult,
    Decision,
    Deliver,
    Error,
}

/// One logged event, exactly as sent on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub t: Timecode,
    pub kind: EventKind,
    #[serde(default)]
    pub body: Value,
}

/// A client frame. `seq` and `at` are ignored when present.
#[derive(Debug, Clone, Deserialize)]
pub struct ClientFrame {
    #[serde(default)]
    pub t: Option<Timecode>,
    pub kind: EventKind,
    #[serde(default)]
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("unknown live session `{0}`")]
    UnknownSession(String),
    #[error("live session `{0}` is closed")]
    Closed(String),
    #[error("relay actor stopped")]
    Stopped,
    #[error("cannot create live session: {0}")]
    Create(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayConfig {
    /// How far an utterance may start before the latest utterance start.
    pub skew: Timecode,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            skew: Timecode(2000),
        }
    }
}

#[derive(Debug)]
pub enum Outbound {
    Frame(String),
    Close,
}

pub struct Admitted {
    pub conn_id: u64,
    pub resume_token: String,
}

enum Command {
    Connect {
        role: Role,
        resume: Option<String>,
        tx: mpsc::UnboundedSender<Outbound>,
        reply: oneshot::Sender<Result<Admitted, String>>,
    },
    Inbound {
        conn_id: u64,
        role: Role,
        text: String,
    },
    Disconnect {
        conn_id: u64,
        role: Role,
    },
    ChainDone {
        request_seq: u64,
        t: Timecode,
        outcome: Result<Value, (String, String, Option<String>)>,
    },
    Close {
        reply: oneshot::Sender<SessionManifest>,
    },
    Events {
        reply: oneshot::Sender<Vec<RelayEvent>>,
    },
    HasFrame {
        reply: oneshot::Sender<bool>,
    },
}

/// Cheap handle to a live session actor.
#[derive(Clone)]
pub struct LiveHandle {
    pub session_id: String,
    tx: mpsc::UnboundedSender<Command>,
}

impl LiveHandle {
    pub async fn connect(
        &self,
        role: Role,
        resume: Option<String>,
        tx: mpsc::UnboundedSender<Outbound>,
    ) -> Result<Result<Admitted, String>, RelayError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Connect {
                role,
                resume,
                tx,
                reply,
            })
            .map_err(|_| RelayError::Stopped)?;
        rx.await.map_err(|_| RelayError::Stopped)
    }

    pub fn inbound(&self, conn_id: u64, role: Role, text: String) {
        let _ = self.tx.send(Command::Inbound { conn_id, role, text });
    }

    pub fn disconnect(&self, conn_id: u64, role: Role) {
        let _ = self.tx.send(Command::Disconnect { conn_id, role });
    }

    pub async fn close(&self) -> Result<SessionManifest, RelayError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Close { reply })
            .map_err(|_| RelayError::Stopped)?;
        rx.await.map_err(|_| RelayError::Stopped)
    }

    pub async fn events(&self) -> Result<Vec<RelayEvent>, RelayError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Events { reply })
            .map_err(|_| RelayError::Stopped)?;
        rx.await.map_err(|_| RelayError::Stopped)
    }

    /// Whether the session still accepts frame uploads.
    pub async fn is_open(&self) -> bool {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(Command::HasFrame { reply }).is_err() {
            return false;
        }
        rx.await.unwrap_or(false)
    }
}

/// Registry of live sessions.
pub struct Relay {
    engine: Engine,
    config: RelayConfig,
    sessions: Mutex<HashMap<String, LiveHandle>>,
}

impl Relay {
    pub fn new(engine: Engine, config: RelayConfig) -> Arc<Self> {
        Arc::new(Relay {
            engine,
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn handle(&self, session_id: &str) -> Option<LiveHandle> {
        self.sessions.lock().unwrap().get(session_id).cloned()
    }

    /// Creates a `live-<unix millis>` session directory and starts its actor.
    pub fn create_live(
        &self,
        title: Option<String>,
        brief: Option<String>,
    ) -> Result<SessionManifest, RelayError> {
        let store = &self.engine.store;
        let now = Utc::now();
        let mut stamp = now.timestamp_millis().max(0) as u64;
        let (id, dir) = loop {
            let id = format!("live-{stamp}");
            let dir = store.session_dir(&id);
            if !dir.exists() && !self.sessions.lock().unwrap().contains_key(&id) {
                break (id, dir);
            }
            stamp += 1;
        };
        debug_assert!(is_valid_session_id(&id));
        let err = |e: std::io::Error| RelayError::Create(e.to_string());
        std::fs::create_dir_all(dir.join(FRAMES_DIR)).map_err(err)?;
        std::fs::write(dir.join(TRANSCRIPT_FILE), b"").map_err(err)?;
        let brief_uri = match brief.as_deref().map(str::trim).filter(|b| !b.is_empty()) {
            Some(text) => {
                std::fs::write(dir.join(BRIEF_FILE), text).map_err(err)?;
                Some(BRIEF_FILE.to_string())
            }
            None => None,
        };
        let manifest = SessionManifest {
            id: id.clone(),
            title: title.unwrap_or_else(|| format!("Live session {}", now.format("%Y-%m-%d %H:%M"))),
            duration: Timecode::ZERO,
            video_uri: None,
            transcript_uri: TRANSCRIPT_FILE.to_string(),
            frames_dir: FRAMES_DIR.to_string(),
            brief_uri,
            origin: Origin::LiveRecorded,
            created_at: now,
        };
        write_manifest(&dir, &manifest).map_err(|e| RelayError::Create(e.to_string()))?;
        store
            .register_session(&id)
            .map_err(|e| RelayError::Create(e.to_string()))?;
        let events = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(EVENTS_FILE))
            .map_err(err)?;

        let (tx, rx) = mpsc::unbounded_channel();
        let handle = LiveHandle {
            session_id: id.clone(),
            tx: tx.clone(),
        };
        let actor = Actor {
            engine: self.engine.clone(),
            config: self.config,
            self_tx: tx,
            dir,
            manifest: manifest.clone(),
            brief: brief.map(|b| b.trim().to_string()).filter(|b| !b.is_empty()),
            log: Vec::new(),
            events_file: Some(events),
            utterances: Vec::new(),
            frames: FrameIndex::empty(id.clone()),
            last_utterance_start: None,
            latest_t: Timecode::ZERO,
            user: None,
            wizard: None,
            tokens: HashMap::new(),
            next_conn: 1,
            pending_deliveries: BTreeMap::new(),
            jobs: VecDeque::new(),
            job_running: false,
            close_waiters: Vec::new(),
            closing: false,
            closed: None,
        };
        tokio::spawn(actor.run(rx));
        self.sessions.lock().unwrap().insert(id, handle);
        Ok(manifest)
    }

    /// Finalizes a live session. Closing twice returns the same manifest; a
    /// live-recorded session from an earlier server run returns its manifest.
    pub async fn close_live(&self, session_id: &str) -> Result<SessionManifest, RelayError> {
        if let Some(h) = self.handle(session_id) {
            return h.close().await;
        }
        let dir = self.engine.store.session_dir(session_id);
        match read_manifest(&dir) {
            Ok(m) if m.origin == Origin::LiveRecorded => Ok(m),
            _ => Err(RelayError::UnknownSession(session_id.to_string())),
        }
    }
}

struct Conn {
    id: u64,
    tx: mpsc::UnboundedSender<Outbound>,
}

enum Job {
    Classify { request_seq: u64, t: Timecode },
    Generate { request_seq: u64, params: GenerateParams },
}

struct Actor {
    engine: Engine,
    config: RelayConfig,
    self_tx: mpsc::UnboundedSender<Command>,
    dir: PathBuf,
    manifest: SessionManifest,
    brief: Option<String>,
    log: Vec<RelayEvent>,
    events_file: Option<File>,
    utterances: Vec<Utterance>,
    frames: FrameIndex,
    last_utterance_start: Option<Timecode>,
    latest_t: Timecode,
    user: Option<Conn>,
    wizard: Option<Conn>,
    tokens: HashMap<Role, String>,
    next_conn: u64,
    /// Approved, not yet acknowledged: message id → deliver seq.
    pending_deliveries: BTreeMap<String, u64>,
    jobs: VecDeque<Job>,
    job_running: bool,
    close_waiters: Vec<oneshot::Sender<SessionManifest>>,
    closing: bool,
    closed: Option<SessionManifest>,
}

#[derive(Deserialize)]
struct UtteranceBody {
    text: String,
    #[serde(default)]
    end: Option<Timecode>,
    #[serde(default)]
    speaker: Option<Speaker>,
}

#[derive(Deserialize)]
struct FrameBody {
    name: String,
}

#[derive(Deserialize)]
struct GenerateBody {
    msg_type: MessageType,
    #[serde(default)]
    phase_override: Option<TaskPhase>,
    #[serde(default)]
    system_prompt_override: Option<String>,
}

#[derive(Deserialize)]
struct DecisionBody {
    message_id: String,
    decision: String,
    #[serde(default)]
    reason: Option<String>,
}

#[derive(Deserialize)]
struct AckBody {
    message_id: String,
    #[serde(default)]
    ack: bool,
}

fn error_body(code: &str, message: impl Into<String>) -> Value {
    json!({"code": code, "message": message.into()})
}

impl Actor {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Command>) {
        while let Some(cmd) = rx.recv().await {
            match cmd {
                Command::Connect {
                    role,
                    resume,
                    tx,
                    reply,
                } => {
                    let r = self.connect(role, resume, tx);
                    let _ = reply.send(r);
                }
                Command::Inbound { conn_id, role, text } => self.inbound(conn_id, role, &text),
                Command::Disconnect { conn_id, role } => {
                    let slot = self.slot(role);
                    if slot.as_ref().is_some_and(|c| c.id == conn_id) {
                        *slot = None;
                    }
                }
                Command::ChainDone {
                    request_seq,
                    t,
                    outcome,
                } => self.chain_done(request_seq, t, outcome),
                Command::Close { reply } => {
                    if let Some(m) = &self.closed {
                        let _ = reply.send(m.clone());
                    } else {
                        self.closing = true;
                        self.close_waiters.push(reply);
                        self.maybe_finalize();
                    }
                }
                Command::Events { reply } => {
                    let _ = reply.send(self.log.clone());
                }
                Command::HasFrame { reply } => {
                    let _ = reply.send(self.closed.is_none() && !self.closing);
                }
            }
        }
    }

    fn slot(&mut self, role: Role) -> &mut Option<Conn> {
        match role {
            Role::User => &mut self.user,
            Role::Wizard => &mut self.wizard,
        }
    }

    /// Appends an event to the log and returns it.
    fn log_event(&mut self, t: Timecode, kind: EventKind, body: Value) -> RelayEvent {
        let ev = RelayEvent {
            seq: self.log.len() as u64 + 1,
            at: Utc::now(),
            t,
            kind,
            body,
        };
        if let Some(f) = self.events_file.as_mut() {
            let mut line = serde_json::to_vec(&ev).expect("event serializes");
            line.push(b'\n');
            if let Err(e) = f.write_all(&line) {
                tracing::error!(session = %self.manifest.id, "events.jsonl write failed: {e}");
            }
        }
        self.log.push(ev.clone());
        ev
    }

    fn send(conn: &Option<Conn>, ev: &RelayEvent) {
        if let Some(c) = conn {
            let _ = c
                .tx
                .send(Outbound::Frame(serde_json::to_string(ev).expect("event serializes")));
        }
    }

    /// Logs and sends to the wizard, and to the user when `to_user`.
    fn emit(&mut self, t: Timecode, kind: EventKind, body: Value, to_user: bool) -> RelayEvent {
        let ev = self.log_event(t, kind, body);
        Self::send(&self.wizard, &ev);
        if to_user {
            Self::send(&self.user, &ev);
        }
        ev
    }

    fn error_to(&mut self, role: Role, t: Timecode, code: &str, message: impl Into<String>) {
        self.emit(t, EventKind::Error, error_body(code, message), role == Role::User);
    }

    fn connect(
        &mut self,
        role: Role,
        resume: Option<String>,
        tx: mpsc::UnboundedSender<Outbound>,
    ) -> Result<Admitted, String> {
        let t = self.latest_t;
        if self.closed.is_some() || self.closing {
            let ev = self.log_event(t, EventKind::Error, error_body("SessionClosed", "live session is closed"));
            return Err(serde_json::to_string(&ev).expect("event serializes"));
        }
        let token_ok = resume.is_some() && resume.as_ref() == self.tokens.get(&role);
        if self.slot(role).is_some() && !token_ok {
            let ev = self.emit(
                t,
                EventKind::Error,
                error_body("RoleOccupied", format!("a {role:?} client is already connected").to_lowercase()),
                false,
            );
            return Err(serde_json::to_string(&ev).expect("event serializes"));
        }
        if let Some(old) = self.slot(role).take() {
            let _ = old.tx.send(Outbound::Close);
        }
        let token = if token_ok {
            resume.expect("checked")
        } else {
            uuid::Uuid::new_v4().simple().to_string()
        };
        self.tokens.insert(role, token.clone());
        let conn_id = self.next_conn;
        self.next_conn += 1;
        let conn = Conn { id: conn_id, tx };

        // Backlog first so the client still sees ascending seq.
        match role {
            Role::Wizard => {
                for ev in &self.log {
                    Self::send(&Some(Conn { id: 0, tx: conn.tx.clone() }), ev);
                }
            }
            Role::User => {
                let mut seqs: Vec<u64> = self.pending_deliveries.values().copied().collect();
                seqs.sort_unstable();
                for seq in seqs {
                    let ev = &self.log[seq as usize - 1];
                    Self::send(&Some(Conn { id: 0, tx: conn.tx.clone() }), ev);
                }
            }
        }
        *self.slot(role) = Some(conn);

        let hello = self.log_event(t, EventKind::Hello, json!({"role": role}));
        let mut own = hello.clone();
        own.body = json!({"role": role, "resume_token": token});
        match role {
            Role::Wizard => Self::send(&self.wizard, &own),
            Role::User => {
                Self::send(&self.user, &own);
                Self::send(&self.wizard, &hello);
            }
        }
        Ok(Admitted {
            conn_id,
            resume_token: token,
        })
    }

    fn inbound(&mut self, conn_id: u64, role: Role, text: &str) {
        let current = match role {
            Role::User => self.user.as_ref(),
            Role::Wizard => self.wizard.as_ref(),
        };
        if current.map(|c| c.id) != Some(conn_id) {
            return;
        }
        let frame: ClientFrame = match serde_json::from_str(text) {
            Ok(f) => f,
            Err(e) => {
                let t = self.latest_t;
                return self.error_to(role, t, "BadFrame", e.to_string());
            }
        };
        let t = frame.t.unwrap_or(self.latest_t);
        if self.closing || self.closed.is_some() {
            return self.error_to(role, t, "SessionClosed", "live session is closing");
        }
        match (role, frame.kind) {
            (Role::User, EventKind::Utterance) => self.on_utterance(t, frame.body),
            (Role::User, EventKind::FrameNotice) => self.on_frame(t, frame.body),
            (Role::User, EventKind::Deliver) => {
                if let Ok(ack) = serde_json::from_value::<AckBody>(frame.body) {
                    if ack.ack {
                        self.pending_deliveries.remove(&ack.message_id);
                    }
                }
            }
            (Role::Wizard, EventKind::ClassifyRequest) => {
                let ev = self.emit(t, EventKind::ClassifyRequest, frame.body, false);
                self.jobs.push_back(Job::Classify {
                    request_seq: ev.seq,
                    t,
                });
                self.pump();
            }
            (Role::Wizard, EventKind::GenerateRequest) => {
                match serde_json::from_value::<GenerateBody>(frame.body.clone()) {
                    Ok(b) => {
                        let ev = self.emit(t, EventKind::GenerateRequest, frame.body, false);
                        self.jobs.push_back(Job::Generate {
                            request_seq: ev.seq,
                            params: GenerateParams {
                                t,
                                msg_type: b.msg_type,
                                phase_override: b.phase_override,
                                system_prompt_override: b.system_prompt_override,
                            },
                        });
                        self.pump();
                    }
                    Err(e) => self.error_to(role, t, "BadRequest", e.to_string()),
                }
            }
            (Role::Wizard, EventKind::Decision) => self.on_decision(t, frame.body),
            (role, kind) => {
                self.error_to(role, t, "UnsupportedKind", format!("{kind:?} not accepted from {role:?}"))
            }
        }
    }

    fn on_utterance(&mut self, t: Timecode, body: Value) {
        let b: UtteranceBody = match serde_json::from_value(body) {
            Ok(b) => b,
            Err(e) => return self.error_to(Role::User, t, "BadRequest", e.to_string()),
        };
        let text = normalize_text(&b.text);
        if text.is_empty() {
            return self.error_to(Role::User, t, "EmptyUtterance", "utterance text is empty");
        }
        if let Some(last) = self.last_utterance_start {
            if t.0 + self.config.skew.0 < last.0 {
                return self.error_to(
                    Role::User,
                    t,
                    "BadTimecode",
                    format!("utterance at {} ms regresses past {} ms", t.0, last.0),
                );
            }
        }
        let end = b.end.unwrap_or(t).max(t);
        let speaker = b.speaker.unwrap_or_default();
        let pos = self.utterances.partition_point(|u| u.start <= t);
        self.utterances.insert(
            pos,
            Utterance {
                index: pos,
                start: t,
                end,
                speaker,
                text: text.clone(),
            },
        );
        for (i, u) in self.utterances.iter_mut().enumerate().skip(pos) {
            u.index = i;
        }
        self.last_utterance_start = Some(self.last_utterance_start.map_or(t, |l| l.max(t)));
        self.latest_t = self.latest_t.max(end);
        self.emit(
            t,
            EventKind::Utterance,
            json!({"text": text, "end": end, "speaker": speaker}),
            true,
        );
    }

    fn on_frame(&mut self, t: Timecode, body: Value) {
        let b: FrameBody = match serde_json::from_value(body) {
            Ok(b) => b,
            Err(e) => return self.error_to(Role::User, t, "BadRequest", e.to_string()),
        };
        if parse_frame_name(&b.name) != Some(t) {
            return self.error_to(
                Role::User,
                t,
                "BadFrameName",
                format!("`{}` is not frame_{}.jpg|png", b.name, t.0),
            );
        }
        let path = self.dir.join(FRAMES_DIR).join(&b.name);
        let len = match std::fs::metadata(&path) {
            Ok(m) if m.is_file() => m.len(),
            _ => {
                return self.error_to(
                    Role::User,
                    t,
                    "FrameNotUploaded",
                    format!("`{}` has not been uploaded", b.name),
                )
            }
        };
        let frame = FrameRef {
            t,
            uri: format!("{FRAMES_DIR}/{}", b.name),
            byte_len: Some(len),
        };
        if self.frames.insert(frame).is_err() {
            return self.error_to(Role::User, t, "DuplicateTimestamp", format!("frame at {} ms exists", t.0));
        }
        self.latest_t = self.latest_t.max(t);
        self.emit(t, EventKind::FrameNotice, json!({"name": b.name}), true);
    }

    fn on_decision(&mut self, t: Timecode, body: Value) {
        let b: DecisionBody = match serde_json::from_value(body) {
            Ok(b) => b,
            Err(e) => return self.error_to(Role::Wizard, t, "BadRequest", e.to_string()),
        };
        let decision = match b.decision.as_str() {
            "approved" => Decision::Approved,
            "denied" => {
                let reason = b.reason.unwrap_or_default();
                if reason.trim().is_empty() {
                    return self.error_to(Role::Wizard, t, "DenyWithoutReason", "a denial needs a reason");
                }
                Decision::Denied { reason }
            }
            other => {
                return self.error_to(Role::Wizard, t, "BadRequest", format!("unknown decision `{other}`"))
            }
        };
        let store = self.engine.store.clone();
        if store.session_of(&b.message_id).as_deref() != Some(self.manifest.id.as_str()) {
            return self.error_to(Role::Wizard, t, "UnknownMessage", format!("no message `{}`", b.message_id));
        }
        let msg = match store.set_decision(&b.message_id, decision.clone()) {
            Ok(m) => m,
            Err(StoreError::AlreadyDecided { current, .. }) => {
                return self.error_to(Role::Wizard, t, "AlreadyDecided", format!("message is already {current}"))
            }
            Err(StoreError::EmptyDenialReason) => {
                return self.error_to(Role::Wizard, t, "DenyWithoutReason", "a denial needs a reason")
            }
            Err(e) => return self.error_to(Role::Wizard, t, "StoreError", e.to_string()),
        };
        let mut body = json!({"message_id": msg.id, "decision": decision.label()});
        if let Some(r) = decision.denial_reason() {
            body["reason"] = json!(r);
        }
        self.emit(t, EventKind::Decision, body, false);
        if decision == Decision::Approved {
            let ev = self.emit(
                t,
                EventKind::Deliver,
                json!({"message_id": msg.id, "text": msg.text, "msg_type": msg.msg_type, "message_t": msg.t}),
                true,
            );
            if let Err(e) = store.mark_delivered(&msg.id, ev.seq) {
                tracing::error!(message = %msg.id, "recording delivery failed: {e}");
            }
            self.pending_deliveries.insert(msg.id, ev.seq);
        }
    }

    fn live_session(&self, cursor: usize) -> Result<Session, StoreError> {
        let messages = self.engine.store.context_messages(&self.manifest.id, cursor)?;
        Ok(Session {
            manifest: self.manifest.clone(),
            utterances: self.utterances.clone(),
            frames: self.frames.clone(),
            brief: self.brief.clone(),
            messages,
            open_ended: true,
        })
    }

    /// Starts the next queued chain job if none is running.
    fn pump(&mut self) {
        if self.job_running {
            return;
        }
        let Some(job) = self.jobs.pop_front() else {
            return;
        };
        let session_id = self.manifest.id.clone();
        let cursor = match self.engine.store.cursor(&session_id) {
            Ok(c) => c,
            Err(e) => return self.error_to(Role::Wizard, self.latest_t, "StoreError", e.to_string()),
        };
        let session = match self.live_session(cursor) {
            Ok(s) => s,
            Err(e) => return self.error_to(Role::Wizard, self.latest_t, "StoreError", e.to_string()),
        };
        self.job_running = true;
        let engine = self.engine.clone();
        let dir = self.dir.clone();
        let tx = self.self_tx.clone();
        tokio::spawn(async move {
            let (request_seq, t, outcome) = match job {
                Job::Classify { request_seq, t } => {
                    (request_seq, t, run_classify(&engine, &session, &dir, t).await)
                }
                Job::Generate { request_seq, params } => {
                    let t = params.t;
                    let outcome = match engine.generate_on(&session, &dir, cursor, &params, false).await {
                        Ok(g) => Ok(json!({
                            "stage": "generate",
                            "request_seq": request_seq,
                            "message": g.message,
                            "chain": g.chain,
                            "payload_digest": g.payload_digest,
                        })),
                        Err(e) => Err(generate_error_parts(&e)),
                    };
                    (request_seq, t, outcome)
                }
            };
            let _ = tx.send(Command::ChainDone {
                request_seq,
                t,
                outcome,
            });
        });
    }

    fn chain_done(
        &mut self,
        request_seq: u64,
        t: Timecode,
        outcome: Result<Value, (String, String, Option<String>)>,
    ) {
        self.job_running = false;
        match outcome {
            Ok(body) => {
                self.emit(t, EventKind::ChainResult, body, false);
            }
            Err((code, message, raw)) => {
                let mut body = error_body(&code, message);
                body["request_seq"] = json!(request_seq);
                if let Some(raw) = raw {
                    body["raw"] = json!(raw);
                }
                self.emit(t, EventKind::Error, body, false);
            }
        }
        self.pump();
        self.maybe_finalize();
    }

    fn maybe_finalize(&mut self) {
        if !self.closing || self.job_running || !self.jobs.is_empty() || self.closed.is_some() {
            return;
        }
        let manifest = match self.finalize() {
            Ok(m) => m,
            Err(e) => {
                tracing::error!(session = %self.manifest.id, "finalizing live session failed: {e}");
                self.manifest.clone()
            }
        };
        for c in [self.user.take(), self.wizard.take()].into_iter().flatten() {
            let _ = c.tx.send(Outbound::Close);
        }
        self.events_file = None;
        self.closed = Some(manifest.clone());
        for w in self.close_waiters.drain(..) {
            let _ = w.send(manifest.clone());
        }
    }

    /// Writes the transcript, prunes frames that were never announced and
    /// rewrites the manifest with the final duration.
    fn finalize(&mut self) -> Result<SessionManifest, Box<dyn std::error::Error + Send + Sync>> {
        for (i, u) in self.utterances.iter_mut().enumerate() {
            u.index = i;
        }
        let srt = serialize_srt(&self.utterances)?;
        write_atomic(&self.dir.join(TRANSCRIPT_FILE), srt.as_bytes())?;

        let frames_dir = self.dir.join(FRAMES_DIR);
        if let Ok(rd) = std::fs::read_dir(&frames_dir) {
            for entry in rd.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                let noticed = self
                    .frames
                    .frames()
                    .iter()
                    .any(|f| f.uri == format!("{FRAMES_DIR}/{name}"));
                if !noticed {
                    let aside = self.dir.join(UNNOTICED_FRAMES_DIR);
                    std::fs::create_dir_all(&aside)?;
                    std::fs::rename(entry.path(), aside.join(&name))?;
                }
            }
        }

        let messages = self.engine.store.messages(&self.manifest.id)?;
        let duration = self
            .utterances
            .iter()
            .map(|u| u.end)
            .chain(self.frames.frames().iter().map(|f| f.t))
            .chain(messages.iter().map(|m| m.t))
            .chain(std::iter::once(self.latest_t))
            .max()
            .unwrap_or_default();
        let manifest = SessionManifest {
            duration,
            origin: Origin::LiveRecorded,
            ..self.manifest.clone()
        };
        write_manifest(&self.dir, &manifest)?;
        let violations = validate_session(&manifest, &self.utterances, self.frames.frames());
        if !violations.is_empty() {
            tracing::warn!(session = %manifest.id, ?violations, "closed live session has violations");
        }
        self.manifest = manifest.clone();
        Ok(manifest)
    }
}

async fn run_classify(
    engine: &Engine,
    session: &Session,
    dir: &std::path::Path,
    t: Timecode,
) -> Result<Value, (String, String, Option<String>)> {
    let templates = engine
        .templates
        .load()
        .map_err(|e| ("TemplateError".to_string(), e.to_string(), None))?;
    let payload = assemble(session, t, None, None, &templates.classify.system_segment, &engine.budget)
        .map_err(|e| ("ContextError".to_string(), e.to_string(), None))?;
    match engine
        .chain
        .classify_phase(&payload, &templates.classify, Some(dir))
        .await
    {
        Ok(c) => Ok(json!({
            "stage": "classify",
            "classified_phase": c.phase,
            "phase_confidence_raw": c.line,
            "raw": c.raw,
            "classify_version": templates.classify.version,
        })),
        Err(e) => Err(chain_error_parts(&e)),
    }
}

fn chain_error_parts(e: &ChainError) -> (String, String, Option<String>) {
    match e {
        ChainError::UnparseablePhase { raw } => ("UnparseablePhase".into(), e.to_string(), Some(raw.clone())),
        ChainError::EmptyGeneration => ("EmptyGeneration".into(), e.to_string(), None),
        ChainError::Gateway(g) => (crate::api::gateway_code(g).into(), e.to_string(), None),
        _ => ("ChainError".into(), e.to_string(), None),
    }
}

fn generate_error_parts(e: &GenerateError) -> (String, String, Option<String>) {
    match e {
        GenerateError::Chain(c) => chain_error_parts(c),
        _ => ("GenerateError".into(), e.to_string(), None),
    }
}
