//! File-based evaluation store.
//!
//! Per session directory:
//!
//! - `messages.jsonl`: append-only. Generated messages plus decision and
//!   delivery amendments keyed by message id; the latest amendment wins.
//! - `ratings.json`: one rating per (message, rater), rewritten atomically.
//! - `annotations.json`: coding labels, rewritten atomically.
//!
//! A torn trailing line in `messages.jsonl` is dropped on load and cut off
//! before the next append. Mutations for one session are serialized by that
//! session's write lock; reads use the materialized in-memory state.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{Annotation, Decision, Rating, SupportMessage};

pub const MESSAGES_FILE: &str = "messages.jsonl";
pub const RATINGS_FILE: &str = "ratings.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SESSION_FILE: &str = "session.json";

pub const CSV_HEADER: [&str; 12] = [
    "session_id",
    "message_id",
    "t_millis",
    "type",
    "phase",
    "phase_source",
    "decision",
    "denial_reason",
    "score",
    "comment",
    "label",
    "text",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown message `{0}`")]
    UnknownMessage(String),
    #[error("a denial needs a non-empty reason")]
    EmptyDenialReason,
    #[error("message `{id}` is already {current}")]
    AlreadyDecided { id: String, current: &'static str },
    #[error("score {0} is outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("annotation label is empty")]
    EmptyLabel,
    #[error("message `{0}` is not approved")]
    NotApproved(String),
    #[error("message id `{0}` already exists")]
    DuplicateMessage(String),
    #[error("invalid message: {0}")]
    InvalidMessage(&'static str),
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Extra data kept with a recorded message.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub payload_digest: String,
    #[serde(default)]
    pub batch: bool,
    /// Number of log records that existed when the context was assembled.
    #[serde(default)]
    pub context_cursor: Option<usize>,
    #[serde(default)]
    pub system_prompt_override: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Message {
        message: SupportMessage,
        #[serde(flatten)]
        meta: RecordMeta,
    },
    Decision {
        message_id: String,
        decision: Decision,
        at: DateTime<Utc>,
    },
    Delivery {
        message_id: String,
        seq: u64,
        at: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMessage {
    pub message: SupportMessage,
    pub meta: RecordMeta,
    /// Position of the message record in the log.
    pub record_no: usize,
}

/// Replays log records; amendments for unknown ids are skipped.
pub fn materialize(records: &[Record]) -> Vec<StoredMessage> {
    let mut state = SessionState::default();
    for rec in records {
        state.apply(rec.clone());
    }
    state.messages
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingRow {
    pub message: SupportMessage,
    pub batch: bool,
    pub ratings: Vec<Rating>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Default)]
struct SessionState {
    records: Vec<Record>,
    messages: Vec<StoredMessage>,
    index: HashMap<String, usize>,
    ratings: Vec<Rating>,
    annotations: Vec<Annotation>,
    /// Byte length of the valid prefix of `messages.jsonl`.
    valid_len: u64,
    torn: bool,
    writer: Option<File>,
}

impl SessionState {
    fn apply(&mut self, rec: Record) {
        let no = self.records.len();
        match &rec {
            Record::Message { message, meta } => {
                self.index.insert(message.id.clone(), self.messages.len());
                self.messages.push(StoredMessage {
                    message: message.clone(),
                    meta: meta.clone(),
                    record_no: no,
                });
            }
            Record::Decision {
                message_id,
                decision,
                ..
            } => {
                if let Some(&i) = self.index.get(message_id) {
                    self.messages[i].message.decision = decision.clone();
                }
            }
            Record::Delivery {
                message_id, seq, ..
            } => {
                if let Some(&i) = self.index.get(message_id) {
                    self.messages[i].message.delivered_seq = Some(*seq);
                }
            }
        }
        self.records.push(rec);
    }

    fn message(&self, id: &str) -> Option<&StoredMessage> {
        self.index.get(id).map(|&i| &self.messages[i])
    }
}

#[derive(Debug)]
struct SessionLog {
    dir: PathBuf,
    state: RwLock<SessionState>,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<SessionLog>>>,
    owners: RwLock<HashMap<String, String>>,
    warnings: RwLock<Vec<String>>,
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    #[cfg(unix)]
    {
        File::open(dir)?.sync_all()?;
    }
    #[cfg(not(unix))]
    let _ = dir;
    Ok(())
}

/// Writes `bytes` to `path` via a synced temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    sync_dir(dir)
}

fn read_json_list<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn load_state(dir: &Path, warnings: &mut Vec<String>) -> Result<SessionState> {
    let mut state = SessionState::default();
    let path = dir.join(MESSAGES_FILE);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let Some(nl) = bytes[offset..].iter().position(|b| *b == b'\n') else {
            warnings.push(format!(
                "{}: ignoring torn trailing line {line_no} ({} bytes)",
                path.display(),
                bytes.len() - offset
            ));
            state.torn = true;
            break;
        };
        let line = &bytes[offset..offset + nl];
        offset += nl + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            state.valid_len = offset as u64;
            continue;
        }
        let rec: Record = serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        state.apply(rec);
        state.valid_len = offset as u64;
    }
    state.ratings = read_json_list(&dir.join(RATINGS_FILE))?;
    state.annotations = read_json_list(&dir.join(ANNOTATIONS_FILE))?;
    Ok(state)
}

impl Store {
    /// Opens `root`, loading every subdirectory that has a `session.json`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let store = Store {
            root,
            sessions: RwLock::new(HashMap::new()),
            owners: RwLock::new(HashMap::new()),
            warnings: RwLock::new(Vec::new()),
        };
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&store.root)? {
            let entry = entry?;
            if entry.path().join(SESSION_FILE).is_file() {
                if let Some(id) = entry.file_name().to_str() {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        for id in ids {
            store.register_session(&id)?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.root.join(session_id)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.read().unwrap().clone()
    }

    /// Loads (or reloads) a session directory created after `open`.
    pub fn register_session(&self, session_id: &str) -> Result<()> {
        let dir = self.session_dir(session_id);
        if !dir.join(SESSION_FILE).is_file() {
            return Err(StoreError::UnknownSession(session_id.to_string()));
        }
        let mut warnings = Vec::new();
        let state = load_state(&dir, &mut warnings)?;
        {
            let mut owners = self.owners.write().unwrap();
            for m in &state.messages {
                owners.insert(m.message.id.clone(), session_id.to_string());
            }
        }
        for w in &warnings {
            tracing::warn!("{w}");
        }
        self.warnings.write().unwrap().extend(warnings);
        self.sessions.write().unwrap().insert(
            session_id.to_string(),
            Arc::new(SessionLog {
                dir,
                state: RwLock::new(state),
            }),
        );
        Ok(())
    }

    pub fn has_session(&self, session_id: &str) -> bool {
        self.sessions.read().unwrap().contains_key(session_id)
    }

    /// Like [`Store::has_session`], but first registers a session directory
    /// that appeared on disk after `open`.
    pub fn ensure_session(&self, session_id: &str) -> bool {
        if self.has_session(session_id) {
            return true;
        }
        crate::session::is_valid_session_id(session_id) && self.register_session(session_id).is_ok()
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn log(&self, session_id: &str) -> Result<Arc<SessionLog>> {
        self.sessions
            .read()
            .unwrap()
            .get(session_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))
    }

    fn owner(&self, message_id: &str) -> Result<Arc<SessionLog>> {
        let session = self
            .owners
            .read()
            .unwrap()
            .get(message_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownMessage(message_id.to_string()))?;
        self.log(&session)
    }

    pub fn session_of(&self, message_id: &str) -> Option<String> {
        self.owners.read().unwrap().get(message_id).cloned()
    }

    fn append(log: &SessionLog, state: &mut SessionState, rec: Record) -> Result<()> {
        let mut line = serde_json::to_vec(&rec).expect("record serializes");
        line.push(b'\n');
        if state.writer.is_none() {
            let path = log.dir.join(MESSAGES_FILE);
            let existed = path.exists();
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            if state.torn {
                file.set_len(state.valid_len)?;
                file.sync_all()?;
                state.torn = false;
            }
            if !existed {
                sync_dir(&log.dir)?;
            }
            state.writer = Some(file);
        }
        let file = state.writer.as_mut().expect("writer opened");
        if let Err(e) = file.write_all(&line).and_then(|_| file.sync_data()) {
            // Reopen (and trim any partial bytes) on the next append.
            state.writer = None;
            state.torn = true;
            return Err(e.into());
        }
        state.valid_len += line.len() as u64;
        state.apply(rec);
        Ok(())
    }

    /// Number of records in the session log; a cursor for [`Store::messages_as_of`].
    pub fn cursor(&self, session_id: &str) -> Result<usize> {
        Ok(self.log(session_id)?.state.read().unwrap().records.len())
    }

    /// Appends a message and syncs it to disk before returning its id. An
    /// empty `msg.id` gets a fresh one.
    pub fn record_message(&self, mut msg: SupportMessage, meta: RecordMeta) -> Result<String> {
        let log = self.log(&msg.session_id)?;
        msg.check().map_err(StoreError::InvalidMessage)?;
        if msg.id.is_empty() {
            msg.id = format!("m-{}", uuid::Uuid::new_v4().simple());
        }
        let id = msg.id.clone();
        let mut state = log.state.write().unwrap();
        if state.index.contains_key(&id) || self.owners.read().unwrap().contains_key(&id) {
            return Err(StoreError::DuplicateMessage(id));
        }
        let session = msg.session_id.clone();
        Self::append(&log, &mut state, Record::Message { message: msg, meta })?;
        self.owners.write().unwrap().insert(id.clone(), session);
        Ok(id)
    }

    /// Decides a pending message.
    pub fn set_decision(&self, message_id: &str, decision: Decision) -> Result<SupportMessage> {
        let log = self.owner(message_id)?;
        let mut state = log.state.write().unwrap();
        let current = state
            .message(message_id)
            .ok_or_else(|| StoreError::UnknownMessage(message_id.to_string()))?;
        match &decision {
            Decision::Pending => return Err(StoreError::InvalidMessage("decision must be approved or denied")),
            Decision::Denied { reason } if reason.trim().is_empty() => {
                return Err(StoreError::EmptyDenialReason)
            }
            _ => {}
        }
        if current.message.decision != Decision::Pending {
            return Err(StoreError::AlreadyDecided {
                id: message_id.to_string(),
                current: current.message.decision.label(),
            });
        }
        Self::append(
            &log,
            &mut state,
            Record::Decision {
                message_id: message_id.to_string(),
                decision,
                at: Utc::now(),
            },
        )?;
        Ok(state.message(message_id).expect("present").message.clone())
    }

    /// Records delivery of an approved message under relay sequence `seq`.
    pub fn mark_delivered(&self, message_id: &str, seq: u64) -> Result<SupportMessage> {
        let log = self.owner(message_id)?;
        let mut state = log.state.write().unwrap();
        let current = state
            .message(message_id)
            .ok_or_else(|| StoreError::UnknownMessage(message_id.to_string()))?;
        if current.message.decision != Decision::Approved {
            return Err(StoreError::NotApproved(message_id.to_string()));
        }
        Self::append(
            &log,
            &mut state,
            Record::Delivery {
                message_id: message_id.to_string(),
                seq,
                at: Utc::now(),
            },
        )?;
        Ok(state.message(message_id).expect("present").message.clone())
    }

    /// Upserts the rating of `rater` for a message.
    pub fn rate(
        &self,
        message_id: &str,
        score: i64,
        comment: Option<String>,
        rater: &str,
    ) -> Result<Rating> {
        if !(1..=5).contains(&score) {
            return Err(StoreError::ScoreOutOfRange(score));
        }
        let log = self.owner(message_id)?;
        let mut state = log.state.write().unwrap();
        let rating = Rating {
            message_id: message_id.to_string(),
            score: score as u8,
            comment: comment.filter(|c| !c.is_empty()),
            rater: rater.to_string(),
            created_at: Utc::now(),
        };
        let mut ratings = state.ratings.clone();
        match ratings
            .iter_mut()
            .find(|r| r.message_id == message_id && r.rater == rater)
        {
            Some(r) => *r = rating.clone(),
            None => ratings.push(rating.clone()),
        }
        let bytes = serde_json::to_vec_pretty(&ratings).expect("ratings serialize");
        write_atomic(&log.dir.join(RATINGS_FILE), &bytes)?;
        state.ratings = ratings;
        Ok(rating)
    }

    pub fn annotate(&self, message_id: &str, label: &str, note: Option<String>) -> Result<Annotation> {
        if label.trim().is_empty() {
            return Err(StoreError::EmptyLabel);
        }
        let log = self.owner(message_id)?;
        let mut state = log.state.write().unwrap();
        let annotation = Annotation {
            message_id: message_id.to_string(),
            label: label.trim().to_string(),
            note: note.filter(|n| !n.is_empty()),
            created_at: Utc::now(),
        };
        let mut annotations = state.annotations.clone();
        annotations.push(annotation.clone());
        let bytes = serde_json::to_vec_pretty(&annotations).expect("annotations serialize");
        write_atomic(&log.dir.join(ANNOTATIONS_FILE), &bytes)?;
        state.annotations = annotations;
        Ok(annotation)
    }

    pub fn message(&self, message_id: &str) -> Result<StoredMessage> {
        let log = self.owner(message_id)?;
        let state = log.state.read().unwrap();
        state
            .message(message_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownMessage(message_id.to_string()))
    }

    pub fn stored_messages(&self, session_id: &str) -> Result<Vec<StoredMessage>> {
        Ok(self.log(session_id)?.state.read().unwrap().messages.clone())
    }

    /// Messages in log order, current state.
    pub fn messages(&self, session_id: &str) -> Result<Vec<SupportMessage>> {
        Ok(self
            .stored_messages(session_id)?
            .into_iter()
            .map(|m| m.message)
            .collect())
    }

    /// Messages as they stood after the first `cursor` log records.
    pub fn messages_as_of(&self, session_id: &str, cursor: usize) -> Result<Vec<SupportMessage>> {
        let log = self.log(session_id)?;
        let state = log.state.read().unwrap();
        let end = cursor.min(state.records.len());
        Ok(materialize(&state.records[..end])
            .into_iter()
            .map(|m| m.message)
            .collect())
    }

    /// Messages that may appear in model context: state after `cursor`
    /// records, excluding batch-run outputs.
    pub fn context_messages(&self, session_id: &str, cursor: usize) -> Result<Vec<SupportMessage>> {
        let log = self.log(session_id)?;
        let state = log.state.read().unwrap();
        let end = cursor.min(state.records.len());
        Ok(materialize(&state.records[..end])
            .into_iter()
            .filter(|m| !m.meta.batch)
            .map(|m| m.message)
            .collect())
    }

    pub fn records(&self, session_id: &str) -> Result<Vec<Record>> {
        Ok(self.log(session_id)?.state.read().unwrap().records.clone())
    }

    pub fn ratings(&self, session_id: &str) -> Result<Vec<Rating>> {
        Ok(self.log(session_id)?.state.read().unwrap().ratings.clone())
    }

    pub fn annotations(&self, session_id: &str) -> Result<Vec<Annotation>> {
        Ok(self.log(session_id)?.state.read().unwrap().annotations.clone())
    }

    /// Messages ordered by `t` (ties in log order) joined with their
    /// ratings and annotations.
    pub fn coding_view(&self, session_id: &str) -> Result<Vec<CodingRow>> {
        let log = self.log(session_id)?;
        let state = log.state.read().unwrap();
        let mut rows: Vec<CodingRow> = state
            .messages
            .iter()
            .map(|m| CodingRow {
                message: m.message.clone(),
                batch: m.meta.batch,
                ratings: state
                    .ratings
                    .iter()
                    .filter(|r| r.message_id == m.message.id)
                    .cloned()
                    .collect(),
                annotations: state
                    .annotations
                    .iter()
                    .filter(|a| a.message_id == m.message.id)
                    .cloned()
                    .collect(),
            })
            .collect();
        rows.sort_by_key(|r| r.message.t);
        Ok(rows)
    }

    /// RFC 4180 CSV, one row per message in coding-view order. With several
    /// raters the most recently written rating fills `score`/`comment`;
    /// multiple labels are joined with `; `.
    pub fn export_csv(&self, session_id: &str) -> Result<String> {
        let rows = self.coding_view(session_id)?;
        Ok(coding_rows_csv(session_id, &rows))
    }
}

pub fn coding_rows_csv(session_id: &str, rows: &[CodingRow]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for row in rows {
        let m = &row.message;
        let rating = row.ratings.iter().max_by_key(|r| r.created_at);
        let labels = row
            .annotations
            .iter()
            .map(|a| a.label.as_str())
            .collect::<Vec<_>>()
            .join("; ");
        let phase_source = match m.phase_source {
            crate::session::PhaseSource::Model => "model",
            crate::session::PhaseSource::WizardOverride => "wizard_override",
        };
        w.write_record([
            session_id,
            &m.id,
            &m.t.0.to_string(),
            m.msg_type.name(),
            m.phase.name(),
            phase_source,
            m.decision.label(),
            m.decision.denial_reason().unwrap_or(""),
            &rating.map(|r| r.score.to_string()).unwrap_or_default(),
            rating.and_then(|r| r.comment.as_deref()).unwrap_or(""),
            &labels,
            &m.text,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}
