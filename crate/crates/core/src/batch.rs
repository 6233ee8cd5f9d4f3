//! Tabular comparison runs: one counterfactual model message per human
//! reference message, generated from the context at the reference's
//! timestamp.

use futures_util::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, GenerateError, GenerateParams};
use crate::library::LibraryError;
use crate::session::{MessageType, TaskPhase, Timecode};
use crate::transcript::{format_timecode, parse_timecode};

pub const REFS_FILE: &str = "refs.csv";
pub const BATCH_CSV_HEADER: [&str; 8] = [
    "session_id",
    "timestamp",
    "human_text",
    "generated_text",
    "msg_type",
    "phase",
    "prompt_version",
    "error",
];

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("refs.csv line {line}: {message}")]
    BadRefs { line: u64, message: String },
    #[error("reference messages must be sorted by timestamp (row {0})")]
    Unsorted(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceMessage {
    pub session_id: String,
    pub t: Timecode,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub session_id: String,
    pub t: Timecode,
    pub human_text: String,
    pub generated_text: String,
    pub msg_type: MessageType,
    pub phase: Option<TaskPhase>,
    pub prompt_version: String,
    pub message_id: Option<String>,
    pub error: Option<String>,
}

#[derive(Deserialize)]
struct RefRow {
    session_id: String,
    timestamp: String,
    text: String,
}

/// Reads `session_id,timestamp,text` rows (with header); timestamps in SRT
/// form, with or without milliseconds.
pub fn parse_refs(csv_text: &str) -> Result<Vec<ReferenceMessage>, BatchError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::Fields)
        .from_reader(csv_text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<RefRow>() {
        let row = row.map_err(|e| BatchError::BadRefs {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let t = parse_timecode(&row.timestamp).map_err(|e| BatchError::BadRefs {
            line: out.len() as u64 + 2,
            message: e.to_string(),
        })?;
        out.push(ReferenceMessage {
            session_id: row.session_id,
            t,
            text: row.text,
        });
    }
    Ok(out)
}

/// Generates one row per reference, in input order. Row failures are kept in
/// the row's `error` and never abort the batch. Every row sees the same
/// session snapshot, so rows do not feed into each other's history.
pub async fn run_batch(
    engine: &Engine,
    session_id: &str,
    refs: &[ReferenceMessage],
    msg_type: MessageType,
) -> Result<Vec<ComparisonRow>, BatchError> {
    if let Some(k) = refs.windows(2).position(|w| w[0].t > w[1].t) {
        return Err(BatchError::Unsorted(k + 1));
    }
    if refs.is_empty() {
        if !engine.store.ensure_session(session_id) {
            return Err(BatchError::UnknownSession(session_id.to_string()));
        }
        return Ok(Vec::new());
    }
    let (session, cursor, dir) = match engine.snapshot(session_id) {
        Ok(s) => s,
        Err(GenerateError::Library(LibraryError::UnknownSession(_))) => {
            return Err(BatchError::UnknownSession(session_id.to_string()))
        }
        Err(e) => {
            // Session exists but cannot be loaded: every row carries the error.
            return Ok(refs
                .iter()
                .map(|r| failed_row(r, msg_type, e.to_string()))
                .collect());
        }
    };

    let jobs = refs.iter().map(|r| {
        let session = &session;
        let dir = &dir;
        async move {
            if r.session_id != session_id {
                return failed_row(r, msg_type, format!("reference belongs to session `{}`", r.session_id));
            }
            let params = GenerateParams {
                t: r.t,
                msg_type,
                phase_override: None,
                system_prompt_override: None,
            };
            match engine.generate_on(session, dir, cursor, &params, true).await {
                Ok(g) => ComparisonRow {
                    session_id: r.session_id.clone(),
                    t: r.t,
                    human_text: r.text.clone(),
                    generated_text: g.message.text,
                    msg_type,
                    phase: Some(g.message.phase),
                    prompt_version: g.message.prompt_version,
                    message_id: Some(g.message.id),
                    error: None,
                },
                Err(e) => failed_row(r, msg_type, e.to_string()),
            }
        }
    });
    Ok(join_all(jobs).await)
}

fn failed_row(r: &ReferenceMessage, msg_type: MessageType, error: String) -> ComparisonRow {
    ComparisonRow {
        session_id: r.session_id.clone(),
        t: r.t,
        human_text: r.text.clone(),
        generated_text: String::new(),
        msg_type,
        phase: None,
        prompt_version: String::new(),
        message_id: None,
        error: Some(error),
    }
}

/// RFC 4180 CSV with the comparison header.
pub fn rows_to_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(BATCH_CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.session_id.as_str(),
            &format_timecode(r.t),
            &r.human_text,
            &r.generated_text,
            r.msg_type.name(),
            r.phase.map_or("", TaskPhase::name),
            &r.prompt_version,
            r.error.as_deref().unwrap_or(""),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
