//! Builds the multimodal context for a request at timestamp `t` and renders
//! it into a provider request.
//!
//! Everything here is pure: the same session, timestamp and template always
//! yield byte-identical payloads and requests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Part, ProviderRequest, RequestMeta, Role};
use crate::hash::sha256_hex;
use crate::media::{media_type_for, FrameIndex, SamplingPolicy};
use crate::prompt::{substitute, PromptTemplate, TemplateError};
use crate::session::{
    Decision, FrameRef, MessageType, SessionManifest, Speaker, SupportMessage, TaskPhase,
    Timecode, Utterance,
};
use crate::transcript::{format_clock, slice_at};

/// Everything assembly reads about one session.
#[derive(Debug, Clone)]
pub struct Session {
    pub manifest: SessionManifest,
    pub utterances: Vec<Utterance>,
    pub frames: FrameIndex,
    pub brief: Option<String>,
    /// Messages in store order.
    pub messages: Vec<SupportMessage>,
    /// Live sessions have no fixed duration yet.
    pub open_ended: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_transcript_chars: usize,
    pub sampling: SamplingPolicy,
    pub include_wizard_speech: bool,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_transcript_chars: 24_000,
            sampling: SamplingPolicy::default(),
            include_wizard_speech: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub t: Timecode,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub t: Timecode,
    pub msg_type: MessageType,
    pub text: String,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetApplied {
    pub transcript_truncated: bool,
    pub frames_truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPayload {
    pub session_id: String,
    pub t: Timecode,
    pub system_prompt: String,
    pub brief: Option<String>,
    pub transcript_window: Vec<TranscriptLine>,
    pub frames: Vec<FrameRef>,
    pub history: Vec<HistoryEntry>,
    pub requested_type: Option<MessageType>,
    pub phase: Option<TaskPhase>,
    pub budget_applied: BudgetApplied,
}

impl ContextPayload {
    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("payload serializes"))
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("timestamp {t} ms is beyond session duration {duration} ms")]
    TimestampOutOfRange { t: u64, duration: u64 },
    #[error("max_transcript_chars must be positive")]
    InvalidBudget,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Assembles the context visible at `t`.
///
/// The transcript window is the slice at `t` with the oldest whole utterances
/// dropped until the text fits `max_transcript_chars`. History keeps messages
/// at or before `t` that were not denied.
pub fn assemble(
    session: &Session,
    t: Timecode,
    requested_type: Option<MessageType>,
    phase: Option<TaskPhase>,
    system_prompt: &str,
    budget: &Budget,
) -> Result<ContextPayload, ContextError> {
    if budget.max_transcript_chars == 0 {
        return Err(ContextError::InvalidBudget);
    }
    if !session.open_ended && t > session.manifest.duration {
        return Err(ContextError::TimestampOutOfRange {
            t: t.0,
            duration: session.manifest.duration.0,
        });
    }

    let visible: Vec<&Utterance> = slice_at(&session.utterances, t)
        .iter()
        .filter(|u| budget.include_wizard_speech || u.speaker != Speaker::Wizard)
        .collect();
    let mut total: usize = visible.iter().map(|u| u.text.chars().count()).sum();
    let mut first = 0;
    while total > budget.max_transcript_chars && first < visible.len() {
        total -= visible[first].text.chars().count();
        first += 1;
    }
    let transcript_window = visible[first..]
        .iter()
        .map(|u| TranscriptLine {
            t: u.start,
            speaker: u.speaker,
            text: u.text.clone(),
        })
        .collect();

    let frames = session.frames.sample(t, &budget.sampling);
    let frames_truncated = frames.len() < session.frames.count_until(t);

    let mut history: Vec<HistoryEntry> = session
        .messages
        .iter()
        .filter(|m| m.t <= t && !m.decision.is_denied())
        .map(|m| HistoryEntry {
            t: m.t,
            msg_type: m.msg_type,
            text: m.text.clone(),
            decision: m.decision.clone(),
        })
        .collect();
    history.sort_by_key(|h| h.t);

    Ok(ContextPayload {
        session_id: session.manifest.id.clone(),
        t,
        system_prompt: system_prompt.to_string(),
        brief: session.brief.clone(),
        transcript_window,
        frames,
        history,
        requested_type,
        phase,
        budget_applied: BudgetApplied {
            transcript_truncated: first > 0,
            frames_truncated,
        },
    })
}

/// `[(HH:MM:SS)] speaker: text`, one line per window entry.
pub fn transcript_block(payload: &ContextPayload) -> String {
    payload
        .transcript_window
        .iter()
        .map(|l| format!("[({})] {}: {}", format_clock(l.t), l.speaker.as_str(), l.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn history_block(payload: &ContextPayload) -> String {
    if payload.history.is_empty() {
        return "(none)".to_string();
    }
    payload
        .history
        .iter()
        .map(|h| {
            format!(
                "[({})] {} ({}): {}",
                format_clock(h.t),
                h.msg_type.name(),
                h.decision.label(),
                h.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders `payload` through `template`.
///
/// The system message is `payload.system_prompt` with placeholders filled.
/// The user message holds the transcript block, one image part per frame in
/// ascending order, then the template's instruction segment.
pub fn render_messages(
    payload: &ContextPayload,
    template: &PromptTemplate,
) -> Result<ProviderRequest, ContextError> {
    let transcript = transcript_block(payload);
    let history = history_block(payload);
    let lookup = |name: &str| -> Option<String> {
        match name {
            "brief" => Some(payload.brief.clone().unwrap_or_default()),
            "transcript" => Some(transcript.clone()),
            "history" => Some(history.clone()),
            "type" => Some(payload.requested_type.map(|t| t.name().to_string()).unwrap_or_default()),
            "phase" => Some(payload.phase.map(|p| p.name().to_string()).unwrap_or_default()),
            _ => None,
        }
    };
    let system = substitute(&payload.system_prompt, lookup)?;
    let instruction = substitute(&template.instruction_segment, lookup)?;

    let mut parts = Vec::with_capacity(payload.frames.len() + 2);
    if !transcript.is_empty() {
        parts.push(Part::Text { text: transcript.clone() });
    }
    for f in &payload.frames {
        parts.push(Part::ImageUri {
            uri: f.uri.clone(),
            media_type: media_type_for(&f.uri).to_string(),
        });
    }
    parts.push(Part::Text { text: instruction });

    Ok(ProviderRequest {
        messages: vec![
            ChatMessage {
                role: Role::System,
                parts: vec![Part::Text { text: system }],
            },
            ChatMessage { role: Role::User, parts },
        ],
        model_id: "default".to_string(),
        max_output_chars: 2000,
        temperature: 0.7,
        meta: RequestMeta {
            template: template.name.clone(),
            template_version: template.version.clone(),
            phase: payload.phase,
            msg_type: payload.requested_type,
        },
        media_base: None,
    })
}
