//! Canonical session data model shared by replay, the live relay, the store
//! and the HTTP API.

use std::fmt;
use std::path::{Component, Path};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Milliseconds since session start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timecode(pub u64);

impl Timecode {
    pub const ZERO: Timecode = Timecode(0);

    pub fn from_millis(millis: u64) -> Self {
        Timecode(millis)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: Timecode) -> Timecode {
        Timecode(self.0.saturating_sub(other.0))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    #[default]
    User,
    Wizard,
    Agent,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Wizard => "wizard",
            Speaker::Agent => "agent",
        }
    }

    pub fn parse(s: &str) -> Option<Speaker> {
        match s {
            "user" => Some(Speaker::User),
            "wizard" => Some(Speaker::Wizard),
            "agent" => Some(Speaker::Agent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub start: Timecode,
    pub end: Timecode,
    #[serde(default)]
    pub speaker: Speaker,
    pub text: String,
}

/// A pre-extracted video frame. `uri` is relative to the session directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub t: Timecode,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_len: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Imported,
    LiveRecorded,
}

/// Contents of `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub id: String,
    pub title: String,
    pub duration: Timecode,
    #[serde(default)]
    pub video_uri: Option<String>,
    pub transcript_uri: String,
    pub frames_dir: String,
    #[serde(default)]
    pub brief_uri: Option<String>,
    pub origin: Origin,
    pub created_at: DateTime<Utc>,
}

/// `[a-z0-9-]{1,64}`
pub fn is_valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageType {
    ReflectiveQuestion,
    DesignSuggestion,
    SoftwareTip,
}

impl MessageType {
    pub const ALL: [MessageType; 3] = [
        MessageType::ReflectiveQuestion,
        MessageType::DesignSuggestion,
        MessageType::SoftwareTip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageType::ReflectiveQuestion => "ReflectiveQuestion",
            MessageType::DesignSuggestion => "DesignSuggestion",
            MessageType::SoftwareTip => "SoftwareTip",
        }
    }

    /// Short name used by CLI flags and template file names.
    pub fn short_name(self) -> &'static str {
        match self {
            MessageType::ReflectiveQuestion => "question",
            MessageType::DesignSuggestion => "design",
            MessageType::SoftwareTip => "software",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MessageType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageType::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.short_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown message type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskPhase {
    Planning,
    LoadSpecification,
    ObstacleGeometry,
    Manufacturability,
    Simulation,
    OutcomeEvaluation,
}

impl TaskPhase {
    pub const ALL: [TaskPhase; 6] = [
        TaskPhase::Planning,
        TaskPhase::LoadSpecification,
        TaskPhase::ObstacleGeometry,
        TaskPhase::Manufacturability,
        TaskPhase::Simulation,
        TaskPhase::OutcomeEvaluation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskPhase::Planning => "Planning",
            TaskPhase::LoadSpecification => "LoadSpecification",
            TaskPhase::ObstacleGeometry => "ObstacleGeometry",
            TaskPhase::Manufacturability => "Manufacturability",
            TaskPhase::Simulation => "Simulation",
            TaskPhase::OutcomeEvaluation => "OutcomeEvaluation",
        }
    }

    /// Case-insensitive lookup that also tolerates spaces, `_` and `-`
    /// ("obstacle geometry", "LOAD_SPECIFICATION").
    pub fn parse_loose(s: &str) -> Option<TaskPhase> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-'))
            .flat_map(char::to_lowercase)
            .collect();
        TaskPhase::ALL
            .into_iter()
            .find(|p| p.name().to_lowercase() == key)
    }
}

impl fmt::Display for TaskPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskPhase::parse_loose(s).ok_or_else(|| format!("unknown task phase `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSource {
    Model,
    WizardOverride,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Decision {
    Pending,
    Approved,
    Denied { reason: String },
}

impl Decision {
    pub fn label(&self) -> &'static str {
        match self {
            Decision::Pending => "pending",
            Decision::Approved => "approved",
            Decision::Denied { .. } => "denied",
        }
    }

    pub fn is_denied(&self) -> bool {
        matches!(self, Decision::Denied { .. })
    }

    pub fn denial_reason(&self) -> Option<&str> {
        match self {
            Decision::Denied { reason } => Some(reason),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportMessage {
    pub id: String,
    pub session_id: String,
    pub t: Timecode,
    pub msg_type: MessageType,
    pub phase: TaskPhase,
    pub phase_source: PhaseSource,
    /// Version of the generation template.
    pub prompt_version: String,
    #[serde(default)]
    pub classify_version: Option<String>,
    /// What the classifier said, kept even when the wizard overrode it.
    #[serde(default)]
    pub classified_phase: Option<TaskPhase>,
    #[serde(default)]
    pub classification_raw: Option<String>,
    pub provider_id: String,
    pub text: String,
    pub decision: Decision,
    #[serde(default)]
    pub delivered_seq: Option<u64>,
    pub created_at: DateTime<Utc>,
}

impl SupportMessage {
    /// Returns the first broken invariant, if any.
    pub fn check(&self) -> Result<(), &'static str> {
        if let Decision::Denied { reason } = &self.decision {
            if reason.trim().is_empty() {
                return Err("denied message without a reason");
            }
        }
        if self.delivered_seq.is_some() && self.decision != Decision::Approved {
            return Err("delivered message is not approved");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub message_id: String,
    pub score: u8,
    #[serde(default)]
    pub comment: Option<String>,
    pub rater: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub message_id: String,
    pub label: String,
    #[serde(default)]
    pub note: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    InvalidSessionId,
    UtteranceOrder,
    UtteranceEmptyText,
    UtteranceUnsorted,
    UtteranceIndex,
    FramePathEscape,
    FrameUnsorted,
    DurationTooShort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub detail: String,
}

impl Violation {
    fn new(code: ViolationCode, index: Option<usize>, detail: impl Into<String>) -> Self {
        Violation {
            code,
            index,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{:?} at {}: {}", self.code, i, self.detail),
            None => write!(f, "{:?}: {}", self.code, self.detail),
        }
    }
}

/// Lexically normalizes `uri` and reports whether it stays inside `dir`.
/// Absolute paths and any `..` that climbs above `dir` escape.
pub fn path_stays_within(dir: &str, uri: &str) -> bool {
    let mut base: Vec<&str> = Vec::new();
    for c in Path::new(dir).components() {
        match c {
            Component::Normal(s) => match s.to_str() {
                Some(s) => base.push(s),
                None => return false,
            },
            Component::CurDir => {}
            _ => return false,
        }
    }
    let mut stack: Vec<&str> = Vec::new();
    for c in Path::new(uri).components() {
        match c {
            Component::Normal(s) => match s.to_str() {
                Some(s) => stack.push(s),
                None => return false,
            },
            Component::CurDir => {}
            Component::ParentDir => {
                if stack.pop().is_none() {
                    return false;
                }
            }
            Component::RootDir | Component::Prefix(_) => return false,
        }
    }
    stack.len() > base.len() && stack[..base.len()] == base[..]
}

/// Checks every session invariant. An empty result means the session is valid.
pub fn validate_session(
    manifest: &SessionManifest,
    utterances: &[Utterance],
    frames: &[FrameRef],
) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();

    if !is_valid_session_id(&manifest.id) {
        out.push(Violation::new(
            InvalidSessionId,
            None,
            format!("`{}` is not [a-z0-9-]{{1,64}}", manifest.id),
        ));
    }

    let mut max_end = Timecode::ZERO;
    for (k, u) in utterances.iter().enumerate() {
        if u.index != k {
            out.push(Violation::new(
                UtteranceIndex,
                Some(k),
                format!("index {} at position {k}", u.index),
            ));
        }
        if u.start > u.end {
            out.push(Violation::new(
                UtteranceOrder,
                Some(k),
                format!("start {} > end {}", u.start.0, u.end.0),
            ));
        }
        if u.text.trim().is_empty() {
            out.push(Violation::new(UtteranceEmptyText, Some(k), "empty text"));
        }
        if k > 0 && utterances[k - 1].start > u.start {
            out.push(Violation::new(
                UtteranceUnsorted,
                Some(k),
                format!("start {} precedes previous start {}", u.start.0, utterances[k - 1].start.0),
            ));
        }
        max_end = max_end.max(u.end);
    }

    let mut max_frame = Timecode::ZERO;
    for (k, f) in frames.iter().enumerate() {
        if !path_stays_within(&manifest.frames_dir, &f.uri) {
            out.push(Violation::new(
                FramePathEscape,
                Some(k),
                format!("`{}` leaves `{}`", f.uri, manifest.frames_dir),
            ));
        }
        if k > 0 && frames[k - 1].t >= f.t {
            out.push(Violation::new(
                FrameUnsorted,
                Some(k),
                format!("frame t {} not after {}", f.t.0, frames[k - 1].t.0),
            ));
        }
        max_frame = max_frame.max(f.t);
    }

    if manifest.duration < max_end || manifest.duration < max_frame {
        out.push(Violation::new(
            DurationTooShort,
            None,
            format!(
                "duration {} < max utterance end {} or max frame {}",
                manifest.duration.0, max_end.0, max_frame.0
            ),
        ));
    }
    out
}
