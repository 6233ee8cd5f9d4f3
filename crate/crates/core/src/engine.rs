//! Counterfactual generation shared by the HTTP API, the live relay and batch
//! runs: assemble the context at `t`, run the chain, record the message.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Chain, ChainError, ChainResult};
use crate::context::{assemble, Budget, ContextError, ContextPayload, Session};
use crate::library::{LibraryError, SessionFiles};
use crate::prompt::{check_placeholders, TemplateError, TemplateSet};
use crate::session::{Decision, MessageType, SupportMessage, TaskPhase, Timecode};
use crate::store::{RecordMeta, Store, StoreError};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Where prompt templates come from. A directory is re-read on every request
/// so edits to the text files take effect immediately.
#[derive(Debug, Clone)]
pub enum TemplateSource {
    Builtin,
    Dir(PathBuf),
    Fixed(Arc<TemplateSet>),
}

impl TemplateSource {
    pub fn load(&self) -> Result<Arc<TemplateSet>, TemplateError> {
        match self {
            TemplateSource::Builtin => Ok(Arc::new(TemplateSet::builtin())),
            TemplateSource::Dir(dir) => Ok(Arc::new(TemplateSet::load_dir(dir)?)),
            TemplateSource::Fixed(t) => Ok(t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub t: Timecode,
    pub msg_type: MessageType,
    #[serde(default)]
    pub phase_override: Option<TaskPhase>,
    #[serde(default)]
    pub system_prompt_override: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Generated {
    pub message: SupportMessage,
    pub chain: ChainResult,
    pub payload_digest: String,
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub store: Arc<Store>,
    pub chain: Chain,
    pub templates: TemplateSource,
    pub budget: Budget,
}

impl Engine {
    pub fn new(store: Arc<Store>, chain: Chain, templates: TemplateSource, budget: Budget) -> Self {
        Engine {
            store,
            chain,
            templates,
            budget,
        }
    }

    /// Loads a stored session with messages as of the current log cursor.
    pub fn snapshot(&self, session_id: &str) -> Result<(Session, usize, PathBuf), GenerateError> {
        if !self.store.ensure_session(session_id) {
            return Err(LibraryError::UnknownSession(session_id.to_string()).into());
        }
        let dir = self.store.session_dir(session_id);
        let files = SessionFiles::load(&dir)?;
        let cursor = self.store.cursor(session_id)?;
        let messages = self.store.context_messages(session_id, cursor)?;
        Ok((files.into_session(messages), cursor, dir))
    }

    /// The generation-stage payload for `params`, before the phase is known.
    pub fn payload(
        &self,
        session: &Session,
        params: &GenerateParams,
        templates: &TemplateSet,
    ) -> Result<ContextPayload, GenerateError> {
        let system = match &params.system_prompt_override {
            Some(s) => {
                check_placeholders(s)?;
                s.clone()
            }
            None => templates.generator(params.msg_type).system_segment.clone(),
        };
        Ok(assemble(
            session,
            params.t,
            Some(params.msg_type),
            None,
            &system,
            &self.budget,
        )?)
    }

    /// Runs the chain on `session` at `params.t` and records a pending message.
    pub async fn generate_on(
        &self,
        session: &Session,
        media_base: &Path,
        context_cursor: usize,
        params: &GenerateParams,
        batch: bool,
    ) -> Result<Generated, GenerateError> {
        let templates = self.templates.load()?;
        let payload = self.payload(session, params, &templates)?;
        let run = self
            .chain
            .run_chain(&payload, &templates, params.phase_override, Some(media_base))
            .await?;
        let digest = run.generation_payload.digest();
        let result = run.result;
        let message = SupportMessage {
            id: String::new(),
            session_id: session.manifest.id.clone(),
            t: params.t,
            msg_type: params.msg_type,
            phase: result.effective_phase,
            phase_source: result.phase_source,
            prompt_version: result.prompt_versions.1.clone(),
            classify_version: Some(result.prompt_versions.0.clone()),
            classified_phase: result.classified_phase,
            classification_raw: Some(result.phase_confidence_raw.clone()),
            provider_id: result.provider_id.clone(),
            text: result.message_text.clone(),
            decision: Decision::Pending,
            delivered_seq: None,
            created_at: Utc::now(),
        };
        let id = self.store.record_message(
            message.clone(),
            RecordMeta {
                payload_digest: digest.clone(),
                batch,
                context_cursor: Some(context_cursor),
                system_prompt_override: params.system_prompt_override.clone(),
            },
        )?;
        Ok(Generated {
            message: SupportMessage { id, ..message },
            chain: result,
            payload_digest: digest,
        })
    }

    /// Counterfactual generation on a stored session.
    pub async fn generate(&self, session_id: &str, params: &GenerateParams) -> Result<Generated, GenerateError> {
        let (session, cursor, dir) = self.snapshot(session_id)?;
        self.generate_on(&session, &dir, cursor, params, false).await
    }

    /// Re-assembles the context of a recorded message from the stored session
    /// and returns `(recorded digest, replayed digest)`.
    pub fn replay_digest(&self, message_id: &str) -> Result<(String, String), GenerateError> {
        let stored = self.store.message(message_id)?;
        let session_id = &stored.message.session_id;
        let files = SessionFiles::load(&self.store.session_dir(session_id))?;
        let cursor = stored.meta.context_cursor.unwrap_or(stored.record_no);
        let messages = self.store.context_messages(session_id, cursor)?;
        let session = files.into_session(messages);
        let templates = self.templates.load()?;
        let system = match &stored.meta.system_prompt_override {
            Some(s) => s.clone(),
            None => templates.generator(stored.message.msg_type).system_segment.clone(),
        };
        let payload = assemble(
            &session,
            stored.message.t,
            Some(stored.message.msg_type),
            Some(stored.message.phase),
            &system,
            &self.budget,
        )?;
        Ok((stored.meta.payload_digest, payload.digest()))
    }
}
