//! Two-stage prompt chain: task-phase classification, then typed message
//! generation, with an optional wizard override of the phase in between.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{render_messages, ContextError, ContextPayload};
use crate::gateway::{Gateway, GatewayError, ProviderRequest};
use crate::prompt::{PromptTemplate, TemplateSet};
use crate::session::{MessageType, PhaseSource, TaskPhase};

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("chain precondition: {0}")]
    Precondition(&'static str),
    #[error("no `PHASE: <name>` line in classifier output")]
    UnparseablePhase { raw: String },
    #[error("model returned an empty message")]
    EmptyGeneration,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub model_id: String,
    pub classify_temperature: f32,
    pub generate_temperature: f32,
    pub max_output_chars: usize,
}

impl Default for ChainSettings {
    fn default() -> Self {
        ChainSettings {
            model_id: "gpt-4o".to_string(),
            classify_temperature: 0.2,
            generate_temperature: 0.7,
            max_output_chars: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub phase: TaskPhase,
    /// The matching `PHASE:` line, verbatim.
    pub line: String,
    pub raw: String,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub template_version: String,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    /// `None` only when classification failed and an override rescued the run.
    pub classified_phase: Option<TaskPhase>,
    pub phase_confidence_raw: String,
    pub classification_error: Option<String>,
    pub effective_phase: TaskPhase,
    pub phase_source: PhaseSource,
    pub message_text: String,
    pub prompt_versions: (String, String),
    pub provider_id: String,
}

/// A chain run together with what was sent to the provider.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub result: ChainResult,
    pub generation_payload: ContextPayload,
    pub classify_request: ProviderRequest,
    pub generate_request: ProviderRequest,
}

/// First line matching `PHASE: <name>` (case-insensitive) naming a known phase.
pub fn parse_phase_line(raw: &str) -> Option<(TaskPhase, String)> {
    raw.lines().find_map(|line| {
        let trimmed = line.trim();
        let (key, value) = trimmed.split_once(':')?;
        if !key.trim().eq_ignore_ascii_case("phase") {
            return None;
        }
        let value = value.trim().trim_end_matches(['.', '*']).trim();
        TaskPhase::parse_loose(value).map(|p| (p, trimmed.to_string()))
    })
}

/// First non-empty paragraph, trimmed.
pub fn first_paragraph(text: &str) -> Option<String> {
    let mut para: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !para.is_empty() {
                break;
            }
        } else {
            para.push(line.trim());
        }
    }
    (!para.is_empty()).then(|| para.join("\n"))
}

#[derive(Debug, Clone)]
pub struct Chain {
    gateway: Gateway,
    settings: ChainSettings,
}

impl Chain {
    pub fn new(gateway: Gateway, settings: ChainSettings) -> Self {
        Chain { gateway, settings }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn settings(&self) -> &ChainSettings {
        &self.settings
    }

    pub fn classify_request(
        &self,
        payload: &ContextPayload,
        template: &PromptTemplate,
        media_base: Option<&Path>,
    ) -> Result<ProviderRequest, ChainError> {
        let mut req = render_messages(payload, template)?;
        req.model_id = self.settings.model_id.clone();
        req.temperature = self.settings.classify_temperature;
        req.max_output_chars = self.settings.max_output_chars;
        req.media_base = media_base.map(Path::to_path_buf);
        Ok(req)
    }

    pub fn generate_request(
        &self,
        payload: &ContextPayload,
        template: &PromptTemplate,
        media_base: Option<&Path>,
    ) -> Result<ProviderRequest, ChainError> {
        let mut req = render_messages(payload, template)?;
        req.model_id = self.settings.model_id.clone();
        req.temperature = self.settings.generate_temperature;
        req.max_output_chars = self.settings.max_output_chars;
        req.media_base = media_base.map(Path::to_path_buf);
        Ok(req)
    }

    /// Classifies the task phase. `payload` must not carry a requested type.
    pub async fn classify_phase(
        &self,
        payload: &ContextPayload,
        template: &PromptTemplate,
        media_base: Option<&Path>,
    ) -> Result<Classification, ChainError> {
        if payload.requested_type.is_some() {
            return Err(ChainError::Precondition("classification payload carries a message type"));
        }
        let req = self.classify_request(payload, template, media_base)?;
        self.classify_with(&req).await
    }

    async fn classify_with(&self, req: &ProviderRequest) -> Result<Classification, ChainError> {
        let resp = self.gateway.complete(req).await?;
        match parse_phase_line(&resp.text) {
            Some((phase, line)) => Ok(Classification {
                phase,
                line,
                raw: resp.text,
                provider_id: resp.provider_id,
            }),
            None => Err(ChainError::UnparseablePhase { raw: resp.text }),
        }
    }

    /// Generates one message of `msg_type` for `phase`.
    pub async fn generate_message(
        &self,
        payload: &ContextPayload,
        phase: TaskPhase,
        msg_type: MessageType,
        templates: &TemplateSet,
        media_base: Option<&Path>,
    ) -> Result<Generation, ChainError> {
        if payload.requested_type != Some(msg_type) || payload.phase != Some(phase) {
            return Err(ChainError::Precondition("payload type/phase differ from the request"));
        }
        let template = templates.generator(msg_type);
        let req = self.generate_request(payload, template, media_base)?;
        self.generate_with(&req, template).await
    }

    async fn generate_with(
        &self,
        req: &ProviderRequest,
        template: &PromptTemplate,
    ) -> Result<Generation, ChainError> {
        let resp = match self.gateway.complete(req).await {
            Err(GatewayError::MalformedResponse(m)) if m == "empty completion" => {
                return Err(ChainError::EmptyGeneration)
            }
            other => other?,
        };
        let text = first_paragraph(&resp.text).ok_or(ChainError::EmptyGeneration)?;
        Ok(Generation {
            text,
            template_version: template.version.clone(),
            provider_id: resp.provider_id,
        })
    }

    /// Runs classification (always) and then generation with the override
    /// phase if given, else the classified one. A failed classification is
    /// fatal only without an override.
    pub async fn run_chain(
        &self,
        payload: &ContextPayload,
        templates: &TemplateSet,
        override_phase: Option<TaskPhase>,
        media_base: Option<&Path>,
    ) -> Result<ChainRun, ChainError> {
        let msg_type = payload
            .requested_type
            .ok_or(ChainError::Precondition("run_chain needs a requested message type"))?;

        let classify_payload = ContextPayload {
            requested_type: None,
            phase: None,
            system_prompt: templates.classify.system_segment.clone(),
            ..payload.clone()
        };
        let classify_request = self.classify_request(&classify_payload, &templates.classify, media_base)?;
        let classification = self.classify_with(&classify_request).await;

        let (classified_phase, raw_line, classification_error) = match &classification {
            Ok(c) => (Some(c.phase), c.line.clone(), None),
            Err(ChainError::UnparseablePhase { raw }) => {
                (None, raw.clone(), Some("UnparseablePhase".to_string()))
            }
            Err(e) => (None, String::new(), Some(e.to_string())),
        };
        let (effective_phase, phase_source) = match (override_phase, classification) {
            (Some(p), _) => (p, PhaseSource::WizardOverride),
            (None, Ok(c)) => (c.phase, PhaseSource::Model),
            (None, Err(e)) => return Err(e),
        };

        let generation_payload = ContextPayload {
            phase: Some(effective_phase),
            ..payload.clone()
        };
        let template = templates.generator(msg_type);
        let generate_request = self.generate_request(&generation_payload, template, media_base)?;
        let generation = self.generate_with(&generate_request, template).await?;

        Ok(ChainRun {
            result: ChainResult {
                classified_phase,
                phase_confidence_raw: raw_line,
                classification_error,
                effective_phase,
                phase_source,
                message_text: generation.text,
                prompt_versions: (templates.classify.version.clone(), generation.template_version),
                provider_id: generation.provider_id,
            },
            generation_payload,
            classify_request,
            generate_request,
        })
    }
}
