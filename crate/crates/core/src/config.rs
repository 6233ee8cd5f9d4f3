//! Optional TOML configuration file. Command-line flags take precedence.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::chain::ChainSettings;
use crate::context::Budget;
use crate::gateway::HttpConfig;
use crate::media::SamplingPolicy;
use crate::relay::RelayConfig;
use crate::session::Timecode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub media_root: Option<PathBuf>,
    pub bind: Option<String>,
    pub provider: Option<ProviderKind>,
    pub prompts_dir: Option<PathBuf>,
    pub console_dir: Option<PathBuf>,
    pub cors_origin: Option<String>,
    pub endpoint: Option<String>,
    pub model_id: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub max_output_chars: Option<usize>,
    pub classify_temperature: Option<f32>,
    pub generate_temperature: Option<f32>,
    pub max_transcript_chars: Option<usize>,
    pub max_frames: Option<usize>,
    pub min_stride_ms: Option<u64>,
    pub include_wizard_speech: Option<bool>,
    pub skew_ms: Option<u64>,
}

pub const DEFAULT_BIND: &str = "127.0.0.1:8787";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn budget(&self) -> Result<Budget, ConfigError> {
        let d = Budget::default();
        let budget = Budget {
            max_transcript_chars: self.max_transcript_chars.unwrap_or(d.max_transcript_chars),
            sampling: SamplingPolicy {
                max_frames: self.max_frames.unwrap_or(d.sampling.max_frames),
                min_stride: self.min_stride_ms.map(Timecode).unwrap_or(d.sampling.min_stride),
            },
            include_wizard_speech: self.include_wizard_speech.unwrap_or(d.include_wizard_speech),
        };
        if budget.max_transcript_chars == 0 {
            return Err(ConfigError::Invalid("max_transcript_chars must be positive".into()));
        }
        Ok(budget)
    }

    pub fn chain_settings(&self) -> Result<ChainSettings, ConfigError> {
        let d = ChainSettings::default();
        let s = ChainSettings {
            model_id: self.model_id.clone().unwrap_or(d.model_id),
            classify_temperature: self.classify_temperature.unwrap_or(d.classify_temperature),
            generate_temperature: self.generate_temperature.unwrap_or(d.generate_temperature),
            max_output_chars: self.max_output_chars.unwrap_or(d.max_output_chars),
        };
        for temp in [s.classify_temperature, s.generate_temperature] {
            if !(0.0..=2.0).contains(&temp) {
                return Err(ConfigError::Invalid(format!("temperature {temp} outside 0..=2")));
            }
        }
        if s.max_output_chars == 0 {
            return Err(ConfigError::Invalid("max_output_chars must be positive".into()));
        }
        Ok(s)
    }

    pub fn http_config(&self, api_key: Option<String>) -> HttpConfig {
        let mut c = HttpConfig::new(
            self.endpoint.clone().unwrap_or_else(|| DEFAULT_ENDPOINT.to_string()),
            api_key,
        );
        if let Some(s) = self.timeout_secs {
            c.timeout = std::time::Duration::from_secs(s);
        }
        if let Some(r) = self.max_retries {
            c.max_retries = r;
        }
        c
    }

    pub fn relay(&self) -> RelayConfig {
        RelayConfig {
            skew: self.skew_ms.map(Timecode).unwrap_or(RelayConfig::default().skew),
        }
    }

    pub fn max_in_flight(&self) -> Result<usize, ConfigError> {
        match self.max_in_flight {
            Some(0) => Err(ConfigError::Invalid("max_in_flight must be positive".into())),
            Some(n) => Ok(n),
            None => Ok(4),
        }
    }
}
