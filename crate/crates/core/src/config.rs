//! File-backed settings.
//!
//! A settings file is TOML mirroring [`Settings`]; every section and field
//! is optional and falls back to the defaults below. Secrets never live in
//! the file: endpoints name the environment variable holding their key.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::eval::MatchPolicy;
use crate::retry::RetryPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid settings: {0}")]
    Parse(String),
}

/// An HTTP model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

impl EndpointConfig {
    /// A blocking HTTPS client honoring `timeout_secs`.
    pub fn blocking_client(&self) -> reqwest::Result<reqwest::blocking::Client> {
        // Installing fails only when a provider is already in place.
        let _ = rustls::crypto::ring::default_provider().install_default();
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.timeout_secs))
            .build()
    }

    pub fn api_key(&self) -> Option<String> {
        self.api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingBackend {
    /// Offline deterministic hash embeddings.
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub backend: EmbeddingBackend,
    pub seed: u64,
    pub dimension: usize,
    pub endpoint: EndpointConfig,
    pub cache_path: Option<PathBuf>,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            backend: EmbeddingBackend::Hash,
            seed: 0,
            dimension: 64,
            endpoint: EndpointConfig {
                url: "https://api.openai.com/v1/embeddings".into(),
                model: "text-embedding-ada-002".into(),
                api_key_env: Some("OPENAI_API_KEY".into()),
                ..EndpointConfig::default()
            },
            cache_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackend {
    Live,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub backend: LlmBackend,
    pub script: Option<PathBuf>,
    pub endpoint: EndpointConfig,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            backend: LlmBackend::Scripted,
            script: None,
            endpoint: EndpointConfig {
                url: "https://api.openai.com/v1/chat/completions".into(),
                model: "gpt-4".into(),
                api_key_env: Some("OPENAI_API_KEY".into()),
                ..EndpointConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub workers: usize,
    pub match_policy: MatchPolicy,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            workers: 4,
            match_policy: MatchPolicy::Normalized,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub agent: AgentConfig,
    pub embedding: EmbeddingSettings,
    pub llm: LlmSettings,
    pub eval: EvalSettings,
    /// Directory of prompt template overrides.
    pub templates: Option<PathBuf>,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("settings serialize")
    }
}
