//! Language-model providers.
//!
//! The agent talks to models through [`LanguageModel`]. [`HttpChatModel`]
//! targets an OpenAI-compatible chat-completions endpoint; [`ScriptedModel`]
//! answers from a fixed script so agent runs replay bit-for-bit in tests.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EndpointConfig;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("language model provider failed: {message}")]
    Provider { message: String, retryable: bool },
    #[error("script has no entry matching request: {excerpt:?}")]
    ScriptExhausted { excerpt: String },
    #[error("invalid script: {0}")]
    Script(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Provider { retryable: true, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Sampling settings applied to every completion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionDefaults {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionDefaults {
    fn default() -> Self {
        Self {
            temperature: 0.4,
            max_tokens: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    /// A request carrying `prompt` as its only (user) message.
    pub fn prompt(prompt: impl Into<String>, settings: CompletionDefaults) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            temperature: settings.temperature,
            max_tokens: settings.max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if let Some(m) = self
            .messages
            .iter()
            .find(|m| m.role != Role::Assistant && m.content.trim().is_empty())
        {
            return Err(LlmError::InvalidRequest(format!("empty {:?} message", m.role)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Concatenated message contents; what scripts match against.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub trait LanguageModel: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

/// OpenAI-compatible chat-completions client.
pub struct HttpChatModel {
    client: reqwest::blocking::Client,
    endpoint: EndpointConfig,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatModel {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, LlmError> {
        let client = endpoint
            .blocking_client()
            .map_err(|e| LlmError::Provider {
                message: e.to_string(),
                retryable: false,
            })?;
        let api_key = endpoint.api_key();
        Ok(Self {
            client,
            endpoint,
            api_key,
        })
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let mut req = self.client.post(&self.endpoint.url).json(&ChatBody {
            model: &self.endpoint.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Provider {
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LlmError::Provider {
                message: format!("HTTP {status}"),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let body: ChatResponse = resp.json().map_err(|e| LlmError::Provider {
            message: format!("malformed response: {e}"),
            retryable: false,
        })?;
        body.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or(LlmError::Provider {
                message: "response carried no content".into(),
                retryable: false,
            })
    }
}

impl LanguageModel for HttpChatModel {
    fn name(&self) -> &str {
        &self.endpoint.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        self.endpoint
            .retry
            .run(|| self.attempt(request), LlmError::is_retryable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Substring,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub kind: MatchKind,
    pub text: String,
    pub response: String,
}

impl ScriptEntry {
    pub fn substring(text: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            kind: MatchKind::Substring,
            text: text.into(),
            response: response.into(),
        }
    }

    pub fn exact(text: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            kind: MatchKind::Exact,
            text: text.into(),
            response: response.into(),
        }
    }

    fn matches(&self, request: &str) -> bool {
        match self.kind {
            MatchKind::Substring => request.contains(&self.text),
            MatchKind::Exact => request == self.text,
        }
    }
}

/// On-disk script layout (TOML):
///
/// ```toml
/// consume = true
///
/// [[entry]]
/// match = "substring"
/// text = "Agent Instructions"
/// response = """
/// Action: GetNeighbor
/// Entity_id: Q1490"""
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    /// When set, each entry answers at most once, so repeated prompts walk
    /// through successive matching entries.
    #[serde(default)]
    pub consume: bool,
    #[serde(default, rename = "entry")]
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self, LlmError> {
        toml::from_str(text).map_err(|e| LlmError::Script(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("script serializes")
    }
}

/// Deterministic stand-in for a language model.
///
/// The first entry (in script order) matching the request text answers.
/// A script whose `consume` flag is set retires each entry after use.
pub struct ScriptedModel {
    script: Script,
    used: Mutex<Vec<bool>>,
}

impl ScriptedModel {
    pub fn new(script: Script) -> Self {
        let used = Mutex::new(vec![false; script.entries.len()]);
        Self { script, used }
    }

    pub fn stateless(entries: Vec<ScriptEntry>) -> Self {
        Self::new(Script {
            consume: false,
            entries,
        })
    }

    pub fn consuming(entries: Vec<ScriptEntry>) -> Self {
        Self::new(Script {
            consume: true,
            entries,
        })
    }

    /// Entries not yet consumed.
    pub fn remaining(&self) -> usize {
        self.used.lock().expect("script lock").iter().filter(|u| !**u).count()
    }
}

impl LanguageModel for ScriptedModel {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let text = request.text();
        let mut used = self.used.lock().expect("script lock");
        let hit = self
            .script
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !(self.script.consume && used[*i]) && e.matches(&text));
        match hit {
            Some((i, entry)) => {
                used[i] = true;
                Ok(entry.response.clone())
            }
            None => Err(LlmError::ScriptExhausted {
                excerpt: text.chars().take(120).collect(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(p: &str) -> CompletionRequest {
        CompletionRequest::prompt(p, CompletionDefaults::default())
    }

    #[test]
    fn defaults() {
        let r = req("hello");
        assert_eq!(r.temperature, 0.4);
        assert_eq!(r.max_tokens, 500);
        assert_eq!(r.messages.len(), 1);
        assert_eq!(r.messages[0].role, Role::User);
    }

    #[test]
    fn validation() {
        assert!(req(" ").validate().is_err());
        let mut r = req("x");
        r.temperature = -1.0;
        assert!(r.validate().is_err());
        let mut r = req("x");
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn scripted_substring_lookup() {
        let m = ScriptedModel::stateless(vec![ScriptEntry::substring(
            "capital of the prefecture",
            "Action: GetNeighbor\nEntity_id: Q1490",
        )]);
        let r = req("What is the capital of the prefecture Tokyo?");
        assert_eq!(m.complete(&r).unwrap(), "Action: GetNeighbor\nEntity_id: Q1490");
        assert_eq!(m.complete(&r).unwrap(), m.complete(&r).unwrap());
        assert!(matches!(m.complete(&req("other")), Err(LlmError::ScriptExhausted { .. })));
    }

    #[test]
    fn exact_match_is_exact() {
        let m = ScriptedModel::stateless(vec![ScriptEntry::exact("ping", "pong")]);
        assert_eq!(m.complete(&req("ping")).unwrap(), "pong");
        assert!(m.complete(&req("ping ")).is_err());
    }

    #[test]
    fn consuming_walks_entries() {
        let m = ScriptedModel::consuming(vec![
            ScriptEntry::substring("q", "first"),
            ScriptEntry::substring("q", "second"),
        ]);
        assert_eq!(m.complete(&req("q")).unwrap(), "first");
        assert_eq!(m.complete(&req("q")).unwrap(), "second");
        assert_eq!(m.remaining(), 0);
        assert!(m.complete(&req("q")).is_err());
    }

    #[test]
    fn script_toml_round_trip() {
        let text = r#"
consume = true

[[entry]]
match = "substring"
text = "Agent Instructions"
response = """
Thought: look around
Action: GetNeighbor
Entity_id: Q1490"""

[[entry]]
match = "exact"
text = "ping"
response = "pong"
"#;
        let script = Script::from_toml(text).unwrap();
        assert!(script.consume);
        assert_eq!(script.entries.len(), 2);
        assert_eq!(script.entries[1].kind, MatchKind::Exact);
        assert_eq!(Script::from_toml(&script.to_toml()).unwrap(), script);
        assert!(Script::from_toml("[[entry]]\nmatch = \"regex\"\ntext=\"\"\nresponse=\"\"").is_err());
    }
}
