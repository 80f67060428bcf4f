//! Action selection and execution.
//!
//! The model picks one of three actions per iteration: explore the
//! neighbors of one candidate entity, discover paths between two
//! candidates, or answer from memory. This module renders the prompts,
//! parses the model's choice, validates it, and runs KG actions.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, Triple};
use crate::llm::{CompletionDefaults, CompletionRequest, LanguageModel, LlmError};
use crate::memory::{render_triple, Memory};
use crate::observation::ObservationSubgraph;
use crate::prompt::PromptTemplates;

/// Text inserted when fewer than two candidates exist.
pub const PATH_CONSTRAINT: &str =
    "If there are less than 2 entityIDs available, only choose the GetNeighbor action.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    NeighborExploration { entity: EntityId },
    PathDiscovery { from: EntityId, to: EntityId },
    Answer,
}

impl Action {
    pub fn verb(&self) -> &'static str {
        match self {
            Action::NeighborExploration { .. } => "GetNeighbor",
            Action::PathDiscovery { .. } => "GetPath",
            Action::Answer => "Answer",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::NeighborExploration { entity } => write!(f, "GetNeighbor({entity})"),
            Action::PathDiscovery { from, to } => write!(f, "GetPath({from}, {to})"),
            Action::Answer => f.write_str("Answer"),
        }
    }
}

/// Actions already executed in this run, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionHistory(Vec<Action>);

impl ActionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, action: Action) {
        self.0.push(action);
    }

    pub fn contains(&self, action: &Action) -> bool {
        self.0.contains(action)
    }

    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn render(&self) -> String {
        self.0
            .iter()
            .map(Action::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub triples: Vec<Triple>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("no `Action:` line in response")]
    MissingVerb,
    #[error("unknown action {0:?}; expected GetNeighbor, GetPath or Answer")]
    UnknownVerb(String),
    #[error("{0} needs an Entity_id")]
    MissingEntity(&'static str),
    #[error("{0:?} is not one of the candidate entityIDs")]
    NotCandidate(String),
    #[error("GetPath needs at least two candidate entityIDs")]
    PathNeedsTwoCandidates,
    #[error("GetPath needs two distinct entityIDs")]
    PathSameEntity,
    #[error("{0} was already executed")]
    Repeated(String),
    #[error("Answer is not a knowledge-graph action")]
    NotExecutable,
}

/// Everything the action prompt is built from.
pub struct ActionContext<'a> {
    pub question: &'a str,
    pub memory: &'a Memory,
    pub candidates: &'a [EntityId],
    /// `None` drops the observation line entirely.
    pub observation: Option<&'a ObservationSubgraph>,
    pub kg: &'a KnowledgeGraph,
    pub history: &'a ActionHistory,
}

pub fn render_observation(kg: &KnowledgeGraph, observation: &ObservationSubgraph) -> String {
    observation
        .triples()
        .map(|t| render_triple(kg, t))
        .collect::<Vec<_>>()
        .join(", ")
}

/// `id: label` pairs for the given ids.
pub fn render_labels<'a>(kg: &KnowledgeGraph, ids: impl IntoIterator<Item = &'a str>) -> String {
    ids.into_iter()
        .map(|id| format!("{id}: {}", kg.label_of(id)))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn build_action_prompt(templates: &PromptTemplates, ctx: &ActionContext<'_>) -> String {
    let memory = ctx.memory.render(ctx.kg);
    let candidates = ctx
        .candidates
        .iter()
        .map(EntityId::as_str)
        .collect::<Vec<_>>()
        .join(", ");
    let observation = ctx.observation.map(|o| render_observation(ctx.kg, o));
    let labels = render_labels(ctx.kg, ctx.candidates.iter().map(EntityId::as_str));
    let history = ctx.history.render();
    let constraint = (ctx.candidates.len() < 2).then_some(PATH_CONSTRAINT);
    templates.action.render(&[
        ("Question", Some(ctx.question)),
        ("Memory", Some(&memory)),
        ("Task-relevant EntityIDs", Some(&candidates)),
        ("Observation", observation.as_deref()),
        ("Task-relevant entities labels", Some(&labels)),
        ("historical action", Some(&history)),
        ("Path constraint", constraint),
    ])
}

/// Trims list markers and markdown emphasis off a response line.
fn clean_line(line: &str) -> String {
    line.replace("**", "")
        .trim()
        .trim_start_matches(['-', '*', '#', '>'])
        .trim()
        .to_string()
}

/// Splits `key: value` when the key matches one of `keys` case-insensitively.
fn keyed<'a>(line: &'a str, keys: &[&str]) -> Option<&'a str> {
    let (k, v) = line.split_once(':')?;
    let k = k.trim().to_ascii_lowercase();
    keys.contains(&k.as_str()).then(|| v.trim())
}

fn strip_quotes(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '[' | ']' | '(' | ')' | '.'))
        .trim()
}

/// Resolves a model-written entity against the candidates by id, then by
/// case-insensitive id, then by case-insensitive label.
fn resolve(token: &str, candidates: &[EntityId], kg: &KnowledgeGraph) -> Option<EntityId> {
    let token = strip_quotes(token);
    if token.is_empty() {
        return None;
    }
    candidates
        .iter()
        .find(|c| c.as_str() == token)
        .or_else(|| candidates.iter().find(|c| c.as_str().eq_ignore_ascii_case(token)))
        .or_else(|| {
            let lower = token.to_lowercase();
            candidates
                .iter()
                .find(|c| kg.has_label(c.as_str()) && kg.label_of(c.as_str()).to_lowercase() == lower)
        })
        .cloned()
}

/// Resolves one `Entity_id` value, first as a whole and then split on commas.
fn resolve_value(
    value: &str,
    candidates: &[EntityId],
    kg: &KnowledgeGraph,
) -> Result<Vec<EntityId>, ActionError> {
    if let Some(e) = resolve(value, candidates, kg) {
        return Ok(vec![e]);
    }
    let parts: Vec<&str> = value.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.len() < 2 {
        return Err(ActionError::NotCandidate(strip_quotes(value).to_string()));
    }
    parts
        .into_iter()
        .map(|p| resolve(p, candidates, kg).ok_or_else(|| ActionError::NotCandidate(strip_quotes(p).to_string())))
        .collect()
}

/// Parses the model's reply into an [`Action`]. Accepts `Action: GetNeighbor`
/// with a separate `Entity_id:` line as well as inline `GetNeighbor(Q1)`.
pub fn parse_action(
    response: &str,
    candidates: &[EntityId],
    kg: &KnowledgeGraph,
) -> Result<Action, ActionError> {
    let lines: Vec<String> = response.lines().map(clean_line).collect();
    let verb_text = lines
        .iter()
        .find_map(|l| keyed(l, &["action"]))
        .ok_or(ActionError::MissingVerb)?;
    let (verb, inline) = match verb_text.split_once('(') {
        Some((v, rest)) => (v.trim(), Some(rest.trim_end().trim_end_matches(')'))),
        None => (verb_text, None),
    };
    let verb = strip_quotes(verb).to_ascii_lowercase();

    let mut values: Vec<&str> = Vec::new();
    if let Some(inline) = inline.filter(|s| !s.trim().is_empty()) {
        values.push(inline);
    }
    if values.is_empty() {
        values.extend(
            lines
                .iter()
                .filter_map(|l| keyed(l, &["entity_id", "entity_ids", "entityid", "entity id", "entity ids"]))
                .filter(|v| !v.is_empty()),
        );
    }
    let entities = || -> Result<Vec<EntityId>, ActionError> {
        let mut out = Vec::new();
        for v in &values {
            out.extend(resolve_value(v, candidates, kg)?);
        }
        Ok(out)
    };

    match verb.as_str() {
        "getneighbor" | "getneighbors" | "neighbor exploration" => {
            let entity = entities()?
                .into_iter()
                .next()
                .ok_or(ActionError::MissingEntity("GetNeighbor"))?;
            Ok(Action::NeighborExploration { entity })
        }
        "getpath" | "getpaths" | "path discovery" => {
            if candidates.len() < 2 {
                return Err(ActionError::PathNeedsTwoCandidates);
            }
            let mut it = entities()?.into_iter();
            match (it.next(), it.next()) {
                (Some(from), Some(to)) if from == to => Err(ActionError::PathSameEntity),
                (Some(from), Some(to)) => Ok(Action::PathDiscovery { from, to }),
                _ => Err(ActionError::MissingEntity("GetPath")),
            }
        }
        "answer" => Ok(Action::Answer),
        _ => Err(ActionError::UnknownVerb(verb_text.to_string())),
    }
}

/// Rejects an action that repeats one already in the history.
pub fn check_history(action: &Action, history: &ActionHistory) -> Result<(), ActionError> {
    if history.contains(action) {
        return Err(ActionError::Repeated(action.to_string()));
    }
    Ok(())
}

/// Runs a KG action and collects its triples.
pub fn execute_action(
    kg: &KnowledgeGraph,
    action: &Action,
    path_max_len: usize,
    neighbor_limit: Option<usize>,
) -> Result<ActionOutcome, ActionError> {
    let triples = match action {
        Action::NeighborExploration { entity } => kg.get_neighbors(entity.as_str(), neighbor_limit),
        Action::PathDiscovery { from, to } => {
            let mut seen = HashSet::new();
            kg.find_paths(from.as_str(), to.as_str(), path_max_len)
                .into_iter()
                .flatten()
                .filter(|t| seen.insert(t.clone()))
                .collect()
        }
        Action::Answer => return Err(ActionError::NotExecutable),
    };
    Ok(ActionOutcome { triples })
}

/// One model exchange while choosing an action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionAttempt {
    pub response: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSelection {
    pub action: Action,
    pub attempts: Vec<ActionAttempt>,
    /// True when every attempt was rejected and the default action was used.
    pub fallback: bool,
}

pub fn correction_note(error: &ActionError) -> String {
    format!(
        "\n\nYour previous response was rejected: {error}. Reply again in the required format, choosing a valid action that is not in the Action History."
    )
}

/// Asks the model for an action, re-prompting up to `max_reprompts` times
/// on invalid or repeated choices, then falling back to exploring the first
/// candidate.
pub fn select_action(
    llm: &dyn LanguageModel,
    settings: CompletionDefaults,
    prompt: &str,
    candidates: &[EntityId],
    kg: &KnowledgeGraph,
    history: &ActionHistory,
    max_reprompts: usize,
) -> Result<ActionSelection, LlmError> {
    let mut attempts = Vec::new();
    let mut current = prompt.to_string();
    for _ in 0..=max_reprompts {
        let response = llm.complete(&CompletionRequest::prompt(current.clone(), settings))?;
        let parsed = parse_action(&response, candidates, kg)
            .and_then(|a| check_history(&a, history).map(|()| a));
        match parsed {
            Ok(action) => {
                attempts.push(ActionAttempt {
                    response,
                    error: None,
                });
                return Ok(ActionSelection {
                    action,
                    attempts,
                    fallback: false,
                });
            }
            Err(e) => {
                tracing::debug!(error = %e, "rejected action response");
                current = format!("{prompt}{}", correction_note(&e));
                attempts.push(ActionAttempt {
                    response,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let entity = candidates
        .first()
        .cloned()
        .expect("action selection requires at least one candidate");
    Ok(ActionSelection {
        action: Action::NeighborExploration { entity },
        attempts,
        fallback: true,
    })
}

pub fn build_answer_prompt(
    templates: &PromptTemplates,
    question: &str,
    memory: &Memory,
    kg: &KnowledgeGraph,
) -> String {
    let memory = memory.render(kg);
    templates
        .answer
        .render(&[("Memory", Some(&memory)), ("Question", Some(question))])
}

/// Splits a final answer into items: one answer, a bracketed list, or a
/// comma/line separated list. An `Answer:` line, when present, is preferred.
pub fn parse_answer(response: &str) -> Vec<String> {
    let body = response
        .lines()
        .map(clean_line)
        .find_map(|l| keyed(&l, &["answer", "final answer"]).filter(|v| !v.is_empty()).map(str::to_string))
        .unwrap_or_else(|| response.to_string());
    body.replace(['[', ']'], "")
        .split([',', '\n'])
        .map(|s| s.trim().trim_matches(|c| matches!(c, '"' | '\'' | '`')).trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}
