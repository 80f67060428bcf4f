//! The per-question observe, act, reflect loop.
//!
//! Each iteration observes around the current task-relevant entities, asks
//! the model for an action, runs it against the KG, and reflects the
//! result into memory. An `Answer` action ends the loop; reaching the
//! iteration cap forces a final answer from whatever memory holds.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{
    build_action_prompt, build_answer_prompt, execute_action, parse_answer, select_action, Action,
    ActionAttempt, ActionContext, ActionHistory,
};
use crate::config::{ConfigError, EmbeddingBackend, LlmBackend, Settings};
use crate::embedding::{EmbeddingCache, EmbeddingError, Embedder, HashEmbedding, HttpEmbedding};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::llm::{CompletionDefaults, CompletionRequest, HttpChatModel, LanguageModel, LlmError, Script, ScriptedModel};
use crate::memory::{Memory, MemoryRecord};
use crate::observation::{observe, ObservationError, ObservationParams, ObservationSubgraph};
use crate::prompt::PromptTemplates;
use crate::reflection::{
    build_reflection_prompt, parse_reflected, reflect_generated_fact, reflect_random, reflect_similarity,
    ReflectionContext, ReflectionParams, ReflectionResult, ReflectionStrategy,
};
use crate::retry::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub max_iterations: usize,
    pub observation: ObservationParams,
    pub reflection: ReflectionParams,
    /// Longest path GetPath enumerates.
    pub path_max_len: usize,
    pub completion: CompletionDefaults,
    /// Extra prompts after an invalid or repeated action.
    pub max_reprompts: usize,
    /// Cap on triples returned by GetNeighbor; unlimited when absent.
    pub neighbor_limit: Option<usize>,
    /// Mixed into the random-reflection seed.
    pub seed: u64,
    /// Offer the question's seed entities as action candidates in every
    /// iteration, after the current task-relevant entities.
    pub keep_seed_candidates: bool,
    /// Wall-clock budget per question, checked between steps. Zero disables it.
    pub question_timeout_secs: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_iterations: 8,
            observation: ObservationParams::default(),
            reflection: ReflectionParams::default(),
            path_max_len: 3,
            completion: CompletionDefaults::default(),
            max_reprompts: 2,
            neighbor_limit: None,
            seed: 0,
            keep_seed_candidates: true,
            question_timeout_secs: 300,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_iterations == 0 {
            return Err(AgentError::InvalidConfig("max_iterations must be positive".into()));
        }
        if self.path_max_len == 0 {
            return Err(AgentError::InvalidConfig("path_max_len must be positive".into()));
        }
        if self.reflection.k_max == 0 {
            return Err(AgentError::InvalidConfig("reflection.k_max must be positive".into()));
        }
        self.observation.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("question has no seed entities")]
    NoSeedEntities,
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("question exceeded its {0:?} time budget")]
    Timeout(Duration),
}

/// Everything a run needs besides the KG. Cheap to clone and shared by
/// concurrent runs.
#[derive(Clone)]
pub struct Providers {
    pub llm: Arc<dyn LanguageModel>,
    pub embedder: Embedder,
    pub templates: Arc<PromptTemplates>,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("scripted language model needs a script file")]
    MissingScript,
    #[error("reading templates from {path}: {source}")]
    Templates {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Providers {
    pub fn new(llm: Arc<dyn LanguageModel>, embedder: Embedder) -> Self {
        Self {
            llm,
            embedder,
            templates: Arc::new(PromptTemplates::default()),
        }
    }

    /// Builds providers from settings. Relative paths resolve against `base`.
    pub fn from_settings(settings: &Settings, base: &Path) -> Result<Self, ProviderError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let emb = &settings.embedding;
        let cache = match &emb.cache_path {
            Some(p) => EmbeddingCache::open(resolve(p))?,
            None => EmbeddingCache::in_memory(),
        };
        let (provider, retry): (Arc<dyn crate::embedding::EmbeddingProvider>, RetryPolicy) = match emb.backend {
            EmbeddingBackend::Hash => (
                Arc::new(HashEmbedding::new(emb.seed, emb.dimension)?),
                RetryPolicy::immediate(0),
            ),
            EmbeddingBackend::Remote => (
                Arc::new(HttpEmbedding::new(emb.endpoint.clone(), emb.dimension)?),
                emb.endpoint.retry,
            ),
        };
        let embedder = Embedder::new(provider, Arc::new(cache), retry);

        let llm: Arc<dyn LanguageModel> = match settings.llm.backend {
            LlmBackend::Live => Arc::new(HttpChatModel::new(settings.llm.endpoint.clone())?),
            LlmBackend::Scripted => {
                let path = settings.llm.script.as_deref().ok_or(ProviderError::MissingScript)?;
                Arc::new(ScriptedModel::new(Script::load(resolve(path))?))
            }
        };

        let templates = match &settings.templates {
            Some(dir) => {
                let dir = resolve(dir);
                PromptTemplates::load_dir(&dir).map_err(|source| ProviderError::Templates { path: dir, source })?
            }
            None => PromptTemplates::default(),
        };
        Ok(Self {
            llm,
            embedder,
            templates: Arc::new(templates),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    AnswerAction,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub strategy: ReflectionStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub result: ReflectionResult,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub facts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// Task-relevant entities observation started from.
    pub entities: Vec<EntityId>,
    /// Entity ids offered to the action prompt.
    pub candidates: Vec<EntityId>,
    /// Absent when the strategy disables observation.
    pub observation: Option<ObservationSubgraph>,
    pub action_prompt: String,
    pub attempts: Vec<ActionAttempt>,
    pub action: Action,
    pub fallback: bool,
    pub outcome_count: usize,
    /// Absent on the iteration that chose `Answer`.
    pub reflection: Option<ReflectionRecord>,
    pub memory: Vec<MemoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub prompt: String,
    pub response: String,
    pub answers: Vec<String>,
}

/// Full record of one run. Contains nothing time- or host-dependent, so
/// scripted runs serialize byte-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub question: String,
    pub seed_entities: Vec<EntityId>,
    pub iterations: Vec<IterationRecord>,
    pub answer: Option<AnswerRecord>,
    pub halted_by: Option<HaltReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AgentTrace {
    pub fn new(question: &str, seed_entities: &[EntityId]) -> Self {
        Self {
            question: question.to_string(),
            seed_entities: seed_entities.to_vec(),
            iterations: Vec::new(),
            answer: None,
            halted_by: None,
            error: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResult {
    pub answers: Vec<String>,
    pub halted_by: HaltReason,
    pub memory: Memory,
    pub trace: AgentTrace,
}

/// A run that stopped on an error, with the trace up to that point.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct AgentFailure {
    pub error: AgentError,
    pub trace: Box<AgentTrace>,
}

/// Seed for random reflection, derived from the question text rather than
/// its dataset position so shuffled datasets reproduce.
pub fn random_reflection_seed(config_seed: u64, question: &str, iteration: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(config_seed.to_le_bytes());
    h.update((question.len() as u64).to_le_bytes());
    h.update(question.as_bytes());
    h.update((iteration as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

struct Run<'a> {
    question: &'a str,
    seeds: &'a [EntityId],
    kg: &'a KnowledgeGraph,
    providers: &'a Providers,
    config: &'a AgentConfig,
    deadline: Option<(Instant, Duration)>,
    memory: Memory,
    history: ActionHistory,
    trace: AgentTrace,
}

impl Run<'_> {
    fn check_deadline(&self) -> Result<(), AgentError> {
        match self.deadline {
            Some((at, budget)) if Instant::now() >= at => Err(AgentError::Timeout(budget)),
            _ => Ok(()),
        }
    }

    fn answer(&mut self) -> Result<Vec<String>, AgentError> {
        self.check_deadline()?;
        let prompt = build_answer_prompt(&self.providers.templates, self.question, &self.memory, self.kg);
        let response = self
            .providers
            .llm
            .complete(&CompletionRequest::prompt(prompt.clone(), self.config.completion))?;
        let answers = parse_answer(&response);
        self.trace.answer = Some(AnswerRecord {
            prompt,
            response,
            answers: answers.clone(),
        });
        Ok(answers)
    }

    fn reflect(
        &mut self,
        index: usize,
        candidates: &[crate::kg::Triple],
        observation: Option<&ObservationSubgraph>,
    ) -> Result<ReflectionRecord, AgentError> {
        let params = self.config.reflection;
        let mut record = ReflectionRecord {
            strategy: params.strategy,
            prompt: None,
            response: None,
            result: ReflectionResult::default(),
            facts: Vec::new(),
        };
        if params.strategy == ReflectionStrategy::GeneratedFact {
            let (response, facts) = reflect_generated_fact(
                &self.providers.templates,
                self.question,
                params.k_max,
                self.providers.llm.as_ref(),
                self.config.completion,
            )?;
            record.response = Some(response);
            record.facts = facts;
            return Ok(record);
        }
        if candidates.is_empty() {
            return Ok(record);
        }
        record.result = match params.strategy {
            ReflectionStrategy::Oda | ReflectionStrategy::NoObservation => {
                let ctx = ReflectionContext {
                    question: self.question,
                    candidates,
                    kg: self.kg,
                    observation,
                    memory: &self.memory,
                    k_max: params.k_max,
                };
                let prompt = build_reflection_prompt(&self.providers.templates, &ctx);
                let response = self
                    .providers
                    .llm
                    .complete(&CompletionRequest::prompt(prompt.clone(), self.config.completion))?;
                let result = parse_reflected(&response, candidates, self.kg, params.k_max);
                record.prompt = Some(prompt);
                record.response = Some(response);
                result
            }
            ReflectionStrategy::Similarity => {
                reflect_similarity(self.question, candidates, self.kg, params.k_max, &self.providers.embedder)?
            }
            ReflectionStrategy::Random => reflect_random(
                candidates,
                params.k_max,
                random_reflection_seed(self.config.seed, self.question, index),
            ),
            ReflectionStrategy::GeneratedFact => unreachable!("handled above"),
        };
        Ok(record)
    }

    fn iterate(&mut self, index: usize, entities: &mut Vec<EntityId>) -> Result<Option<HaltReason>, AgentError> {
        self.check_deadline()?;
        let observation = if self.config.reflection.strategy.uses_observation() {
            Some(observe(
                self.kg,
                self.question,
                entities,
                &self.config.observation,
                &self.providers.embedder,
            )?)
        } else {
            None
        };

        let mut candidates = entities.clone();
        if self.config.keep_seed_candidates {
            for s in self.seeds {
                if !candidates.contains(s) {
                    candidates.push(s.clone());
                }
            }
        }
        let action_prompt = build_action_prompt(
            &self.providers.templates,
            &ActionContext {
                question: self.question,
                memory: &self.memory,
                candidates: &candidates,
                observation: observation.as_ref(),
                kg: self.kg,
                history: &self.history,
            },
        );
        self.check_deadline()?;
        let selection = select_action(
            self.providers.llm.as_ref(),
            self.config.completion,
            &action_prompt,
            &candidates,
            self.kg,
            &self.history,
            self.config.max_reprompts,
        )?;
        let mut record = IterationRecord {
            index,
            entities: entities.clone(),
            candidates,
            observation,
            action_prompt,
            attempts: selection.attempts,
            action: selection.action.clone(),
            fallback: selection.fallback,
            outcome_count: 0,
            reflection: None,
            memory: Vec::new(),
        };

        if selection.action == Action::Answer {
            record.memory = self.memory.snapshot();
            self.trace.iterations.push(record);
            return Ok(Some(HaltReason::AnswerAction));
        }

        let outcome = execute_action(
            self.kg,
            &selection.action,
            self.config.path_max_len,
            self.config.neighbor_limit,
        )
        .expect("non-answer actions always execute");
        self.history.push(selection.action);
        record.outcome_count = outcome.triples.len();

        let push_partial = |run: &mut Self, mut record: IterationRecord| {
            record.memory = run.memory.snapshot();
            run.trace.iterations.push(record);
        };
        self.check_deadline().inspect_err(|_| push_partial(self, record.clone()))?;
        let reflection = match self.reflect(index, &outcome.triples, record.observation.as_ref()) {
            Ok(r) => r,
            Err(e) => {
                push_partial(self, record);
                return Err(e);
            }
        };

        self.memory.integrate(&reflection.result.kept);
        self.memory.add_facts(reflection.facts.iter().cloned());
        if !reflection.result.is_empty() {
            *entities = reflection.result.next_entities.clone();
        }
        record.reflection = Some(reflection);
        push_partial(self, record);
        Ok(None)
    }

    fn drive(&mut self) -> Result<(Vec<String>, HaltReason), AgentError> {
        let mut entities = self.seeds.to_vec();
        for index in 1..=self.config.max_iterations {
            if let Some(halt) = self.iterate(index, &mut entities)? {
                return Ok((self.answer()?, halt));
            }
        }
        tracing::debug!(question = self.question, "iteration cap reached; forcing an answer");
        Ok((self.answer()?, HaltReason::IterationCap))
    }
}

/// Answers one question starting from its seed entities.
pub fn run(
    question: &str,
    seed_entities: &[EntityId],
    kg: &KnowledgeGraph,
    providers: &Providers,
    config: &AgentConfig,
) -> Result<AgentResult, AgentFailure> {
    let mut seen = HashSet::new();
    let seeds: Vec<EntityId> = seed_entities.iter().filter(|e| seen.insert(*e)).cloned().collect();
    let mut trace = AgentTrace::new(question, &seeds);
    let fail = |error: AgentError, mut trace: AgentTrace| {
        trace.error = Some(error.to_string());
        AgentFailure {
            error,
            trace: Box::new(trace),
        }
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, trace));
    }
    if seeds.is_empty() {
        return Err(fail(AgentError::NoSeedEntities, trace));
    }
    trace.seed_entities = seeds.clone();

    let deadline = (config.question_timeout_secs > 0).then(|| {
        let budget = Duration::from_secs(config.question_timeout_secs);
        (Instant::now() + budget, budget)
    });
    let mut state = Run {
        question,
        seeds: &seeds,
        kg,
        providers,
        config,
        deadline,
        memory: Memory::new(),
        history: ActionHistory::new(),
        trace,
    };
    match state.drive() {
        Ok((answers, halted_by)) => {
            state.trace.halted_by = Some(halted_by);
            Ok(AgentResult {
                answers,
                halted_by,
                memory: state.memory,
                trace: state.trace,
            })
        }
        Err(e) => Err(fail(e, state.trace)),
    }
}

/// Replaces every labeled id token in `text` with its label.
fn substitute_labels(kg: &KnowledgeGraph, text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut token = String::new();
    let flush = |token: &mut String, out: &mut String| {
        if !token.is_empty() {
            if kg.has_label(token) {
                out.push_str(kg.label_of(token));
            } else {
                out.push_str(token);
            }
            token.clear();
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            token.push(c);
        } else {
            flush(&mut token, &mut out);
            out.push(c);
        }
    }
    flush(&mut token, &mut out);
    out
}

/// Human-readable transcript of a trace with ids replaced by labels.
pub fn render_case(trace: &AgentTrace, kg: &KnowledgeGraph) -> String {
    if trace.iterations.is_empty() && trace.answer.is_none() {
        return String::new();
    }
    let mut out = format!("Question: {}\n", trace.question);
    for it in &trace.iterations {
        out.push_str(&format!("\nIteration {}\n", it.index));
        if let Some(accepted) = it.attempts.iter().rev().find(|a| a.error.is_none()) {
            if let Some(thought) = accepted
                .response
                .lines()
                .find_map(|l| l.trim().strip_prefix("Thought:"))
            {
                out.push_str(&format!("Thought: {}\n", substitute_labels(kg, thought.trim())));
            }
        }
        out.push_str(&format!("Action: {}\n", substitute_labels(kg, &it.action.to_string())));
        if let Some(r) = &it.reflection {
            let triples: Vec<String> = r
                .result
                .kept
                .iter()
                .map(|t| crate::memory::render_triple(kg, t))
                .chain(r.facts.iter().cloned())
                .collect();
            out.push_str(&format!("Reflection: {}\n", triples.join(", ")));
        }
    }
    if let Some(a) = &trace.answer {
        out.push_str(&format!("\nAnswer: {}\n", a.answers.join(", ")));
    }
    if let Some(e) = &trace.error {
        out.push_str(&format!("\nError: {e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;
    use crate::llm::ScriptEntry;

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple::parse(h, r, tl).unwrap()
    }

    fn e(s: &str) -> EntityId {
        EntityId::new(s).unwrap()
    }

    fn chain_kg() -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::from_triples((0..30).map(|i| t(&format!("N{i}"), "next", &format!("N{}", i + 1))));
        for i in 0..=30 {
            kg.set_label(format!("N{i}"), format!("node {i}"));
        }
        kg.set_label("next", "next");
        kg
    }

    fn providers(entries: Vec<ScriptEntry>) -> Providers {
        Providers::new(Arc::new(ScriptedModel::stateless(entries)), Embedder::hashed(1, 16).unwrap())
    }

    #[test]
    fn defaults() {
        let c = AgentConfig::default();
        assert_eq!(c.max_iterations, 8);
        assert_eq!(c.path_max_len, 3);
        assert_eq!(c.reflection.k_max, 15);
        assert_eq!(c.completion.max_tokens, 500);
    }

    #[test]
    fn always_neighbor_hits_cap() {
        let kg = chain_kg();
        let p = providers(vec![
            ScriptEntry::substring("Agent Instructions:", "Thought: go\nAction: GetNeighbor\nEntity_id: N0"),
            ScriptEntry::substring("select related triples", "Thought: keep\nTriples:\nN0,next,N1"),
            ScriptEntry::substring("reference memory", "node 1"),
        ]);
        let r = run("where?", &[e("N0")], &kg, &p, &AgentConfig::default()).unwrap();
        assert_eq!(r.halted_by, HaltReason::IterationCap);
        assert_eq!(r.trace.iterations.len(), 8);
        assert!(r.trace.iterations.iter().enumerate().all(|(i, it)| it.index == i + 1));
        assert!(r.trace.iterations[1].fallback);
        assert_eq!(r.answers, vec!["node 1"]);
        assert!(r.memory.triple_count() <= 8 * 15);
    }

    #[test]
    fn empty_reflection_keeps_entities() {
        let kg = chain_kg();
        let p = providers(vec![
            ScriptEntry::substring("Agent Instructions:", "Action: GetNeighbor\nEntity_id: N0"),
            ScriptEntry::substring("select related triples", "nothing"),
            ScriptEntry::substring("reference memory", "unknown"),
        ]);
        let config = AgentConfig {
            max_iterations: 2,
            ..Default::default()
        };
        let r = run("q", &[e("N0")], &kg, &p, &config).unwrap();
        assert_eq!(r.trace.iterations[1].entities, vec![e("N0")]);
        assert!(r.memory.is_empty());
    }

    #[test]
    fn provider_error_keeps_partial_trace() {
        let kg = chain_kg();
        let p = providers(vec![ScriptEntry::substring(
            "Agent Instructions:",
            "Action: GetNeighbor\nEntity_id: N0",
        )]);
        let err = run("q", &[e("N0")], &kg, &p, &AgentConfig::default()).unwrap_err();
        assert!(matches!(err.error, AgentError::Llm(LlmError::ScriptExhausted { .. })));
        assert_eq!(err.trace.iterations.len(), 1);
        assert!(err.trace.error.is_some());
    }

    #[test]
    fn rejects_empty_seeds() {
        let kg = chain_kg();
        let err = run("q", &[], &kg, &providers(vec![]), &AgentConfig::default()).unwrap_err();
        assert!(matches!(err.error, AgentError::NoSeedEntities));
    }

    #[test]
    fn random_seed_depends_on_text_only() {
        assert_eq!(random_reflection_seed(0, "a", 1), random_reflection_seed(0, "a", 1));
        assert_ne!(random_reflection_seed(0, "a", 1), random_reflection_seed(0, "a", 2));
        assert_ne!(random_reflection_seed(0, "a", 1), random_reflection_seed(0, "b", 1));
        assert_ne!(random_reflection_seed(0, "a", 1), random_reflection_seed(1, "a", 1));
    }

    #[test]
    fn substitution_respects_token_boundaries() {
        let mut kg = KnowledgeGraph::new();
        kg.set_label("Q1", "one");
        kg.set_label("Q17", "Japan");
        assert_eq!(substitute_labels(&kg, "GetNeighbor(Q17), Q1 and Q170"), "GetNeighbor(Japan), one and Q170");
    }

    #[test]
    fn render_empty_trace() {
        assert_eq!(render_case(&AgentTrace::new("q", &[]), &KnowledgeGraph::new()), "");
    }
}
