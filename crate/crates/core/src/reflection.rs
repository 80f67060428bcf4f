//! Reflection: choosing which action-output triples enter memory.
//!
//! The default strategy asks the model to pick up to K triples, guided by
//! the observation subgraph and current memory. The ablation strategies
//! replace that choice with similarity ranking, random sampling, or
//! model-generated free-text facts.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{render_labels, render_observation};
use crate::embedding::{EmbeddingError, Embedder};
use crate::kg::{EntityId, KnowledgeGraph, Triple};
use crate::llm::{CompletionDefaults, CompletionRequest, LanguageModel, LlmError};
use crate::memory::{render_triple, Memory};
use crate::observation::ObservationSubgraph;
use crate::prompt::PromptTemplates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionStrategy {
    /// Model-selected triples guided by observation and memory.
    #[default]
    Oda,
    Similarity,
    Random,
    GeneratedFact,
    /// Model-selected triples with observation disabled everywhere.
    NoObservation,
}

impl ReflectionStrategy {
    pub const ALL: [ReflectionStrategy; 5] = [
        ReflectionStrategy::Oda,
        ReflectionStrategy::Similarity,
        ReflectionStrategy::Random,
        ReflectionStrategy::GeneratedFact,
        ReflectionStrategy::NoObservation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReflectionStrategy::Oda => "oda",
            ReflectionStrategy::Similarity => "similarity",
            ReflectionStrategy::Random => "random",
            ReflectionStrategy::GeneratedFact => "generated_fact",
            ReflectionStrategy::NoObservation => "no_observation",
        }
    }

    pub fn uses_observation(&self) -> bool {
        !matches!(self, ReflectionStrategy::NoObservation)
    }
}

impl fmt::Display for ReflectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReflectionStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown reflection strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectionParams {
    /// Maximum reflected triples per iteration, K.
    pub k_max: usize,
    pub strategy: ReflectionStrategy,
}

impl Default for ReflectionParams {
    fn default() -> Self {
        Self {
            k_max: 15,
            strategy: ReflectionStrategy::Oda,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionResult {
    pub kept: Vec<Triple>,
    /// Deduplicated tails of `kept`, in order of first appearance.
    pub next_entities: Vec<EntityId>,
    /// Triads from the response that matched no candidate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<String>,
}

impl ReflectionResult {
    pub fn from_kept(kept: Vec<Triple>) -> Self {
        let mut seen = HashSet::new();
        let next_entities = kept
            .iter()
            .filter(|t| seen.insert(&t.tail))
            .map(|t| t.tail.clone())
            .collect();
        Self {
            kept,
            next_entities,
            rejected: Vec::new(),
        }
    }

    /// No triple survived; the agent keeps its previous entities.
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// `Q1,P1,Q2 = (label, label, label)` per candidate, `; `-separated.
pub fn render_candidates(kg: &KnowledgeGraph, candidates: &[Triple]) -> String {
    candidates
        .iter()
        .map(|t| format!("{},{},{} = {}", t.head, t.relation, t.tail, render_triple(kg, t)))
        .collect::<Vec<_>>()
        .join("; ")
}

pub struct ReflectionContext<'a> {
    pub question: &'a str,
    pub candidates: &'a [Triple],
    pub kg: &'a KnowledgeGraph,
    /// `None` drops the observation line entirely.
    pub observation: Option<&'a ObservationSubgraph>,
    pub memory: &'a Memory,
    pub k_max: usize,
}

pub fn build_reflection_prompt(templates: &PromptTemplates, ctx: &ReflectionContext<'_>) -> String {
    let triples = render_candidates(ctx.kg, ctx.candidates);
    let mut seen = HashSet::new();
    let ids: Vec<&str> = ctx
        .candidates
        .iter()
        .flat_map(|t| [t.head.as_str(), t.relation.as_str(), t.tail.as_str()])
        .filter(|id| seen.insert(*id))
        .collect();
    let labels = render_labels(ctx.kg, ids);
    let observation = ctx.observation.map(|o| render_observation(ctx.kg, o));
    let memory = ctx.memory.render(ctx.kg);
    let k = ctx.k_max.to_string();
    templates.reflection.render(&[
        ("triples", Some(&triples)),
        ("entities labels", Some(&labels)),
        ("Question", Some(ctx.question)),
        ("Observation", observation.as_deref()),
        ("Memory", Some(&memory)),
        ("K", Some(&k)),
    ])
}

/// Removes a leading `-`, `*`, `3.` or `3)` list marker.
fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix(['-', '*']) {
        return rest.trim_start();
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    line
}

/// Comma-separated triads in a reflection response. Thought lines are
/// skipped. Parenthesized groups may span lines; without parentheses each
/// line is one triad.
fn triads(response: &str) -> Vec<[String; 3]> {
    let mut body = Vec::new();
    for raw in response.lines() {
        let line = raw.replace("**", "");
        let trimmed = line.trim_start();
        let lower = trimmed.to_ascii_lowercase();
        if lower.starts_with("thought") {
            continue;
        }
        let rest = if lower.starts_with("triples:") {
            &trimmed["triples:".len()..]
        } else {
            trimmed
        };
        body.push(strip_list_marker(rest).to_string());
    }
    let joined = body.join("\n");
    let groups: Vec<String> = if joined.contains('(') {
        joined
            .split('(')
            .skip(1)
            .filter_map(|g| g.split_once(')').map(|(inner, _)| inner.replace('\n', " ")))
            .collect()
    } else {
        body
    };
    groups
        .iter()
        .filter_map(|g| {
            let parts: Vec<&str> = g
                .split(',')
                .map(|p| p.trim().trim_matches(|c| matches!(c, '"' | '\'' | '`')).trim())
                .collect();
            (parts.len() == 3 && parts.iter().all(|p| !p.is_empty()))
                .then(|| [parts[0].to_string(), parts[1].to_string(), parts[2].to_string()])
        })
        .collect()
}

/// Keeps the response's triads that are candidates (by id, or by labels
/// case-insensitively), deduplicated, in response order, at most `k_max`.
pub fn parse_reflected(
    response: &str,
    candidates: &[Triple],
    kg: &KnowledgeGraph,
    k_max: usize,
) -> ReflectionResult {
    let by_id: HashMap<(&str, &str, &str), &Triple> = candidates
        .iter()
        .map(|t| ((t.head.as_str(), t.relation.as_str(), t.tail.as_str()), t))
        .collect();
    let mut by_label: HashMap<(String, String, String), &Triple> = HashMap::new();
    for t in candidates {
        by_label
            .entry((
                kg.label_of(t.head.as_str()).to_lowercase(),
                kg.label_of(t.relation.as_str()).to_lowercase(),
                kg.label_of(t.tail.as_str()).to_lowercase(),
            ))
            .or_insert(t);
    }

    let mut kept = Vec::new();
    let mut seen = HashSet::new();
    let mut rejected = Vec::new();
    for [h, r, t] in triads(response) {
        let hit = by_id
            .get(&(h.as_str(), r.as_str(), t.as_str()))
            .or_else(|| by_label.get(&(h.to_lowercase(), r.to_lowercase(), t.to_lowercase())));
        match hit {
            Some(triple) => {
                if seen.insert(*triple) {
                    kept.push((*triple).clone());
                }
            }
            None => {
                tracing::debug!(triad = %format!("{h},{r},{t}"), "dropping non-candidate triple");
                rejected.push(format!("{h},{r},{t}"));
            }
        }
    }
    kept.truncate(k_max);
    ReflectionResult {
        rejected,
        ..ReflectionResult::from_kept(kept)
    }
}

/// Top-`k_max` candidates by question similarity of their relation/tail
/// text, ties broken by triple order.
pub fn reflect_similarity(
    question: &str,
    candidates: &[Triple],
    kg: &KnowledgeGraph,
    k_max: usize,
    embedder: &Embedder,
) -> Result<ReflectionResult, EmbeddingError> {
    let q = embedder.embed(question)?;
    let mut scored = candidates
        .iter()
        .map(|t| {
            embedder
                .score_candidate(&q, kg.label_of(t.relation.as_str()), kg.label_of(t.tail.as_str()))
                .map(|s| (t, s))
        })
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut seen = HashSet::new();
    let kept = scored
        .into_iter()
        .filter(|(t, _)| seen.insert(*t))
        .take(k_max)
        .map(|(t, _)| t.clone())
        .collect();
    Ok(ReflectionResult::from_kept(kept))
}

/// Uniform sample of `min(k_max, n)` candidates without replacement,
/// in sampled order.
pub fn reflect_random(candidates: &[Triple], k_max: usize, seed: u64) -> ReflectionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<&Triple> = candidates.iter().collect();
    let take = k_max.min(pool.len());
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    ReflectionResult::from_kept(pool.into_iter().take(take).cloned().collect())
}

pub fn build_generated_fact_prompt(templates: &PromptTemplates, question: &str, k_max: usize) -> String {
    let k = k_max.to_string();
    templates
        .generated_fact
        .render(&[("K", Some(&k)), ("Question", Some(question))])
}

/// Non-empty lines of the response with list markers removed, at most `k_max`.
pub fn parse_facts(response: &str, k_max: usize) -> Vec<String> {
    response
        .lines()
        .map(strip_list_marker)
        .filter(|l| !l.is_empty())
        .take(k_max)
        .map(str::to_string)
        .collect()
}

/// Asks the model for up to `k_max` question-related facts. The facts are
/// not checked against the KG.
pub fn reflect_generated_fact(
    templates: &PromptTemplates,
    question: &str,
    k_max: usize,
    llm: &dyn LanguageModel,
    settings: CompletionDefaults,
) -> Result<(String, Vec<String>), LlmError> {
    let prompt = build_generated_fact_prompt(templates, question, k_max);
    let response = llm.complete(&CompletionRequest::prompt(prompt, settings))?;
    let facts = parse_facts(&response, k_max);
    Ok((response, facts))
}
