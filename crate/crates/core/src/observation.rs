//! Recursive depth-limited observation.
//!
//! For every task-relevant entity the observer runs up to `depth_limit`
//! update/refine turns. A turn scores every outgoing triple of the current
//! frontier against the question, appends the best `top_n` to the
//! observation subgraph, and carries the tails of the best
//! `ceil(refine_percent% * top_n)` forward as the next frontier.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, Embedder, Vector};
use crate::kg::{EntityId, KnowledgeGraph, Triple};

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("invalid observation parameters: {0}")]
    InvalidParams(String),
    #[error("observation needs at least one entity")]
    NoEntities,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Whether the top-N pool is formed per seed entity or across all seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    PerSeed,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationParams {
    /// Maximum hop depth D.
    pub depth_limit: usize,
    /// Triples appended per turn, N.
    pub top_n: usize,
    /// Share of the top-N whose tails seed the next turn, P in (0, 100].
    pub refine_percent: f64,
    pub pool: PoolMode,
    /// Optional cap on neighbors fetched per frontier entity.
    pub neighbor_limit: Option<usize>,
}

impl Default for ObservationParams {
    fn default() -> Self {
        Self {
            depth_limit: 3,
            top_n: 50,
            refine_percent: 10.0,
            pool: PoolMode::PerSeed,
            neighbor_limit: None,
        }
    }
}

impl ObservationParams {
    pub fn validate(&self) -> Result<(), ObservationError> {
        if self.depth_limit == 0 {
            return Err(ObservationError::InvalidParams("depth_limit must be positive".into()));
        }
        if self.top_n == 0 {
            return Err(ObservationError::InvalidParams("top_n must be positive".into()));
        }
        if !(self.refine_percent > 0.0 && self.refine_percent <= 100.0) {
            return Err(ObservationError::InvalidParams(format!(
                "refine_percent must be in (0, 100], got {}",
                self.refine_percent
            )));
        }
        Ok(())
    }

    /// Number of sorted triples whose tails form the next frontier.
    pub fn refine_count(&self) -> usize {
        let raw = (self.refine_percent * self.top_n as f64 / 100.0).ceil() as usize;
        raw.clamp(1, self.top_n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriple {
    pub triple: Triple,
    pub score: f64,
    pub depth: usize,
    pub seed: EntityId,
}

/// Ordered, deduplicated set of scored triples produced by one observation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<ScoredTriple>", into = "Vec<ScoredTriple>")]
pub struct ObservationSubgraph {
    entries: Vec<ScoredTriple>,
    index: HashSet<Triple>,
}

impl From<Vec<ScoredTriple>> for ObservationSubgraph {
    fn from(entries: Vec<ScoredTriple>) -> Self {
        let mut sub = Self::default();
        for e in entries {
            sub.push(e);
        }
        sub
    }
}

impl From<ObservationSubgraph> for Vec<ScoredTriple> {
    fn from(sub: ObservationSubgraph) -> Self {
        sub.entries
    }
}

impl ObservationSubgraph {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ScoredTriple] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.index.contains(triple)
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.entries.iter().map(|e| &e.triple)
    }

    fn push(&mut self, entry: ScoredTriple) -> bool {
        if !self.index.insert(entry.triple.clone()) {
            return false;
        }
        self.entries.push(entry);
        true
    }
}

/// Record of one update/refine turn, for tracing and golden tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// Seed whose loop ran this turn; `None` in global-pool mode.
    pub seed: Option<EntityId>,
    pub depth: usize,
    pub candidate_count: usize,
    pub appended: Vec<(Triple, f64)>,
    pub frontier: Vec<EntityId>,
}

/// One JSON object per turn, newline-terminated.
pub fn turns_to_jsonl(turns: &[TurnRecord]) -> String {
    turns
        .iter()
        .map(|t| serde_json::to_string(t).expect("turn record serializes") + "\n")
        .collect()
}

/// Descending score, then ascending triple.
/// A candidate triple and its question similarity.
type Scored = (Triple, f64);

fn rank(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

struct Observer<'a> {
    kg: &'a KnowledgeGraph,
    params: &'a ObservationParams,
    embedder: &'a Embedder,
    question: Vector,
    subgraph: ObservationSubgraph,
    turns: Vec<TurnRecord>,
}

impl Observer<'_> {
    fn score_frontier<'f>(
        &self,
        frontier: impl Iterator<Item = &'f EntityId>,
    ) -> Result<Vec<(Triple, f64)>, EmbeddingError> {
        let mut scored = Vec::new();
        for entity in frontier {
            for t in self.kg.neighbors(entity.as_str()).take(self.params.neighbor_limit.unwrap_or(usize::MAX)) {
                let score = self.embedder.score_candidate(
                    &self.question,
                    self.kg.label_of(t.relation.as_str()),
                    self.kg.label_of(t.tail.as_str()),
                )?;
                scored.push((t.clone(), score));
            }
        }
        scored.sort_by(rank);
        Ok(scored)
    }

    /// Appends the top-N of `sorted` and returns the top refine-count slice.
    fn select<'s>(
        &mut self,
        sorted: &'s [(Triple, f64)],
        depth: usize,
        seed_of: impl Fn(&Triple) -> EntityId,
    ) -> (Vec<Scored>, &'s [Scored]) {
        let top = &sorted[..sorted.len().min(self.params.top_n)];
        let mut appended = Vec::new();
        for (t, score) in top {
            let entry = ScoredTriple {
                triple: t.clone(),
                score: *score,
                depth,
                seed: seed_of(t),
            };
            if self.subgraph.push(entry) {
                appended.push((t.clone(), *score));
            }
        }
        let refined = &top[..top.len().min(self.params.refine_count())];
        (appended, refined)
    }

    fn run_seed(&mut self, seed: &EntityId) -> Result<(), EmbeddingError> {
        let mut visited: HashSet<EntityId> = HashSet::from([seed.clone()]);
        let mut frontier = vec![seed.clone()];
        for depth in 0..self.params.depth_limit {
            if frontier.is_empty() {
                break;
            }
            let sorted = self.score_frontier(frontier.iter())?;
            let (appended, refined) = self.select(&sorted, depth, |_| seed.clone());
            let next: Vec<EntityId> = refined
                .iter()
                .filter(|(t, _)| visited.insert(t.tail.clone()))
                .map(|(t, _)| t.tail.clone())
                .collect();
            self.turns.push(TurnRecord {
                seed: Some(seed.clone()),
                depth,
                candidate_count: sorted.len(),
                appended,
                frontier: next.clone(),
            });
            frontier = next;
        }
        Ok(())
    }

    fn run_global(&mut self, seeds: &[EntityId]) -> Result<(), EmbeddingError> {
        // Each frontier entity remembers the seed it was first reached from.
        let mut origin: HashMap<EntityId, EntityId> = HashMap::new();
        let mut frontier = Vec::new();
        for s in seeds {
            if !origin.contains_key(s) {
                origin.insert(s.clone(), s.clone());
                frontier.push(s.clone());
            }
        }
        for depth in 0..self.params.depth_limit {
            if frontier.is_empty() {
                break;
            }
            let sorted = self.score_frontier(frontier.iter())?;
            let snapshot = origin.clone();
            let (appended, refined) = self.select(&sorted, depth, |t| snapshot[&t.head].clone());
            let mut next = Vec::new();
            for (t, _) in refined {
                if !origin.contains_key(&t.tail) {
                    origin.insert(t.tail.clone(), snapshot[&t.head].clone());
                    next.push(t.tail.clone());
                }
            }
            self.turns.push(TurnRecord {
                seed: None,
                depth,
                candidate_count: sorted.len(),
                appended,
                frontier: next.clone(),
            });
            frontier = next;
        }
        Ok(())
    }
}

/// Builds the observation subgraph for `question` around `entities`.
pub fn observe(
    kg: &KnowledgeGraph,
    question: &str,
    entities: &[EntityId],
    params: &ObservationParams,
    embedder: &Embedder,
) -> Result<ObservationSubgraph, ObservationError> {
    observe_traced(kg, question, entities, params, embedder).map(|(sub, _)| sub)
}

/// Like [`observe`], also returning the per-turn records.
pub fn observe_traced(
    kg: &KnowledgeGraph,
    question: &str,
    entities: &[EntityId],
    params: &ObservationParams,
    embedder: &Embedder,
) -> Result<(ObservationSubgraph, Vec<TurnRecord>), ObservationError> {
    params.validate()?;
    if entities.is_empty() {
        return Err(ObservationError::NoEntities);
    }
    let mut observer = Observer {
        kg,
        params,
        embedder,
        question: embedder.embed(question)?,
        subgraph: ObservationSubgraph::empty(),
        turns: Vec::new(),
    };
    match params.pool {
        PoolMode::PerSeed => {
            let mut seen = HashSet::new();
            for seed in entities.iter().filter(|e| seen.insert(*e)) {
                observer.run_seed(seed)?;
            }
        }
        PoolMode::Global => observer.run_global(entities)?,
    }
    Ok((observer.subgraph, observer.turns))
}
