//! Request and response bodies shared by the server and its clients.

use kgscout_core::agent::{AgentTrace, HaltReason};
use kgscout_core::eval::{DatasetRecord, MatchPolicy};
use kgscout_core::{EntityId, KnowledgeGraph, ObservationParams, ReflectionStrategy, Triple};
use serde::{Deserialize, Serialize};

/// Upper bound on `max_len` accepted from the network; path enumeration
/// grows exponentially with it.
pub const MAX_PATH_LEN: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub triples: usize,
    pub labels: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NeighborsQuery {
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsQuery {
    pub from: String,
    pub to: String,
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub triple: Triple,
    pub relation_label: String,
    pub tail_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityReport {
    pub id: EntityId,
    pub label: String,
    pub has_label: bool,
    pub out_degree: usize,
    pub neighbors: Vec<LabeledTriple>,
}

impl EntityReport {
    pub fn build(kg: &KnowledgeGraph, id: &EntityId, limit: Option<usize>) -> Self {
        let neighbors = kg
            .get_neighbors(id.as_str(), limit)
            .into_iter()
            .map(|t| LabeledTriple {
                relation_label: kg.label_of(t.relation.as_str()).to_string(),
                tail_label: kg.label_of(t.tail.as_str()).to_string(),
                triple: t,
            })
            .collect();
        Self {
            id: id.clone(),
            label: kg.label_of(id.as_str()).to_string(),
            has_label: kg.has_label(id.as_str()),
            out_degree: kg.out_degree(id.as_str()),
            neighbors,
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}\t{}\tout_degree={}\n", self.id, self.label, self.out_degree);
        for n in &self.neighbors {
            out.push_str(&format!(
                "{}\t{}\t{}\t({}, {})\n",
                n.triple.head, n.triple.relation, n.triple.tail, n.relation_label, n.tail_label
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObserveRequest {
    pub question: String,
    pub entities: Vec<EntityId>,
    #[serde(default)]
    pub params: Option<ObservationParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AskRequest {
    pub question: String,
    pub entities: Vec<EntityId>,
    #[serde(default)]
    pub strategy: Option<ReflectionStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub answers: Vec<String>,
    pub halted_by: Option<HaltReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub trace: AgentTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub records: Vec<DatasetRecord>,
    #[serde(default)]
    pub strategy: Option<ReflectionStrategy>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub match_policy: Option<MatchPolicy>,
}
