//! Knowledge-graph question answering with an observe, act, reflect agent.
//!
//! [`kg`] holds the triple store, [`observation`] scores the neighborhood of
//! the current entities against the question, [`action`] and [`reflection`]
//! drive the model, [`memory`] accumulates chained evidence, and [`agent`]
//! ties them into the per-question loop. [`eval`] runs datasets through it.

pub mod action;
pub mod agent;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod kg;
pub mod llm;
pub mod memory;
pub mod observation;
pub mod prompt;
pub mod reflection;
pub mod retry;

pub use agent::{run, AgentConfig, AgentResult, AgentTrace, HaltReason, Providers};
pub use config::Settings;
pub use embedding::Embedder;
pub use eval::{DatasetRecord, EvalReport, MatchPolicy};
pub use kg::{EntityId, KnowledgeGraph, RelationId, Triple};
pub use memory::Memory;
pub use observation::{ObservationParams, ObservationSubgraph};
pub use reflection::{ReflectionParams, ReflectionStrategy};
