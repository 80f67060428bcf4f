#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kgscout_core::agent::{self, AgentConfig, AgentResult, Providers};
use kgscout_core::eval::{load_dataset_file, DatasetRecord};
use kgscout_core::llm::{Script, ScriptedModel};
use kgscout_core::{Embedder, EntityId, KnowledgeGraph, Triple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "capital", "river", "author", "city", "country", "mountain", "novel", "born", "located", "member",
    "spouse", "genre", "language", "border", "founded", "island", "painter", "composer", "lake", "museum",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn t(h: &str, r: &str, tl: &str) -> Triple {
    Triple::parse(h, r, tl).unwrap()
}

pub fn e(s: &str) -> EntityId {
    EntityId::new(s).unwrap()
}

pub fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=3);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Random directed multigraph with `nodes` entities `E0..`, a relation
/// count drawn from `relations` and an edge count drawn from `edges`
/// (duplicates collapse). Most ids get a random label; a few stay unlabeled.
pub fn random_kg(
    rng: &mut ChaCha8Rng,
    nodes: usize,
    relations: std::ops::Range<usize>,
    edges: std::ops::Range<usize>,
) -> KnowledgeGraph {
    let relations = rng.random_range(relations);
    let edges = rng.random_range(edges);
    let mut kg = KnowledgeGraph::new();
    for _ in 0..edges {
        let h = rng.random_range(0..nodes);
        let r = rng.random_range(0..relations);
        let tl = rng.random_range(0..nodes);
        kg.insert(t(&format!("E{h}"), &format!("R{r}"), &format!("E{tl}")));
    }
    for i in 0..nodes {
        if rng.random_bool(0.9) {
            let label = phrase(rng);
            kg.set_label(format!("E{i}"), label);
        }
    }
    for i in 0..relations {
        if rng.random_bool(0.9) {
            let label = phrase(rng);
            kg.set_label(format!("R{i}"), label);
        }
    }
    kg
}

pub fn random_seeds(rng: &mut ChaCha8Rng, nodes: usize, count: std::ops::Range<usize>) -> Vec<EntityId> {
    let count = rng.random_range(count);
    (0..count).map(|_| e(&format!("E{}", rng.random_range(0..nodes)))).collect()
}

// ---------------------------------------------------------------- fixtures

pub fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.trace.json"))
}

pub struct Fixture {
    pub kg: KnowledgeGraph,
    pub record: DatasetRecord,
    pub script: Script,
}

pub fn fixture(name: &str) -> Fixture {
    let dir = fixture_dir(name);
    let kg = KnowledgeGraph::load_dir(&dir).unwrap();
    let record = load_dataset_file(dir.join("dataset.jsonl")).unwrap().remove(0);
    let script = Script::load(dir.join("script.toml")).unwrap();
    Fixture { kg, record, script }
}

pub fn fixture_providers(script: Script) -> Providers {
    Providers::new(Arc::new(ScriptedModel::new(script)), Embedder::hashed(0, 64).unwrap())
}

/// Replays a fixture's script through the agent with default settings.
pub fn run_fixture(name: &str) -> (AgentResult, KnowledgeGraph) {
    let f = fixture(name);
    let providers = fixture_providers(f.script);
    let result = agent::run(&f.record.question, &f.record.entities, &f.kg, &providers, &AgentConfig::default())
        .unwrap_or_else(|failure| panic!("{name}: {}", failure.error));
    (result, f.kg)
}

// ----------------------------------------------------------------- oracles

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn oracle_label<'a>(kg: &'a KnowledgeGraph, id: &'a str) -> &'a str {
    if kg.has_label(id) {
        kg.label_of(id)
    } else {
        id
    }
}

/// Question similarity of a triple's relation and tail labels, computed from
/// raw vectors.
pub fn oracle_score(kg: &KnowledgeGraph, embedder: &Embedder, question: &[f64], tr: &Triple) -> f64 {
    let text = format!(
        "{} {}",
        oracle_label(kg, tr.relation.as_str()),
        oracle_label(kg, tr.tail.as_str())
    );
    let v = embedder.embed(&text).unwrap();
    oracle_cosine(question, v.components())
}

/// Outgoing triples of `entity` by scanning the whole store.
pub fn scan_neighbors(kg: &KnowledgeGraph, entity: &str) -> Vec<Triple> {
    kg.triples().iter().filter(|t| t.head.as_str() == entity).cloned().collect()
}

/// Level-by-level observation with integer refine percent, seeds in order.
pub fn oracle_observe(
    kg: &KnowledgeGraph,
    question: &str,
    seeds: &[EntityId],
    depth: usize,
    top_n: usize,
    refine_percent: usize,
    embedder: &Embedder,
) -> Vec<(Triple, f64)> {
    let q = embedder.embed(question).unwrap().components().to_vec();
    let refine = ((refine_percent * top_n).div_ceil(100)).clamp(1, top_n);
    let mut out: Vec<(Triple, f64)> = Vec::new();
    let mut done_seeds = HashSet::new();
    for seed in seeds {
        if !done_seeds.insert(seed.clone()) {
            continue;
        }
        let mut visited = HashSet::from([seed.to_string()]);
        let mut frontier = vec![seed.to_string()];
        for _ in 0..depth {
            if frontier.is_empty() {
                break;
            }
            let mut cands: Vec<(Triple, f64)> = frontier
                .iter()
                .flat_map(|f| scan_neighbors(kg, f))
                .map(|tr| {
                    let s = oracle_score(kg, embedder, &q, &tr);
                    (tr, s)
                })
                .collect();
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cands.truncate(top_n);
            for (tr, s) in &cands {
                if !out.iter().any(|(o, _)| o == tr) {
                    out.push((tr.clone(), *s));
                }
            }
            let mut next = Vec::new();
            for (tr, _) in cands.iter().take(refine) {
                if visited.insert(tr.tail.to_string()) {
                    next.push(tr.tail.to_string());
                }
            }
            frontier = next;
        }
    }
    out
}

/// Every triple sequence of length `1..=max_len` that forms a directed
/// simple path from `from` to `to`.
pub fn oracle_paths(kg: &KnowledgeGraph, from: &str, to: &str, max_len: usize) -> Vec<Vec<Triple>> {
    fn grow(kg: &KnowledgeGraph, seq: &mut Vec<Triple>, max_len: usize, all: &mut Vec<Vec<Triple>>) {
        all.push(seq.clone());
        if seq.len() == max_len {
            return;
        }
        let last_tail = seq.last().unwrap().tail.clone();
        for tr in kg.triples() {
            if tr.head == last_tail {
                seq.push(tr.clone());
                grow(kg, seq, max_len, all);
                seq.pop();
            }
        }
    }
    let mut all = Vec::new();
    for tr in kg.triples() {
        let mut seq = vec![tr.clone()];
        grow(kg, &mut seq, max_len, &mut all);
    }
    let mut keep: Vec<Vec<Triple>> = all
        .into_iter()
        .filter(|p| {
            if p[0].head.as_str() != from || p.last().unwrap().tail.as_str() != to {
                return false;
            }
            let inner: Vec<&str> = p[..p.len() - 1].iter().map(|tr| tr.tail.as_str()).collect();
            let distinct: HashSet<&str> = inner.iter().copied().collect();
            distinct.len() == inner.len() && !inner.contains(&from) && !inner.contains(&to)
        })
        .collect();
    keep.sort();
    keep
}

/// Triples whose head lies fewer than `k` steps from a seed, in load order.
pub fn oracle_khop(kg: &KnowledgeGraph, seeds: &[EntityId], k: usize) -> Vec<Triple> {
    let mut dist: HashMap<String, usize> = seeds.iter().map(|s| (s.to_string(), 0)).collect();
    for step in 0..k {
        let mut changed = false;
        for tr in kg.triples() {
            if dist.get(tr.head.as_str()) == Some(&step) && !dist.contains_key(tr.tail.as_str()) {
                dist.insert(tr.tail.to_string(), step + 1);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    kg.triples()
        .iter()
        .filter(|tr| dist.get(tr.head.as_str()).is_some_and(|d| *d < k))
        .cloned()
        .collect()
}

pub type Chain = Vec<(String, String, String)>;

/// Files a stream of triples into chains one at a time.
pub fn oracle_memory(stream: &[Triple]) -> Vec<Chain> {
    let mut chains: Vec<Chain> = Vec::new();
    for tr in stream {
        let key = (tr.head.to_string(), tr.relation.to_string(), tr.tail.to_string());
        if chains.iter().any(|c| c[c.len() - 1] == key) {
            continue;
        }
        let mut placed = false;
        for c in chains.iter_mut() {
            if c[c.len() - 1].2 == key.0 {
                c.push(key.clone());
                placed = true;
                break;
            }
        }
        if !placed {
            chains.push(vec![key]);
        }
    }
    chains
}

/// The `k` most question-similar distinct candidates.
pub fn oracle_top_k(
    kg: &KnowledgeGraph,
    question: &str,
    candidates: &[Triple],
    k: usize,
    embedder: &Embedder,
) -> Vec<Triple> {
    let q = embedder.embed(question).unwrap().components().to_vec();
    let mut distinct: Vec<Triple> = Vec::new();
    for c in candidates {
        if !distinct.contains(c) {
            distinct.push(c.clone());
        }
    }
    let mut scored: Vec<(Triple, f64)> = distinct
        .into_iter()
        .map(|tr| {
            let s = oracle_score(kg, embedder, &q, &tr);
            (tr, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(tr, _)| tr).collect()
}

/// Upper-tail chi-square critical value by the Wilson-Hilferty cube
/// approximation, for the standard normal quantile `z`.
pub fn chi_square_critical(df: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

/// Standard normal 0.99 quantile.
pub const Z_99: f64 = 2.3263478740408408;

pub fn chi_square_statistic(observed: &[u64], expected: f64) -> f64 {
    observed.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum()
}

pub fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}
