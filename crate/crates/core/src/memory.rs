//! Agent memory: an ordered network of triple chains.

use serde::{Deserialize, Serialize};

use crate::kg::{KnowledgeGraph, Triple};

/// A chain of triples where each link's tail is the next link's head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPath {
    links: Vec<Triple>,
}

impl MemoryPath {
    fn start(triple: Triple) -> Self {
        Self {
            links: vec![triple],
        }
    }

    pub fn links(&self) -> &[Triple] {
        &self.links
    }

    pub fn last(&self) -> &Triple {
        self.links.last().expect("memory paths are never empty")
    }

    pub fn is_chained(&self) -> bool {
        !self.links.is_empty() && self.links.windows(2).all(|w| w[0].tail == w[1].head)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    paths: Vec<MemoryPath>,
    /// Free-text facts, only populated by the generated-fact reflection
    /// ablation. Kept apart so path chaining is never violated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    facts: Vec<String>,
}

/// One line of a memory snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub path: usize,
    pub link: usize,
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn paths(&self) -> &[MemoryPath] {
        &self.paths
    }

    pub fn facts(&self) -> &[String] {
        &self.facts
    }

    pub fn triple_count(&self) -> usize {
        self.paths.iter().map(|p| p.links.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty() && self.facts.is_empty()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.paths.iter().flat_map(|p| p.links.iter())
    }

    /// Files each reflected triple, in order, onto the first path whose last
    /// tail is the triple's head, or starts a new path. A triple equal to the
    /// last link of some path is already stored there and is skipped.
    pub fn integrate<'a>(&mut self, reflected: impl IntoIterator<Item = &'a Triple>) {
        for triple in reflected {
            if self.paths.iter().any(|p| p.last() == triple) {
                continue;
            }
            match self.paths.iter_mut().find(|p| p.last().tail == triple.head) {
                Some(path) => path.links.push(triple.clone()),
                None => self.paths.push(MemoryPath::start(triple.clone())),
            }
        }
    }

    pub fn add_facts(&mut self, facts: impl IntoIterator<Item = String>) {
        self.facts.extend(facts);
    }

    /// One line per path, links rendered `(head, relation, tail)` with labels
    /// and joined by ` -> `. Free-text facts follow, one per line.
    pub fn render(&self, kg: &KnowledgeGraph) -> String {
        let mut lines: Vec<String> = self
            .paths
            .iter()
            .map(|p| {
                p.links
                    .iter()
                    .map(|t| render_triple(kg, t))
                    .collect::<Vec<_>>()
                    .join(" -> ")
            })
            .collect();
        lines.extend(self.facts.iter().cloned());
        lines.join("\n")
    }

    pub fn snapshot(&self) -> Vec<MemoryRecord> {
        self.paths
            .iter()
            .enumerate()
            .flat_map(|(path, p)| {
                p.links.iter().enumerate().map(move |(link, t)| MemoryRecord {
                    path,
                    link,
                    head: t.head.to_string(),
                    relation: t.relation.to_string(),
                    tail: t.tail.to_string(),
                })
            })
            .collect()
    }

    /// Line-delimited JSON snapshot, one record per link.
    pub fn to_jsonl(&self) -> String {
        self.snapshot()
            .iter()
            .map(|r| serde_json::to_string(r).expect("memory record serializes") + "\n")
            .collect()
    }
}

/// `(headLabel, relationLabel, tailLabel)`, falling back to raw ids.
pub fn render_triple(kg: &KnowledgeGraph, t: &Triple) -> String {
    format!(
        "({}, {}, {})",
        kg.label_of(t.head.as_str()),
        kg.label_of(t.relation.as_str()),
        kg.label_of(t.tail.as_str())
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple::parse(h, r, tl).unwrap()
    }

    fn goethe_kg() -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new();
        for (id, label) in [
            ("Q5879", "Johann Wolfgang von Goethe"),
            ("P451", "unmarried Partner"),
            ("Q98776", "Lili Schöneman"),
            ("P19", "place of birth"),
            ("Q3042", "Offenbach am Main"),
        ] {
            kg.set_label(id, label);
        }
        kg
    }

    #[test]
    fn goethe_chain_extends_one_path() {
        let mut m = Memory::new();
        m.integrate(&[t("Q5879", "P451", "Q98776")]);
        assert_eq!(m.paths().len(), 1);
        m.integrate(&[t("Q98776", "P19", "Q3042")]);
        assert_eq!(m.paths().len(), 1);
        assert_eq!(m.paths()[0].links().len(), 2);
        assert_eq!(
            m.render(&goethe_kg()),
            "(Johann Wolfgang von Goethe, unmarried Partner, Lili Schöneman) -> (Lili Schöneman, place of birth, Offenbach am Main)"
        );
    }

    #[test]
    fn first_matching_path_wins() {
        let mut m = Memory::new();
        m.integrate(&[t("A", "r", "X"), t("B", "r", "X")]);
        m.integrate(&[t("X", "s", "Y")]);
        assert_eq!(m.paths()[0].links().len(), 2);
        assert_eq!(m.paths()[1].links().len(), 1);
    }

    #[test]
    fn unmatched_triple_opens_new_path() {
        let mut m = Memory::new();
        m.integrate(&[t("A", "r", "B")]);
        m.integrate(&[t("C", "r", "D")]);
        assert_eq!(m.paths().len(), 2);
    }

    #[test]
    fn only_path_ends_match() {
        let mut m = Memory::new();
        m.integrate(&[t("A", "r", "B"), t("B", "r", "C")]);
        m.integrate(&[t("B", "s", "Z")]);
        assert_eq!(m.paths().len(), 2);
    }

    #[test]
    fn duplicate_last_link_is_skipped() {
        let mut m = Memory::new();
        m.integrate(&[t("A", "r", "B"), t("A", "r", "B")]);
        assert_eq!(m.triple_count(), 1);
        m.integrate(&[t("A", "r", "A"), t("A", "r", "A")]);
        assert_eq!(m.triple_count(), 2);
    }

    #[test]
    fn render_empty_and_unlabeled() {
        let kg = KnowledgeGraph::new();
        assert_eq!(Memory::new().render(&kg), "");
        let mut m = Memory::new();
        m.integrate(&[t("Q1", "P2", "Q3")]);
        assert_eq!(m.render(&kg), "(Q1, P2, Q3)");
    }

    #[test]
    fn facts_render_after_paths() {
        let kg = KnowledgeGraph::new();
        let mut m = Memory::new();
        m.add_facts(["Tokyo is the capital of Japan".to_string()]);
        assert_eq!(m.render(&kg), "Tokyo is the capital of Japan");
        assert_eq!(m.triple_count(), 0);
    }

    #[test]
    fn snapshot_lines() {
        let mut m = Memory::new();
        m.integrate(&[t("A", "r", "B"), t("B", "s", "C")]);
        assert_eq!(
            m.to_jsonl(),
            "{\"path\":0,\"link\":0,\"head\":\"A\",\"relation\":\"r\",\"tail\":\"B\"}\n\
             {\"path\":0,\"link\":1,\"head\":\"B\",\"relation\":\"s\",\"tail\":\"C\"}\n"
        );
    }
}
