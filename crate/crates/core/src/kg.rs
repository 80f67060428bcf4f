//! Immutable-after-load triple store.
//!
//! Triples are directed `head -> tail` edges carrying a relation id. The
//! store keeps triples in load order, indexes them by head, and resolves
//! human-readable labels for entity and relation ids. Once built, a
//! [`KnowledgeGraph`] is only read, so it can be shared behind an `Arc`
//! across any number of concurrent agent runs.

use std::borrow::Borrow;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File name of the triples table inside a graph directory.
pub const TRIPLES_FILE: &str = "triples.tsv";
/// File name of the labels table inside a graph directory.
pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidId {
    #[error("identifier is empty")]
    Empty,
    #[error("identifier {0:?} contains a tab or newline")]
    ForbiddenChar(String),
}

fn validate_id(id: &str) -> Result<(), InvalidId> {
    if id.is_empty() {
        return Err(InvalidId::Empty);
    }
    if id.contains(['\t', '\n', '\r']) {
        return Err(InvalidId::ForbiddenChar(id.to_string()));
    }
    Ok(())
}

macro_rules! opaque_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(id: impl AsRef<str>) -> Result<Self, InvalidId> {
                let id = id.as_ref();
                validate_id(id)?;
                Ok(Self(Arc::from(id)))
            }

            fn from_interned(id: Arc<str>) -> Self {
                Self(id)
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", &*self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = InvalidId;
            fn try_from(value: String) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl TryFrom<&str> for $name {
            type Error = InvalidId;
            fn try_from(value: &str) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for String {
            fn from(value: $name) -> String {
                value.0.to_string()
            }
        }

        impl std::str::FromStr for $name {
            type Err = InvalidId;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }
    };
}

opaque_id!(
    /// Opaque entity identifier, e.g. a Wikidata Q-id.
    EntityId
);
opaque_id!(
    /// Opaque relation identifier, e.g. a Wikidata P-id.
    RelationId
);

/// One directed labeled edge. Ordering is lexicographic over
/// `(head, relation, tail)` and is used as the tiebreak everywhere a
/// deterministic order is needed.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// Builds a triple from raw strings, validating each id.
    pub fn parse(head: &str, relation: &str, tail: &str) -> Result<Self, InvalidId> {
        Ok(Self {
            head: EntityId::new(head)?,
            relation: RelationId::new(relation)?,
            tail: EntityId::new(tail)?,
        })
    }
}

impl fmt::Debug for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("line {line}: expected {expected} tab-separated fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {source}")]
    InvalidField {
        line: usize,
        #[source]
        source: InvalidId,
    },
    #[error("line {line}: input is not valid UTF-8")]
    Utf8 { line: usize },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Shares one allocation per distinct id string while loading.
#[derive(Default)]
struct Interner {
    strings: HashSet<Arc<str>>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> Arc<str> {
        if let Some(existing) = self.strings.get(s) {
            return existing.clone();
        }
        let arc: Arc<str> = Arc::from(s);
        self.strings.insert(arc.clone());
        arc
    }
}

/// Reads `source` line by line, handing each non-blank line (without its
/// terminator) and its 1-based number to `f`.
fn for_each_line<R: BufRead>(
    mut source: R,
    mut f: impl FnMut(usize, &str) -> Result<(), KgError>,
) -> Result<(), KgError> {
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if source.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        line_no += 1;
        let line = std::str::from_utf8(&buf).map_err(|_| KgError::Utf8 { line: line_no })?;
        let line = line.strip_suffix('\n').unwrap_or(line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        f(line_no, line)?;
    }
}

/// The knowledge-graph environment the agent observes and acts on.
#[derive(Clone, Default)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    index: HashSet<Triple>,
    adjacency: HashMap<EntityId, Vec<u32>>,
    labels: HashMap<String, String>,
}

impl fmt::Debug for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeGraph")
            .field("triples", &self.triples.len())
            .field("heads", &self.adjacency.len())
            .field("labels", &self.labels.len())
            .finish()
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from triples, collapsing duplicates and keeping the
    /// first-seen order.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut kg = Self::new();
        for t in triples {
            kg.insert(t);
        }
        kg
    }

    /// Inserts a triple; returns `false` if it was already present.
    pub fn insert(&mut self, triple: Triple) -> bool {
        if self.index.contains(&triple) {
            return false;
        }
        let idx = u32::try_from(self.triples.len()).expect("more than u32::MAX triples");
        self.adjacency
            .entry(triple.head.clone())
            .or_default()
            .push(idx);
        self.index.insert(triple.clone());
        self.triples.push(triple);
        true
    }

    pub fn set_label(&mut self, id: impl Into<String>, label: impl Into<String>) {
        self.labels.insert(id.into(), label.into());
    }

    /// Parses a TSV triples stream (`head<TAB>relation<TAB>tail` per line).
    pub fn load_triples<R: BufRead>(source: R) -> Result<Self, KgError> {
        let mut kg = Self::new();
        kg.extend_triples(source)?;
        Ok(kg)
    }

    /// Appends triples from a TSV stream to this graph.
    pub fn extend_triples<R: BufRead>(&mut self, source: R) -> Result<(), KgError> {
        let mut interner = Interner::default();
        for_each_line(source, |line, text| {
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != 3 {
                return Err(KgError::FieldCount {
                    line,
                    expected: 3,
                    found: fields.len(),
                });
            }
            for field in &fields {
                validate_id(field).map_err(|source| KgError::InvalidField { line, source })?;
            }
            self.insert(Triple {
                head: EntityId::from_interned(interner.intern(fields[0])),
                relation: RelationId::from_interned(interner.intern(fields[1])),
                tail: EntityId::from_interned(interner.intern(fields[2])),
            });
            Ok(())
        })
    }

    /// Merges an `id<TAB>label` stream into the label map. Later lines
    /// overwrite earlier ones for the same id.
    pub fn load_labels<R: BufRead>(&mut self, source: R) -> Result<(), KgError> {
        for_each_line(source, |line, text| {
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != 2 {
                return Err(KgError::FieldCount {
                    line,
                    expected: 2,
                    found: fields.len(),
                });
            }
            validate_id(fields[0]).map_err(|source| KgError::InvalidField { line, source })?;
            self.labels
                .insert(fields[0].to_string(), fields[1].to_string());
            Ok(())
        })
    }

    /// Loads `triples.tsv` and, when present, `labels.tsv` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, KgError> {
        let dir = dir.as_ref();
        let mut kg = Self::load_triples(open(&dir.join(TRIPLES_FILE))?)?;
        let labels = dir.join(LABELS_FILE);
        if labels.exists() {
            kg.load_labels(open(&labels)?)?;
        }
        Ok(kg)
    }

    /// Writes `triples.tsv` and `labels.tsv` into `dir`, creating it.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), KgError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(TRIPLES_FILE))?);
        self.write_triples(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(LABELS_FILE))?);
        self.write_labels(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Serializes triples in load order, one TSV line each.
    pub fn write_triples<W: Write>(&self, mut w: W) -> io::Result<()> {
        for t in &self.triples {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Serializes labels sorted by id.
    pub fn write_labels<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut entries: Vec<_> = self.labels.iter().collect();
        entries.sort();
        for (id, label) in entries {
            writeln!(w, "{id}\t{label}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// All triples in load order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.index.contains(triple)
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    /// Human-readable label for an entity or relation id, falling back to
    /// the id itself.
    pub fn label_of<'a>(&'a self, id: &'a str) -> &'a str {
        self.labels.get(id).map(String::as_str).unwrap_or(id)
    }

    pub fn has_label(&self, id: &str) -> bool {
        self.labels.contains_key(id)
    }

    /// Triples whose head is `entity`, in load order.
    pub fn neighbors<'a>(&'a self, entity: &str) -> impl ExactSizeIterator<Item = &'a Triple> + 'a {
        self.adjacency
            .get(entity)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .map(move |&i| &self.triples[i as usize])
    }

    /// Owned neighbor list, optionally truncated to `limit` entries to bound
    /// hub entities.
    pub fn get_neighbors(&self, entity: &str, limit: Option<usize>) -> Vec<Triple> {
        self.neighbors(entity)
            .take(limit.unwrap_or(usize::MAX))
            .cloned()
            .collect()
    }

    pub fn out_degree(&self, entity: &str) -> usize {
        self.adjacency.get(entity).map_or(0, Vec::len)
    }

    /// All directed simple paths from `from` to `to` of at most `max_len`
    /// triples. No entity repeats along a path, except that `from == to`
    /// yields cycles back to the start. Sorted by length, then by triple
    /// sequence.
    pub fn find_paths(&self, from: &str, to: &str, max_len: usize) -> Vec<Vec<Triple>> {
        let mut found = Vec::new();
        if max_len == 0 {
            return found;
        }
        let mut visited: HashSet<&str> = HashSet::from([from]);
        let mut stack = Vec::with_capacity(max_len);
        self.path_dfs(from, to, max_len, &mut stack, &mut visited, &mut found);
        found.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        found
    }

    fn path_dfs<'a>(
        &'a self,
        current: &str,
        target: &str,
        max_len: usize,
        stack: &mut Vec<u32>,
        visited: &mut HashSet<&'a str>,
        found: &mut Vec<Vec<Triple>>,
    ) {
        let Some(edges) = self.adjacency.get(current) else {
            return;
        };
        for &idx in edges {
            let tail = self.triples[idx as usize].tail.as_str();
            if tail == target {
                found.push(
                    stack
                        .iter()
                        .chain(std::iter::once(&idx))
                        .map(|&i| self.triples[i as usize].clone())
                        .collect(),
                );
            } else if stack.len() + 1 < max_len && visited.insert(tail) {
                stack.push(idx);
                self.path_dfs(tail, target, max_len, stack, visited, found);
                stack.pop();
                visited.remove(tail);
            }
        }
    }

    /// Every triple reachable from `seeds` in at most `k` head-to-tail steps,
    /// as a new graph in source load order with labels restricted to the ids
    /// that remain.
    pub fn extract_khop_subgraph<'s>(
        &self,
        seeds: impl IntoIterator<Item = &'s EntityId>,
        k: usize,
    ) -> KnowledgeGraph {
        let mut visited: HashSet<&str> = HashSet::new();
        let mut frontier: Vec<&str> = Vec::new();
        for seed in seeds {
            // Seeds without outgoing edges contribute nothing.
            let key = match self.adjacency.get_key_value(seed.as_str()) {
                Some((k, _)) => k.as_str(),
                None => continue,
            };
            if visited.insert(key) {
                frontier.push(key);
            }
        }

        let mut selected = Vec::new();
        for _ in 0..k {
            let mut next = Vec::new();
            for entity in &frontier {
                for &idx in self.adjacency.get(*entity).map(Vec::as_slice).unwrap_or(&[]) {
                    selected.push(idx);
                    let tail = self.triples[idx as usize].tail.as_str();
                    if visited.insert(tail) {
                        next.push(tail);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        selected.sort_unstable();

        let mut sub = KnowledgeGraph::new();
        for idx in selected {
            let t = &self.triples[idx as usize];
            for id in [t.head.as_str(), t.relation.as_str(), t.tail.as_str()] {
                if let Some(label) = self.labels.get(id) {
                    sub.labels.insert(id.to_string(), label.clone());
                }
            }
            sub.insert(t.clone());
        }
        sub
    }
}

fn open(path: &Path) -> Result<BufReader<File>, KgError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| KgError::File {
            path: path.display().to_string(),
            source,
        })
}
