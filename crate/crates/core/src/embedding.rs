//! Text embeddings and cosine scoring.
//!
//! Observation ranks each candidate triple by the cosine similarity between
//! the question embedding and the embedding of `"<relation label> <tail label>"`.
//! Providers are pluggable; [`HashEmbedding`] is a deterministic offline
//! provider used for tests and replay, [`HttpEmbedding`] talks to an
//! OpenAI-compatible `/embeddings` endpoint. [`Embedder`] layers a shared
//! cache and retry policy over any provider.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::EndpointConfig;
use crate::retry::RetryPolicy;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("vector component {index} is not finite")]
    NonFinite { index: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    BadDimension(usize),
    #[error("embedding provider failed: {message}")]
    Provider { message: String, retryable: bool },
    #[error("embedding cache: {0}")]
    Cache(#[from] io::Error),
}

impl EmbeddingError {
    fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Provider { retryable: true, .. })
    }
}

/// A finite, fixed-length embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self, EmbeddingError> {
        if let Some(index) = components.iter().position(|c| !c.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        Ok(Self(components))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|c| c * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = EmbeddingError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Text embedded for a candidate triple.
pub fn combined_text(relation_label: &str, tail_label: &str) -> String {
    format!("{relation_label} {tail_label}")
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vector, EmbeddingError>;
}

/// Deterministic offline provider: each text maps to a unit vector whose
/// components come from SHA-256 in counter mode keyed by `(seed, text)`.
///
/// Only IEEE basic operations and `sqrt` are involved, so vectors are
/// bit-identical on every platform.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    seed: u64,
    dimension: usize,
}

impl HashEmbedding {
    pub fn new(seed: u64, dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension < 2 {
            return Err(EmbeddingError::BadDimension(dimension));
        }
        Ok(Self { seed, dimension })
    }

    fn raw_components(&self, text: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dimension);
        let mut block: u32 = 0;
        while out.len() < self.dimension {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update((text.len() as u64).to_le_bytes());
            h.update(text.as_bytes());
            h.update(block.to_le_bytes());
            let digest = h.finalize();
            for chunk in digest.chunks_exact(8) {
                if out.len() == self.dimension {
                    break;
                }
                let bits = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                // 53 random mantissa bits mapped onto [-1, 1).
                out.push((bits >> 11) as f64 * (2.0 / (1u64 << 53) as f64) - 1.0);
            }
            block += 1;
        }
        out
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vector, EmbeddingError> {
        let mut v = self.raw_components(text);
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|c| *c /= norm);
        }
        Ok(Vector(v))
    }
}

/// OpenAI-compatible embeddings client.
pub struct HttpEmbedding {
    client: reqwest::blocking::Client,
    endpoint: EndpointConfig,
    api_key: Option<String>,
    dimension: usize,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedding {
    pub fn new(endpoint: EndpointConfig, dimension: usize) -> Result<Self, EmbeddingError> {
        let client = endpoint
            .blocking_client()
            .map_err(|e| EmbeddingError::Provider {
                message: e.to_string(),
                retryable: false,
            })?;
        let api_key = endpoint.api_key();
        Ok(Self {
            client,
            endpoint,
            api_key,
            dimension,
        })
    }
}

impl EmbeddingProvider for HttpEmbedding {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vector, EmbeddingError> {
        let mut req = self.client.post(&self.endpoint.url).json(&EmbeddingRequest {
            model: &self.endpoint.model,
            input: text,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbeddingError::Provider {
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbeddingError::Provider {
                message: format!("HTTP {status}"),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let body: EmbeddingResponse = resp.json().map_err(|e| EmbeddingError::Provider {
            message: format!("malformed response: {e}"),
            retryable: false,
        })?;
        let first = body.data.into_iter().next().ok_or(EmbeddingError::Provider {
            message: "response carried no embedding".into(),
            retryable: false,
        })?;
        let v = Vector::new(first.embedding)?;
        if v.dimension() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                left: v.dimension(),
                right: self.dimension,
            });
        }
        Ok(v)
    }
}

/// Text-keyed embedding cache with optional append-only persistence.
///
/// Record layout: `u32` text length, UTF-8 text bytes, `u32` dimension, then
/// `dimension` little-endian `f64` components. All integers little-endian.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, Vector>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file, loading every complete record. A
    /// torn trailing record is truncated away before appending resumes.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            while let Some((text, vector, len)) = read_record(&mut reader)? {
                entries.insert(text, vector);
                valid_len += len;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if file.metadata()?.len() > valid_len {
            tracing::warn!(path = %path.display(), "truncating torn embedding cache tail");
            file.set_len(valid_len)?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            sink: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn get(&self, text: &str) -> Option<Vector> {
        self.entries.read().expect("cache lock").get(text).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, text: &str, vector: Vector) -> Result<(), EmbeddingError> {
        let mut entries = self.entries.write().expect("cache lock");
        if entries.get(text) == Some(&vector) {
            return Ok(());
        }
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().expect("cache sink lock");
            write_record(&mut *w, text, &vector)?;
        }
        entries.insert(text.to_string(), vector);
        Ok(())
    }

    pub fn flush(&self) -> Result<(), EmbeddingError> {
        if let Some(sink) = &self.sink {
            sink.lock().expect("cache sink lock").flush()?;
        }
        Ok(())
    }
}

impl Drop for EmbeddingCache {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            tracing::warn!(error = %e, "failed to flush embedding cache");
        }
    }
}

fn write_record(w: &mut impl Write, text: &str, v: &Vector) -> io::Result<()> {
    let len = u32::try_from(text.len()).map_err(|_| io::Error::other("text too long"))?;
    let dim = u32::try_from(v.dimension()).map_err(|_| io::Error::other("dimension too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    for c in v.components() {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record; `None` at clean EOF or at a torn/invalid tail.
fn read_record(r: &mut impl Read) -> io::Result<Option<(String, Vector, u64)>> {
    fn exact(r: &mut impl Read, buf: &mut [u8]) -> io::Result<bool> {
        match r.read_exact(buf) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(false),
            Err(e) => Err(e),
        }
    }
    let mut word = [0u8; 4];
    if !exact(r, &mut word)? {
        return Ok(None);
    }
    let mut text = vec![0u8; u32::from_le_bytes(word) as usize];
    if !exact(r, &mut text)? || !exact(r, &mut word)? {
        return Ok(None);
    }
    let dim = u32::from_le_bytes(word) as usize;
    let mut raw = vec![0u8; dim * 8];
    if !exact(r, &mut raw)? {
        return Ok(None);
    }
    let Ok(text) = String::from_utf8(text) else {
        return Ok(None);
    };
    let components = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let Ok(vector) = Vector::new(components) else {
        return Ok(None);
    };
    let len = 8 + text.len() as u64 + dim as u64 * 8;
    Ok(Some((text, vector, len)))
}

/// Provider + cache + retry policy, shared by every concurrent run.
#[derive(Clone)]
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Arc<EmbeddingCache>,
    retry: RetryPolicy,
}

impl Embedder {
    pub fn new(
        provider: Arc<dyn EmbeddingProvider>,
        cache: Arc<EmbeddingCache>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            provider,
            cache,
            retry,
        }
    }

    /// Deterministic hash provider with an in-memory cache.
    pub fn hashed(seed: u64, dimension: usize) -> Result<Self, EmbeddingError> {
        Ok(Self::new(
            Arc::new(HashEmbedding::new(seed, dimension)?),
            Arc::new(EmbeddingCache::in_memory()),
            RetryPolicy::immediate(0),
        ))
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed(&self, text: &str) -> Result<Vector, EmbeddingError> {
        let dim = self.provider.dimension();
        if let Some(v) = self.cache.get(text).filter(|v| v.dimension() == dim) {
            return Ok(v);
        }
        let v = self
            .retry
            .run(|| self.provider.embed(text), EmbeddingError::is_retryable)?;
        self.cache.insert(text, v.clone())?;
        Ok(v)
    }

    /// Cosine between the question vector and the embedding of the
    /// candidate's combined relation/tail text.
    pub fn score_candidate(
        &self,
        question: &Vector,
        relation_label: &str,
        tail_label: &str,
    ) -> Result<f64, EmbeddingError> {
        let v = self.embed(&combined_text(relation_label, tail_label))?;
        cosine(question, &v)
    }
}
