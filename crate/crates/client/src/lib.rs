//! Async client for a running kgscout service.

use std::time::Duration;

use kgscout_core::eval::DatasetRecord;
use kgscout_core::{EntityId, EvalReport, ObservationParams, ObservationSubgraph, ReflectionStrategy, Triple};
use kgscout_service::{AskRequest, AskResponse, EntityReport, ErrorBody, EvalRequest, Health, ObserveRequest};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("invalid server URL: {0}")]
    Url(String),
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: reqwest::Url,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self, ClientError> {
        let _ = rustls::crypto::ring::default_provider().install_default();
        // Agent runs can take minutes; only connection setup is bounded.
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .build()?;
        let base: String = base.into();
        let base = reqwest::Url::parse(&base).map_err(|e| ClientError::Url(format!("{base}: {e}")))?;
        if base.cannot_be_a_base() {
            return Err(ClientError::Url(base.to_string()));
        }
        Ok(Self { base, http })
    }

    fn url(&self, segments: &[&str]) -> reqwest::Url {
        let mut url = self.base.clone();
        url.path_segments_mut()
            .expect("checked in new")
            .pop_if_empty()
            .extend(segments);
        url
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &[&str], query: &[(&str, String)]) -> Result<T, ClientError> {
        let resp = self.http.get(self.url(path)).query(query).send().await?;
        Self::decode(resp).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &[&str], body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(self.url(path)).json(body).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get(&["health"], &[]).await
    }

    pub async fn neighbors(&self, entity: &str, limit: Option<usize>) -> Result<Vec<Triple>, ClientError> {
        let query: Vec<_> = limit.map(|l| ("limit", l.to_string())).into_iter().collect();
        self.get(&["neighbors", entity], &query).await
    }

    pub async fn paths(&self, from: &str, to: &str, max_len: Option<usize>) -> Result<Vec<Vec<Triple>>, ClientError> {
        let mut query = vec![("from", from.to_string()), ("to", to.to_string())];
        if let Some(n) = max_len {
            query.push(("max_len", n.to_string()));
        }
        self.get(&["paths"], &query).await
    }

    pub async fn inspect(&self, entity: &str, limit: Option<usize>) -> Result<EntityReport, ClientError> {
        let query: Vec<_> = limit.map(|l| ("limit", l.to_string())).into_iter().collect();
        self.get(&["entities", entity], &query).await
    }

    pub async fn observe(
        &self,
        question: &str,
        entities: &[EntityId],
        params: Option<ObservationParams>,
    ) -> Result<ObservationSubgraph, ClientError> {
        self.post(
            &["observe"],
            &ObserveRequest {
                question: question.to_string(),
                entities: entities.to_vec(),
                params,
            },
        )
        .await
    }

    pub async fn ask(
        &self,
        question: &str,
        entities: &[EntityId],
        strategy: Option<ReflectionStrategy>,
    ) -> Result<AskResponse, ClientError> {
        self.post(
            &["ask"],
            &AskRequest {
                question: question.to_string(),
                entities: entities.to_vec(),
                strategy,
            },
        )
        .await
    }

    pub async fn eval(
        &self,
        records: Vec<DatasetRecord>,
        strategy: Option<ReflectionStrategy>,
        workers: Option<usize>,
    ) -> Result<EvalReport, ClientError> {
        self.post(
            &["eval"],
            &EvalRequest {
                records,
                strategy,
                workers,
                match_policy: None,
            },
        )
        .await
    }
}
