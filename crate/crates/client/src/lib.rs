//! Thin async client for the assessment service.

use dqaf_core::api::{
    AnalyzeMode, AnalyzeRequest, ApiErrorBody, AssessmentRecord, CalibrateRequest, CurationQuery, EpisodeSummary,
    FeedbackResponse, Health, Manifest, Stored,
};
use dqaf_core::pipeline::Assessment;
use dqaf_core::semantic::{SemanticScript, SemanticTrace};
use dqaf_core::{Episode, TaskContext, ThresholdProfile};
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {} ({})", body.message, body.error)]
    Api { status: u16, body: ApiErrorBody },
    #[error("server answered {status} with an unreadable body: {text}")]
    Unexpected { status: u16, text: String },
}

impl ClientError {
    /// Machine-readable error code from the server, if it sent one.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } | ClientError::Unexpected { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status().map(|s| s.as_u16()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        Client::with_http(base_url, reqwest::Client::new())
    }

    pub fn with_http(base_url: impl Into<String>, http: reqwest::Client) -> Self {
        Client { base: base_url.into().trim_end_matches('/').to_string(), http }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn req(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base))
    }

    async fn send<T: DeserializeOwned>(rb: RequestBuilder) -> Result<T, ClientError> {
        let resp = rb.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json::<T>().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        Err(match serde_json::from_str::<ApiErrorBody>(&text) {
            Ok(body) => ClientError::Api { status: status.as_u16(), body },
            Err(_) => ClientError::Unexpected { status: status.as_u16(), text },
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::send(self.req(Method::GET, path)).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::send(self.req(Method::POST, path).json(body)).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn put_episode(&self, episode: &Episode) -> Result<Stored, ClientError> {
        self.post("/episodes", episode).await
    }

    pub async fn episode(&self, id: &str) -> Result<Episode, ClientError> {
        self.get(&format!("/episodes/{id}")).await
    }

    pub async fn list_episodes(&self, task_id: Option<&str>) -> Result<Vec<EpisodeSummary>, ClientError> {
        let mut rb = self.req(Method::GET, "/episodes");
        if let Some(t) = task_id {
            rb = rb.query(&[("task_id", t)]);
        }
        Self::send(rb).await
    }

    pub async fn put_semantic_mock(&self, script: &SemanticScript) -> Result<Stored, ClientError> {
        self.post(&format!("/episodes/{}/semantic-mock", script.episode_id), script).await
    }

    pub async fn put_context(&self, ctx: &TaskContext) -> Result<Stored, ClientError> {
        self.post("/contexts", ctx).await
    }

    pub async fn context(&self, task_id: &str) -> Result<TaskContext, ClientError> {
        self.get(&format!("/contexts/{task_id}")).await
    }

    pub async fn calibrate(&self, request: &CalibrateRequest) -> Result<ThresholdProfile, ClientError> {
        self.post("/profiles/calibrate", request).await
    }

    pub async fn profile(&self, task_id: &str) -> Result<ThresholdProfile, ClientError> {
        self.get(&format!("/profiles/{task_id}")).await
    }

    /// Runs an analysis and waits for it to finish.
    pub async fn analyze(&self, episode_id: &str, mode: AnalyzeMode) -> Result<AssessmentRecord, ClientError> {
        self.analyze_with(episode_id, &AnalyzeRequest { mode, wait: true }).await
    }

    pub async fn analyze_with(&self, episode_id: &str, request: &AnalyzeRequest) -> Result<AssessmentRecord, ClientError> {
        self.post(&format!("/episodes/{episode_id}/analyze"), request).await
    }

    pub async fn assessment(&self, episode_id: &str) -> Result<Assessment, ClientError> {
        self.get(&format!("/episodes/{episode_id}/assessment")).await
    }

    pub async fn trace(&self, episode_id: &str) -> Result<SemanticTrace, ClientError> {
        self.get(&format!("/episodes/{episode_id}/trace")).await
    }

    pub async fn feedback(&self, episode_id: &str) -> Result<FeedbackResponse, ClientError> {
        self.get(&format!("/episodes/{episode_id}/feedback")).await
    }

    pub async fn record(&self, episode_id: &str) -> Result<AssessmentRecord, ClientError> {
        self.get(&format!("/episodes/{episode_id}/record")).await
    }

    pub async fn curation(&self, query: &CurationQuery) -> Result<Manifest, ClientError> {
        Self::send(self.req(Method::GET, "/curation").query(query)).await
    }
}

/// Whether the error is the server's 404.
pub fn is_not_found(e: &ClientError) -> bool {
    e.status() == Some(StatusCode::NOT_FOUND.as_u16())
}
