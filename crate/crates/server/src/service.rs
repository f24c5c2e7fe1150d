use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dashmap::DashMap;
use dqaf_core::api::{
    rank_manifest, AnalyzeMode, AnalyzeRequest, ApiErrorBody, AssessmentRecord, CalibrateRequest, CurationQuery,
    EpisodeSummary, FeedbackResponse, Health, Manifest, ManifestEntry, RecordStatus, Stored,
};
use dqaf_core::feedback::FeedbackProvider;
use dqaf_core::metrics::MetricConfig;
use dqaf_core::pipeline::{analyze, analyze_with_trace, AnalysisOptions, Assessment};
use dqaf_core::segment::{calibrate_thresholds, CalibrationOptions, DEFAULT_CALIBRATION_PERCENTILE};
use dqaf_core::semantic::{ScriptedSemanticProvider, SemanticProvider, SemanticScript, SemanticTrace};
use dqaf_core::streaming::{simulate_streaming, StreamingConfig};
use dqaf_core::{Episode, TaskContext, ThresholdProfile};
use tokio::sync::Mutex;

use crate::providers::{HttpFeedbackProvider, HttpSemanticProvider};
use crate::store::{Kind, Store, StoreError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_root: PathBuf,
    /// Use stored scripted mocks for semantics and the rule-based feedback.
    pub mock_providers: bool,
    pub semantic_url: Option<String>,
    pub feedback_url: Option<String>,
    pub api_key: Option<String>,
    /// Directory relative frame uris are resolved against.
    pub frame_root: Option<PathBuf>,
    pub provider_timeout: Duration,
    pub analysis: AnalysisOptions,
    pub streaming: StreamingConfig,
}

impl ServiceConfig {
    pub fn new(store_root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            store_root: store_root.into(),
            mock_providers: false,
            semantic_url: None,
            feedback_url: None,
            api_key: None,
            frame_root: None,
            provider_timeout: Duration::from_secs(60),
            analysis: AnalysisOptions::default(),
            streaming: StreamingConfig::default(),
        }
    }

    /// Reads `DQAF_STORE`, `DQAF_SEMANTIC_URL`, `DQAF_FEEDBACK_URL` and
    /// `DQAF_API_KEY`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let mut cfg = ServiceConfig::new(var("DQAF_STORE").unwrap_or_else(|| "dqaf-store".to_string()));
        cfg.semantic_url = var("DQAF_SEMANTIC_URL");
        cfg.feedback_url = var("DQAF_FEEDBACK_URL");
        cfg.api_key = var("DQAF_API_KEY");
        cfg
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("server stopped: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("task {0} has no calibrated threshold profile")]
    NotCalibrated(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => ApiError::NotFound(e.to_string()),
            StoreError::BadId(_) => ApiError::BadRequest(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ApiError::NotCalibrated(_) => (StatusCode::CONFLICT, "not_calibrated"),
            ApiError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "provider_unavailable"),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = ApiErrorBody { error: code.to_string(), message: self.to_string() };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    pub store: Store,
    pub config: ServiceConfig,
    locks: DashMap<String, Arc<Mutex<()>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Arc<AppState>, StoreError> {
        Ok(Arc::new(AppState {
            store: Store::open(&config.store_root)?,
            config,
            locks: DashMap::new(),
        }))
    }

    fn lock_for(&self, episode_id: &str) -> Arc<Mutex<()>> {
        self.locks.entry(episode_id.to_string()).or_default().clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/episodes", post(put_episode).get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/semantic-mock", post(put_mock).get(get_mock))
        .route("/episodes/{id}/analyze", post(analyze_episode))
        .route("/episodes/{id}/assessment", get(get_assessment))
        .route("/episodes/{id}/trace", get(get_trace))
        .route("/episodes/{id}/feedback", get(get_feedback))
        .route("/episodes/{id}/record", get(get_record))
        .route("/contexts", post(put_context))
        .route("/contexts/{task_id}", get(get_context))
        .route("/profiles/calibrate", post(calibrate))
        .route("/profiles/{task_id}", get(get_profile))
        .route("/curation", get(curation))
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> Result<(), ServeError> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    tracing::info!(%addr, store = %state.store.root().display(), "dqaf service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".to_string(),
        mock_providers: s.config.mock_providers,
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

async fn put_episode(State(s): State<Arc<AppState>>, Json(episode): Json<Episode>) -> ApiResult<(StatusCode, Json<Stored>)> {
    let episode = episode.validated().map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let id = episode.episode_id.clone();
    let lock = s.lock_for(&id);
    let _guard = lock.lock().await;
    let sha256 = blocking(move || Ok(s.store.put_episode(&episode)?)).await?;
    Ok((StatusCode::CREATED, Json(Stored { id, sha256 })))
}

async fn get_episode(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Episode>> {
    Ok(Json(blocking(move || Ok(s.store.episode(&id)?)).await?))
}

async fn list_episodes(
    State(s): State<Arc<AppState>>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult<Json<Vec<EpisodeSummary>>> {
    let task = q.get("task_id").cloned();
    blocking(move || {
        let mut out = Vec::new();
        for id in s.store.list(Kind::Episode)? {
            let ep = s.store.episode(&id)?;
            if task.as_ref().is_some_and(|t| *t != ep.task_id) {
                continue;
            }
            let record = s.store.record(&id).ok();
            let a = record.as_ref().and_then(|r| r.assessment.as_ref());
            out.push(EpisodeSummary {
                episode_id: id,
                task_id: ep.task_id,
                duration_s: ep.duration_s,
                status: record.as_ref().map(|r| r.status),
                q: a.map(|a| a.q),
                label: a.map(|a| a.classification.label),
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn put_mock(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(mut script): Json<SemanticScript>,
) -> ApiResult<(StatusCode, Json<Stored>)> {
    if script.episode_id.is_empty() {
        script.episode_id = id.clone();
    }
    if script.episode_id != id {
        return Err(ApiError::BadRequest(format!("mock is for {}, not {id}", script.episode_id)));
    }
    let sha256 = blocking(move || Ok(s.store.put_mock(&script)?)).await?;
    Ok((StatusCode::CREATED, Json(Stored { id, sha256 })))
}

async fn get_mock(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SemanticScript>> {
    Ok(Json(blocking(move || Ok(s.store.mock(&id)?)).await?))
}

async fn put_context(State(s): State<Arc<AppState>>, Json(ctx): Json<TaskContext>) -> ApiResult<(StatusCode, Json<Stored>)> {
    let ctx = ctx.validated().map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let id = ctx.task_id.clone();
    let sha256 = blocking(move || Ok(s.store.put_context(&ctx)?)).await?;
    Ok((StatusCode::CREATED, Json(Stored { id, sha256 })))
}

async fn get_context(State(s): State<Arc<AppState>>, Path(task): Path<String>) -> ApiResult<Json<TaskContext>> {
    Ok(Json(blocking(move || Ok(s.store.context(&task)?)).await?))
}

async fn get_profile(State(s): State<Arc<AppState>>, Path(task): Path<String>) -> ApiResult<Json<ThresholdProfile>> {
    Ok(Json(blocking(move || Ok(s.store.profile(&task)?)).await?))
}

async fn calibrate(State(s): State<Arc<AppState>>, Json(req): Json<CalibrateRequest>) -> ApiResult<Json<ThresholdProfile>> {
    if req.reference_ids.is_empty() {
        return Err(ApiError::BadRequest("reference_ids is empty".into()));
    }
    blocking(move || {
        let refs = req
            .reference_ids
            .iter()
            .map(|id| s.store.episode(id))
            .collect::<Result<Vec<_>, _>>()?;
        let opts = CalibrationOptions {
            task_id: Some(req.task_id.clone()),
            percentile: req.percentile.unwrap_or(DEFAULT_CALIBRATION_PERCENTILE),
            percentile_overrides: req.percentile_overrides,
            policy: req.policy.unwrap_or_default(),
            ..Default::default()
        };
        let profile = calibrate_thresholds(&refs, MetricConfig::default(), &opts)
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        s.store.put_profile(&profile)?;
        Ok(Json(profile))
    })
    .await
}

fn load_assessment(s: &AppState, id: &str) -> ApiResult<Assessment> {
    match s.store.assessment(id) {
        Ok(a) => Ok(a),
        Err(StoreError::NotFound { .. }) => {
            s.store.episode(id)?;
            Err(ApiError::NotFound(format!("episode {id} has no assessment yet")))
        }
        Err(e) => Err(e.into()),
    }
}

async fn get_assessment(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Assessment>> {
    Ok(Json(blocking(move || load_assessment(&s, &id)).await?))
}

async fn get_trace(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SemanticTrace>> {
    Ok(Json(blocking(move || load_assessment(&s, &id).map(|a| a.trace)).await?))
}

async fn get_feedback(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<FeedbackResponse>> {
    let a = blocking(move || load_assessment(&s, &id)).await?;
    Ok(Json(FeedbackResponse {
        episode_id: a.episode_id,
        items: a.feedback,
        source: a.feedback_source,
        dropped: a.feedback_dropped,
    }))
}

async fn get_record(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<AssessmentRecord>> {
    Ok(Json(blocking(move || Ok(s.store.record(&id)?)).await?))
}

async fn curation(State(s): State<Arc<AppState>>, Query(q): Query<CurationQuery>) -> ApiResult<Json<Manifest>> {
    blocking(move || {
        let min_quality = q.min_quality.unwrap_or(0.0);
        let mut entries = Vec::new();
        for id in s.store.list(Kind::Assessment)? {
            let a = s.store.assessment(&id)?;
            if q.task_id.as_ref().is_some_and(|t| *t != a.task_id)
                || a.q < min_quality
                || q.label.is_some_and(|l| l != a.classification.label)
            {
                continue;
            }
            entries.push(ManifestEntry {
                episode_id: a.episode_id,
                q: a.q,
                label: a.classification.label,
                reasons: a.classification.reasons,
            });
        }
        Ok(Json(Manifest {
            task_id: q.task_id,
            min_quality,
            label: q.label,
            episodes: rank_manifest(entries),
        }))
    })
    .await
}

/// Inputs of one analysis, loaded and hashed up front.
struct Inputs {
    episode: Episode,
    context: TaskContext,
    profile: ThresholdProfile,
    mock: Option<SemanticScript>,
    hashes: BTreeMap<String, String>,
}

fn load_inputs(s: &AppState, id: &str) -> ApiResult<Inputs> {
    let mut hashes = BTreeMap::new();
    let bytes = s.store.read_bytes(Kind::Episode, id)?;
    hashes.insert("episode".to_string(), crate::store::sha256_hex(&bytes));
    let episode = s.store.episode(id)?;
    let task = episode.task_id.clone();
    let context = match s.store.context(&task) {
        Err(StoreError::NotFound { .. }) => {
            return Err(ApiError::NotFound(format!("task context {task} not found; POST /contexts first")))
        }
        r => r?,
    };
    hashes.insert("context".to_string(), crate::store::sha256_hex(&s.store.read_bytes(Kind::Context, &task)?));
    let profile = match s.store.profile(&task) {
        Err(StoreError::NotFound { .. }) => return Err(ApiError::NotCalibrated(task)),
        r => r?,
    };
    hashes.insert("profile".to_string(), crate::store::sha256_hex(&s.store.read_bytes(Kind::Profile, &task)?));
    let mock = if s.config.mock_providers {
        match s.store.mock(id) {
            Ok(m) => {
                hashes.insert("semantic_mock".to_string(), crate::store::sha256_hex(&s.store.read_bytes(Kind::Mock, id)?));
                Some(m)
            }
            Err(StoreError::NotFound { .. }) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    Ok(Inputs { episode, context, profile, mock, hashes })
}

type Providers = (Box<dyn SemanticProvider>, Option<Box<dyn FeedbackProvider>>);

fn providers(s: &AppState, inputs: &Inputs) -> ApiResult<Providers> {
    let cfg = &s.config;
    if cfg.mock_providers {
        let mut scripted = ScriptedSemanticProvider::new();
        if let Some(m) = &inputs.mock {
            scripted.add(m.clone());
        }
        return Ok((Box::new(scripted), None));
    }
    let url = cfg
        .semantic_url
        .clone()
        .ok_or_else(|| ApiError::Unavailable("no semantic provider configured (DQAF_SEMANTIC_URL or mock mode)".into()))?;
    let semantic = HttpSemanticProvider::new(url, cfg.api_key.clone(), cfg.frame_root.clone(), cfg.provider_timeout);
    let feedback = cfg.feedback_url.clone().map(|u| {
        Box::new(HttpFeedbackProvider::new(u, cfg.api_key.clone(), cfg.provider_timeout)) as Box<dyn FeedbackProvider>
    });
    Ok((Box::new(semantic), feedback))
}

fn advance(s: &AppState, record: &mut AssessmentRecord, next: RecordStatus) -> ApiResult<()> {
    debug_assert!(record.status.can_become(next), "{:?} -> {next:?}", record.status);
    record.status = next;
    s.store.put_record(record)?;
    Ok(())
}

/// Runs one analysis to completion, persisting the record at each status.
fn run_analysis(s: &AppState, inputs: Inputs, mut record: AssessmentRecord) -> ApiResult<AssessmentRecord> {
    let (semantic, feedback) = match providers(s, &inputs) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            advance(s, &mut record, RecordStatus::Error)?;
            return Ok(record);
        }
    };
    advance(s, &mut record, RecordStatus::SemanticRunning)?;
    let opts = &s.config.analysis;
    let result = match record.mode {
        AnalyzeMode::Batch => analyze(
            &inputs.episode,
            &inputs.context,
            &inputs.profile,
            semantic.as_ref(),
            feedback.as_deref(),
            opts,
        ),
        AnalyzeMode::Streaming => {
            let mut cfg = s.config.streaming.clone();
            cfg.interval_s = opts.trace.interval_s;
            cfg.rules = opts.trace.rules.clone();
            cfg.retries = opts.trace.retries;
            match simulate_streaming(&inputs.episode, &inputs.context, semantic.as_ref(), cfg) {
                Ok((trace, schedule)) => {
                    record.streaming = Some(schedule);
                    analyze_with_trace(&inputs.episode, &inputs.context, &inputs.profile, trace, feedback.as_deref(), opts)
                }
                Err(e) => {
                    record.error = Some(e.to_string());
                    advance(s, &mut record, RecordStatus::Error)?;
                    return Ok(record);
                }
            }
        }
    };
    match result {
        Ok(assessment) => {
            s.store.put_assessment(&assessment)?;
            if assessment.trace.updates().next().is_none() {
                // Nothing usable came back from the provider; keep the
                // partial assessment for inspection.
                record.error = Some("semantic provider returned no usable update".to_string());
                record.assessment = Some(assessment);
                advance(s, &mut record, RecordStatus::Error)?;
            } else {
                record.assessment = Some(assessment);
                advance(s, &mut record, RecordStatus::Complete)?;
            }
        }
        Err(e) => {
            record.error = Some(e.to_string());
            advance(s, &mut record, RecordStatus::Error)?;
        }
    }
    Ok(record)
}

async fn analyze_episode(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<AnalyzeRequest>>,
) -> ApiResult<(StatusCode, Json<AssessmentRecord>)> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let lock = s.lock_for(&id);
    let guard = lock.clone().lock_owned().await;

    let state = s.clone();
    let loaded = {
        let id = id.clone();
        blocking(move || {
            let inputs = load_inputs(&state, &id)?;
            let record = AssessmentRecord {
                episode_id: id,
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                status: RecordStatus::Pending,
                mode: req.mode,
                inputs: inputs.hashes.clone(),
                assessment: None,
                streaming: None,
                error: None,
            };
            state.store.put_record(&record)?;
            Ok((inputs, record))
        })
        .await?
    };
    let (inputs, record) = loaded;
    let pending = record.clone();
    let state = s.clone();
    let job = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        run_analysis(&state, inputs, record)
    });
    if !req.wait {
        return Ok((StatusCode::ACCEPTED, Json(pending)));
    }
    let done = job.await.map_err(|e| ApiError::Internal(format!("analysis worker failed: {e}")))??;
    Ok((StatusCode::OK, Json(done)))
}
