//! HTTP job server.
//!
//! Workers poll for jobs and report results; users submit and inspect
//! experiments. Every experiment lives in `<data_dir>/experiments/<id>/` with
//! its journal, a small metadata file and its checkpoint blobs, and is
//! rebuilt from the journal when the server starts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::bracket::ConfigId;
use crate::checkpoint::{CheckpointError, CheckpointRef, CheckpointStore};
use crate::export::{self, Format};
use crate::journal::{EventKind, Journal};
use crate::orchestrator::{ExperimentSpec, ExperimentStatus, Settings, Settled, SpecError, Token};
use crate::scheduler::{water_fill, ClusterDemand};
use crate::space::ParamValue;
use crate::tuner::{NextJob, RecordOutcome, Tuner, TunerError};

const JOURNAL_FILE: &str = "journal.bin";
const META_FILE: &str = "meta.json";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// GPUs shared between experiments.
    pub capacity: u64,
    pub fsync: bool,
    /// Lease for jobs of an experiment that has no timing history yet.
    pub initial_lease_ms: u64,
    pub min_lease_ms: u64,
    /// A lease lasts this many times the expected job duration.
    pub lease_factor: f64,
    pub backoff_ms: u64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            capacity: 1024,
            fsync: true,
            initial_lease_ms: 3_600_000,
            min_lease_ms: 1_000,
            lease_factor: 10.0,
            backoff_ms: 1_000,
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kappa: u32,
    weight: f64,
}

#[derive(Debug, Clone)]
struct Lease {
    worker_id: String,
    issued: u64,
    deadline: u64,
}

struct Managed {
    tuner: Tuner,
    store: CheckpointStore,
    meta: Meta,
    leases: BTreeMap<Token, Lease>,
    checkpoints: BTreeMap<(ConfigId, usize), String>,
    /// Running mean of milliseconds per resource unit.
    ms_per_unit: Option<f64>,
}

impl Managed {
    fn lease_ms(&self, config: &ServiceConfig, resource: u64) -> u64 {
        match self.ms_per_unit {
            Some(rate) => ((rate * resource as f64 * config.lease_factor) as u64).max(config.min_lease_ms),
            None => config.initial_lease_ms,
        }
    }

    fn sweep(&mut self, now: u64) -> Result<(), TunerError> {
        let expired: Vec<Token> = self.leases.iter().filter(|(_, l)| l.deadline <= now).map(|(&t, _)| t).collect();
        for token in expired {
            let lease = self.leases.remove(&token).expect("listed above");
            if self.tuner.experiment().in_flight().contains_key(&token) {
                tracing::info!(token, worker = %lease.worker_id, "lease expired, dropping job");
                self.tuner.drop_job(token, now)?;
            }
        }
        Ok(())
    }

    fn demand(&self, id: &str) -> ClusterDemand {
        let exp = self.tuner.experiment();
        ClusterDemand {
            experiment: id.to_string(),
            kappa: self.meta.kappa,
            stack_size: exp.runnable_tasks().saturating_add(exp.in_flight().len() as u64),
            weight: self.meta.weight,
        }
    }
}

struct Registry {
    experiments: BTreeMap<String, Managed>,
    next_id: u64,
}

pub struct Service {
    config: ServiceConfig,
    registry: Mutex<Registry>,
}

pub type Shared = Arc<Service>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot load experiment {id}: {source}")]
    Load { id: String, source: TunerError },
    #[error("bad metadata for experiment {id}: {message}")]
    Meta { id: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Service {
    /// Opens the data directory and replays every experiment found in it.
    pub fn load(config: ServiceConfig) -> Result<Shared, ServiceError> {
        let root = config.data_dir.join("experiments");
        fs::create_dir_all(&root)?;
        let mut experiments = BTreeMap::new();
        let mut next_id = 1;
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        for dir in dirs.into_iter().filter(|d| d.join(JOURNAL_FILE).exists()) {
            let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let meta_text = fs::read_to_string(dir.join(META_FILE))?;
            let meta: Meta = serde_json::from_str(&meta_text)
                .map_err(|e| ServiceError::Meta { id: id.clone(), message: e.to_string() })?;
            let tuner = Tuner::open(&dir.join(JOURNAL_FILE), config.fsync)
                .map_err(|source| ServiceError::Load { id: id.clone(), source })?;
            let mut checkpoints = BTreeMap::new();
            for e in tuner.journal().events() {
                if let EventKind::ResultRecorded { config_id, rung, checkpoint: Some(digest), .. } = &e.kind {
                    checkpoints.insert((*config_id, *rung), digest.clone());
                }
            }
            // Outstanding jobs get a fresh lease: their workers may still report.
            let now = now_ms();
            let leases = tuner
                .experiment()
                .in_flight()
                .keys()
                .map(|&t| {
                    (t, Lease { worker_id: "unknown".into(), issued: now, deadline: now + config.initial_lease_ms })
                })
                .collect();
            if let Some(n) = id.strip_prefix("exp-").and_then(|n| n.parse::<u64>().ok()) {
                next_id = next_id.max(n + 1);
            }
            let store = CheckpointStore::open(&dir.join("checkpoints"))?;
            tracing::info!(%id, events = tuner.journal().len(), "replayed experiment");
            experiments.insert(id, Managed { tuner, store, meta, leases, checkpoints, ms_per_unit: None });
        }
        Ok(Arc::new(Service { config, registry: Mutex::new(Registry { experiments, next_id }) }))
    }

    fn lock(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Drops every job whose lease has run out.
    pub fn sweep_leases(&self) {
        let now = now_ms();
        let mut reg = self.lock();
        for (id, m) in reg.experiments.iter_mut() {
            if let Err(e) = m.sweep(now) {
                tracing::error!(%id, "lease sweep failed: {e}");
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fields: Vec<crate::orchestrator::FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error: message.into(), fields: Vec::new() } }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }
}

impl From<TunerError> for ApiError {
    fn from(e: TunerError) -> Self {
        match e {
            TunerError::Spec(SpecError::Invalid(fields)) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody { error: "invalid experiment spec".into(), fields },
            },
            TunerError::Spec(SpecError::Parse(m)) => ApiError::new(StatusCode::BAD_REQUEST, m),
            TunerError::Extend(m) => ApiError::new(StatusCode::CONFLICT, m),
            TunerError::UnknownToken(t) => ApiError::new(StatusCode::NOT_FOUND, format!("token {t} not found")),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<CheckpointError> for ApiError {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::NotFound(_) => StatusCode::NOT_FOUND,
            CheckpointError::BadDigest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn default_kappa() -> u32 {
    1
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    #[serde(flatten)]
    pub spec: ExperimentSpec,
    #[serde(default = "default_kappa")]
    pub kappa: u32,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub experiment_id: String,
    pub settings: Settings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusResponse {
    pub experiment_id: String,
    pub kappa: u32,
    pub weight: f64,
    pub allocation: u64,
    #[serde(flatten)]
    pub status: ExperimentStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResumeRequest {
    #[serde(default)]
    pub additional_n: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PollRequest {
    pub worker_id: String,
}

/// A job as sent to a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireJob {
    pub token: Token,
    pub experiment_id: String,
    pub config_id: ConfigId,
    pub bracket: usize,
    pub rung: usize,
    pub resource: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_resource: Option<u64>,
    pub hyperparameters: BTreeMap<String, ParamValue>,
    /// Digest of the previous rung's checkpoint, if one was uploaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<String>,
    pub lease_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PollResponse {
    Job { job: WireJob },
    NoWork { backoff_ms: u64, finished: bool },
}

/// A result as reported by a worker. Non-finite losses may be sent as the
/// strings `"inf"`, `"-inf"` or `"nan"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResult {
    pub token: Token,
    #[serde(with = "crate::serde_f64::loss")]
    pub loss: f64,
    pub resource: u64,
    #[serde(default)]
    pub worker_id: Option<String>,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub train_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ResultAck {
    Recorded,
    Duplicate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    pub finished: bool,
    pub sequence_no: Option<u64>,
    pub configs_sampled: u64,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/experiments", post(create).get(list))
        .route("/experiments/{id}", get(status))
        .route("/experiments/{id}/resume", post(resume))
        .route("/experiments/{id}/jobs/poll", post(poll))
        .route("/experiments/{id}/results", post(report))
        .route("/experiments/{id}/checkpoints/{config_id}/{rung}", put(upload_checkpoint))
        .route("/experiments/{id}/checkpoints/{digest}", get(download_checkpoint))
        .route("/experiments/{id}/export", get(export_results))
        .with_state(service)
}

fn allocations(reg: &Registry, capacity: u64) -> BTreeMap<String, u64> {
    let demands: Vec<ClusterDemand> = reg
        .experiments
        .iter()
        .filter(|(_, m)| !m.tuner.experiment().is_finished())
        .map(|(id, m)| m.demand(id))
        .collect();
    water_fill(&demands, capacity)
}

fn status_of(reg: &Registry, capacity: u64, id: &str) -> ApiResult<StatusResponse> {
    let m = reg.experiments.get(id).ok_or_else(|| ApiError::not_found("experiment"))?;
    let allocation = allocations(reg, capacity).get(id).copied().unwrap_or(0);
    Ok(StatusResponse {
        experiment_id: id.to_string(),
        kappa: m.meta.kappa,
        weight: m.meta.weight,
        allocation,
        status: m.tuner.status(),
    })
}

async fn create(State(svc): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let req: CreateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let settings = req.spec.validate().map_err(TunerError::from)?;
    let mut reg = svc.lock();
    let id = format!("exp-{:06}", reg.next_id);
    let dir = svc.config.data_dir.join("experiments").join(&id);
    fs::create_dir_all(&dir)?;
    let meta = Meta { kappa: req.kappa.max(1), weight: if req.weight > 0.0 { req.weight } else { 1.0 } };
    fs::write(dir.join(META_FILE), serde_json::to_vec(&meta).expect("plain struct"))?;
    let journal = Journal::create(&dir.join(JOURNAL_FILE), svc.config.fsync).map_err(TunerError::from)?;
    let tuner = Tuner::create(req.spec, journal, now_ms())?;
    let store = CheckpointStore::open(&dir.join("checkpoints"))?;
    reg.next_id += 1;
    reg.experiments.insert(
        id.clone(),
        Managed { tuner, store, meta, leases: BTreeMap::new(), checkpoints: BTreeMap::new(), ms_per_unit: None },
    );
    tracing::info!(%id, "experiment created");
    Ok((StatusCode::CREATED, Json(Created { experiment_id: id, settings })))
}

async fn list(State(svc): State<Shared>) -> Json<Vec<ExperimentSummary>> {
    let reg = svc.lock();
    Json(
        reg.experiments
            .iter()
            .map(|(id, m)| ExperimentSummary {
                experiment_id: id.clone(),
                finished: m.tuner.experiment().is_finished(),
                sequence_no: m.tuner.journal().last_sequence_no(),
                configs_sampled: m.tuner.experiment().configs_sampled(),
            })
            .collect(),
    )
}

async fn status(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<StatusResponse>> {
    let reg = svc.lock();
    Ok(Json(status_of(&reg, svc.config.capacity, &id)?))
}

async fn resume(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ResumeRequest>,
) -> ApiResult<Json<StatusResponse>> {
    let mut reg = svc.lock();
    let m = reg.experiments.get_mut(&id).ok_or_else(|| ApiError::not_found("experiment"))?;
    m.tuner.extend(req.additional_n, now_ms())?;
    Ok(Json(status_of(&reg, svc.config.capacity, &id)?))
}

async fn poll(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PollRequest>,
) -> ApiResult<Json<PollResponse>> {
    let now = now_ms();
    let config = &svc.config;
    let mut reg = svc.lock();
    let allocation = allocations(&reg, config.capacity).get(&id).copied().unwrap_or(0);
    let m = reg.experiments.get_mut(&id).ok_or_else(|| ApiError::not_found("experiment"))?;
    m.sweep(now)?;
    let no_work = |finished| Json(PollResponse::NoWork { backoff_ms: config.backoff_ms, finished });
    let wanted = m.meta.kappa as u64 * (m.tuner.experiment().in_flight().len() as u64 + 1);
    if wanted > allocation {
        return Ok(no_work(m.tuner.experiment().is_finished()));
    }
    match m.tuner.next_job(now)? {
        NextJob::Job(a) => {
            let lease_ms = m.lease_ms(config, a.resource);
            m.leases.insert(a.token, Lease { worker_id: req.worker_id.clone(), issued: now, deadline: now + lease_ms });
            let resume_from = a.rung.checked_sub(1).and_then(|prev| m.checkpoints.get(&(a.config.config_id, prev)).cloned());
            let job = WireJob {
                token: a.token,
                experiment_id: id.clone(),
                config_id: a.config.config_id,
                bracket: a.bracket,
                rung: a.rung,
                resource: a.resource,
                prior_resource: a.prior_resource,
                hyperparameters: a.config.values,
                resume_from,
                lease_ms,
            };
            tracing::debug!(%id, token = a.token, worker = %req.worker_id, "job dispatched");
            Ok(Json(PollResponse::Job { job }))
        }
        NextJob::Blocked => Ok(no_work(false)),
        NextJob::Finished => Ok(no_work(true)),
    }
}

async fn report(State(svc): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<ResultAck>> {
    let result: WireResult =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let now = now_ms();
    let mut reg = svc.lock();
    let m = reg.experiments.get_mut(&id).ok_or_else(|| ApiError::not_found("experiment"))?;
    let token = result.token;
    match m.tuner.experiment().settled(token) {
        Some(Settled::Dropped) => {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("job {token} was dropped and reissued")));
        }
        Some(Settled::Completed { loss }) => {
            let same = loss.to_bits() == crate::bracket::normalize_loss(result.loss).to_bits();
            return if same {
                Ok(Json(ResultAck::Duplicate))
            } else {
                Err(ApiError::new(StatusCode::CONFLICT, format!("job {token} already has a different result")))
            };
        }
        None => {}
    }
    let dispatch = m
        .tuner
        .experiment()
        .in_flight()
        .get(&token)
        .cloned()
        .ok_or_else(|| ApiError::not_found(&format!("job {token}")))?;
    let expected = m.tuner.experiment().resource_of(dispatch.bracket, dispatch.rung);
    if result.resource != expected {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("job {token} was for resource {expected}, not {}", result.resource),
        ));
    }
    if let Some(digest) = &result.checkpoint {
        if !m.store.contains(digest) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("checkpoint {digest} was never uploaded")));
        }
    }
    let outcome = m.tuner.record_result_with_checkpoint(token, result.loss, result.checkpoint.clone(), now)?;
    if let Some(digest) = result.checkpoint {
        m.checkpoints.insert((dispatch.config_id, dispatch.rung), digest);
    }
    if let Some(lease) = m.leases.remove(&token) {
        let elapsed = result.train_ms.unwrap_or(now.saturating_sub(lease.issued)) as f64;
        let rate = elapsed / expected.max(1) as f64;
        m.ms_per_unit = Some(match m.ms_per_unit {
            Some(prev) => 0.8 * prev + 0.2 * rate,
            None => rate,
        });
    }
    Ok(Json(match outcome {
        RecordOutcome::Recorded => ResultAck::Recorded,
        RecordOutcome::Duplicate => ResultAck::Duplicate,
    }))
}

async fn upload_checkpoint(
    State(svc): State<Shared>,
    UrlPath((id, config_id, rung)): UrlPath<(String, ConfigId, usize)>,
    body: Bytes,
) -> ApiResult<Json<CheckpointRef>> {
    let reg = svc.lock();
    let m = reg.experiments.get(&id).ok_or_else(|| ApiError::not_found("experiment"))?;
    Ok(Json(m.store.put(config_id, rung, &body)?))
}

async fn download_checkpoint(
    State(svc): State<Shared>,
    UrlPath((id, digest)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let reg = svc.lock();
    let m = reg.experiments.get(&id).ok_or_else(|| ApiError::not_found("experiment"))?;
    let bytes = m.store.get(&digest)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn export_results(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let format: Format = q
        .format
        .as_deref()
        .unwrap_or("csv")
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let reg = svc.lock();
    let m = reg.experiments.get(&id).ok_or_else(|| ApiError::not_found("experiment"))?;
    let mut out = Vec::new();
    export::export(m.tuner.experiment(), format, &mut out)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let content_type = if format == Format::Csv { "text/csv" } else { "application/x-ndjson" };
    Ok(([(header::CONTENT_TYPE, content_type)], out).into_response())
}

/// Serves until `shutdown` resolves, sweeping expired leases in the background.
pub async fn serve(
    service: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let svc = service.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(250));
            loop {
                tick.tick().await;
                svc.sweep_leases();
            }
        })
    };
    let result = axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    result
}

/// Journal path of an experiment inside a data directory.
pub fn journal_path(data_dir: &Path, experiment_id: &str) -> PathBuf {
    data_dir.join("experiments").join(experiment_id).join(JOURNAL_FILE)
}
