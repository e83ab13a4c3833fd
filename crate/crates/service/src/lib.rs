//! HTTP annotation service.
//!
//! Volumes are uploaded once, browsed slice by slice as PNG, and segmented
//! by jobs that propagate a single prompt through the volume. Jobs run on a
//! bounded worker pool; clients poll for progress. All routes live under
//! `/v1`.

pub mod jobs;
pub mod render;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use slideseg_core::inference::{refine_volume, segment_volume, InferenceConfig, ProgressUpdate, WindowPredictor};
use slideseg_core::prompt::Prompt;
use slideseg_core::volume::{
    clip_and_normalize, mask_file_bytes, volume_from_parts, Axis, MaskFile, Spacing, Volume, VolumeMask,
    VolumeSidecar,
};
use tokio::sync::Semaphore;

use crate::jobs::{JobProgress, JobRecord, JobRequest, JobStatus, JobView, PromptBody, RefineRequest};
use crate::store::{Index, Store};

pub type SharedPredictor = Arc<dyn WindowPredictor + Send + Sync>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub max_upload_bytes: usize,
    /// Size of the job worker pool.
    pub workers: usize,
    pub inference: InferenceConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            max_upload_bytes: 256 << 20,
            workers: 1,
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} '{id}' not found"))
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        tracing::error!("{err}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Partial {
    volume_id: String,
    mask: Arc<VolumeMask>,
}

struct Registry {
    index: Index,
    /// Normalized volumes, filled on first use.
    volumes: HashMap<String, Arc<Volume>>,
    /// Latest snapshot of each running job.
    partial: HashMap<String, Partial>,
}

pub struct AppState {
    config: ServiceConfig,
    store: Store,
    predictor: SharedPredictor,
    registry: Mutex<Registry>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn open(config: ServiceConfig, predictor: SharedPredictor) -> slideseg_core::Result<Arc<Self>> {
        config.inference.validate()?;
        if config.workers == 0 {
            return Err(slideseg_core::Error::Config("worker pool needs at least one worker".into()));
        }
        let (store, index) = Store::open(&config.data_dir)?;
        Ok(Arc::new(AppState {
            workers: Arc::new(Semaphore::new(config.workers)),
            config,
            store,
            predictor,
            registry: Mutex::new(Registry {
                index,
                volumes: HashMap::new(),
                partial: HashMap::new(),
            }),
        }))
    }

    fn lock(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().expect("registry lock poisoned")
    }

    fn volume(&self, id: &str) -> ApiResult<Arc<Volume>> {
        {
            let reg = self.lock();
            if !reg.index.has_volume(id) {
                return Err(ApiError::not_found("volume", id));
            }
            if let Some(v) = reg.volumes.get(id) {
                return Ok(v.clone());
            }
        }
        let volume = Arc::new(clip_and_normalize(&self.store.load_volume(id).map_err(ApiError::internal)?));
        Ok(self.lock().volumes.entry(id.to_string()).or_insert(volume).clone())
    }

    fn job(&self, id: &str) -> ApiResult<JobRecord> {
        self.lock()
            .index
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }

    fn final_mask(&self, job_id: &str) -> ApiResult<MaskFile> {
        let bytes = self.store.mask_bytes(job_id).map_err(ApiError::internal)?;
        serde_json::from_slice(&bytes).map_err(ApiError::internal)
    }

    /// Current mask of a job: the stored one when done, the latest
    /// snapshot while running.
    fn job_mask(&self, job: &JobRecord) -> ApiResult<Option<MaskFile>> {
        match job.status {
            JobStatus::Done => self.final_mask(&job.id).map(Some),
            JobStatus::Running => Ok(self
                .lock()
                .partial
                .get(&job.id)
                .map(|p| MaskFile::from_mask(&p.volume_id, &p.mask))),
            _ => Ok(None),
        }
    }

    fn transition(&self, job_id: &str, next: JobStatus, update: impl FnOnce(&mut JobRecord)) -> slideseg_core::Result<()> {
        let mut reg = self.lock();
        let job = reg.index.jobs.get_mut(job_id).expect("job registered before it runs");
        debug_assert!(job.status.can_become(next), "{:?} -> {next:?}", job.status);
        job.status = next;
        update(job);
        if next.is_terminal() {
            reg.partial.remove(job_id);
        }
        self.store.save_index(&reg.index)
    }

    /// Registers a queued job unless the volume already has an active one.
    fn enqueue(&self, volume_id: &str, axis: Axis, slice: usize, prompt: PromptBody, parent: Option<String>, total: usize) -> ApiResult<String> {
        let mut reg = self.lock();
        if let Some(active) = reg.index.active_job(volume_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("volume '{volume_id}' already has job '{}' in progress", active.id),
            ));
        }
        let id = reg.index.next_job_id();
        reg.index.jobs.insert(
            id.clone(),
            JobRecord {
                id: id.clone(),
                volume_id: volume_id.to_string(),
                axis,
                slice,
                prompt,
                status: JobStatus::Queued,
                progress: JobProgress { labeled: 0, total },
                parent,
                error: None,
            },
        );
        self.store.save_index(&reg.index).map_err(ApiError::internal)?;
        Ok(id)
    }

    fn record_progress(&self, job_id: &str, volume_id: &str, update: &ProgressUpdate<'_>) {
        let mut reg = self.lock();
        if let Some(job) = reg.index.jobs.get_mut(job_id) {
            job.progress.labeled = job.progress.labeled.max(update.labeled);
            job.progress.total = update.total;
        }
        reg.partial.insert(
            job_id.to_string(),
            Partial {
                volume_id: volume_id.to_string(),
                mask: Arc::new(update.mask.clone()),
            },
        );
    }
}

struct JobSpec {
    id: String,
    volume: Arc<Volume>,
    axis: Axis,
    slice: usize,
    prompt: Prompt,
    parent_mask: Option<VolumeMask>,
}

fn execute(state: &AppState, spec: &JobSpec) -> slideseg_core::Result<VolumeMask> {
    let mut progress = |u: &ProgressUpdate<'_>| state.record_progress(&spec.id, &spec.volume.id, u);
    let predictor = state.predictor.as_ref();
    let cfg = &state.config.inference;
    let result = match &spec.parent_mask {
        None => segment_volume(predictor, &spec.volume, spec.axis, spec.slice, &spec.prompt, cfg, Some(&mut progress))?,
        Some(parent) => refine_volume(
            predictor,
            &spec.volume,
            parent,
            spec.axis,
            spec.slice,
            &spec.prompt,
            cfg,
            Some(&mut progress),
        )?,
    };
    Ok(result.mask)
}

fn spawn_job(state: Arc<AppState>, spec: JobSpec) {
    tokio::spawn(async move {
        let _permit = state.workers.clone().acquire_owned().await.expect("worker pool closed");
        let id = spec.id.clone();
        if let Err(e) = state.transition(&id, JobStatus::Running, |_| {}) {
            tracing::error!("job {id}: {e}");
        }
        let worker = state.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let mask = execute(&worker, &spec)?;
            let bytes = mask_file_bytes(&spec.volume.id, &mask)?;
            worker.store.put_mask(&spec.id, &bytes)?;
            Ok::<_, slideseg_core::Error>(mask.labeled_slice_count(spec.axis))
        })
        .await;
        let saved = match outcome {
            Ok(Ok(labeled)) => state.transition(&id, JobStatus::Done, |j| {
                j.progress.labeled = j.progress.labeled.max(labeled);
            }),
            Ok(Err(e)) => state.transition(&id, JobStatus::Failed, |j| j.error = Some(e.to_string())),
            Err(e) => state.transition(&id, JobStatus::Failed, |j| j.error = Some(format!("worker panicked: {e}"))),
        };
        if let Err(e) = saved {
            tracing::error!("job {id}: {e}");
        }
    });
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/v1/volumes", post(upload_volume).get(list_volumes))
        .route("/v1/volumes/{id}", get(volume_info))
        .route("/v1/volumes/{id}/slices/{axis}/{index}", get(slice_image))
        .route("/v1/volumes/{id}/jobs", post(create_job))
        .route("/v1/jobs/{id}", get(job_status))
        .route("/v1/jobs/{id}/mask", get(job_mask_file))
        .route("/v1/jobs/{id}/refine", post(refine_job))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Upload envelope: a volume sidecar plus its raw payload in base64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UploadRequest {
    pub sidecar: VolumeSidecar,
    pub data: String,
}

impl UploadRequest {
    pub fn for_volume(volume: &Volume) -> Self {
        UploadRequest {
            sidecar: VolumeSidecar::for_volume(volume),
            data: base64::engine::general_purpose::STANDARD.encode(slideseg_core::volume::volume_raw_bytes(volume)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedId {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: String,
    /// Id carried by the uploaded container; masks reference this one.
    pub volume_id: String,
    pub shape: [usize; 3],
    pub spacing: Spacing,
    pub modality: String,
}

async fn upload_volume(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<CreatedId>)> {
    let bad = |e: String| ApiError::new(StatusCode::BAD_REQUEST, e);
    let req: UploadRequest = serde_json::from_slice(&body).map_err(|e| bad(format!("malformed container: {e}")))?;
    let raw = base64::engine::general_purpose::STANDARD
        .decode(req.data.as_bytes())
        .map_err(|e| bad(format!("payload is not base64: {e}")))?;
    volume_from_parts(&req.sidecar, &raw).map_err(|e| bad(e.to_string()))?;
    let id = state.lock().index.next_volume_id();
    state.store.put_volume(&id, &req.sidecar, &raw).map_err(ApiError::internal)?;
    let mut reg = state.lock();
    reg.index.volumes.push(id.clone());
    state.store.save_index(&reg.index).map_err(ApiError::internal)?;
    tracing::info!("stored volume {id} ({:?})", req.sidecar.shape);
    Ok((StatusCode::CREATED, Json(CreatedId { id })))
}

async fn list_volumes(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(state.lock().index.volumes.clone())
}

async fn volume_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<VolumeInfo>> {
    let v = state.volume(&id)?;
    let (d, h, w) = v.shape();
    Ok(Json(VolumeInfo {
        id,
        volume_id: v.id.clone(),
        shape: [d, h, w],
        spacing: v.spacing,
        modality: VolumeSidecar::for_volume(&v).modality,
    }))
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    overlay: Option<String>,
}

async fn slice_image(
    State(state): State<Arc<AppState>>,
    Path((id, axis, index)): Path<(String, String, usize)>,
    Query(query): Query<SliceQuery>,
) -> ApiResult<Response> {
    let volume = state.volume(&id)?;
    let axis: Axis = axis
        .parse()
        .map_err(|e: slideseg_core::Error| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let dim = volume.dim(axis);
    if index >= dim {
        return Err(ApiError::new(
            StatusCode::RANGE_NOT_SATISFIABLE,
            format!("slice {index} outside 0..{dim} along {axis}"),
        ));
    }
    let overlay = match query.overlay {
        None => None,
        Some(job_id) => {
            let job = state.job(&job_id)?;
            if job.volume_id != id {
                return Err(ApiError::not_found("job", &format!("{job_id}' on volume '{id}")));
            }
            match state.job_mask(&job)? {
                Some(file) => Some(file.to_mask().map_err(ApiError::internal)?),
                None => None,
            }
        }
    };
    let png = render::slice_png(volume.slice(axis, index), overlay.as_ref().map(|m| m.slice(axis, index)));
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn unprocessable(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
}

/// Checks that `slice` can centre a window and that the prompt fits it.
fn validate_job(volume: &Volume, axis: Axis, slice: usize, prompt: &PromptBody) -> ApiResult<Prompt> {
    let dim = volume.dim(axis);
    if slice == 0 || slice + 1 >= dim {
        return Err(unprocessable(format!(
            "slice {slice} is not an interior slice of 0..{dim} along {axis}"
        )));
    }
    let prompt = prompt.to_prompt().map_err(unprocessable)?;
    let (h, w) = volume.slice_shape(axis);
    prompt.validate(h, w).map_err(unprocessable)?;
    Ok(prompt)
}

async fn create_job(
    State(state): State<Arc<AppState>>,
    Path(volume_id): Path<String>,
    Json(req): Json<JobRequest>,
) -> ApiResult<(StatusCode, Json<CreatedId>)> {
    let volume = state.volume(&volume_id)?;
    let prompt = validate_job(&volume, req.axis, req.slice, &req.prompt)?;
    let id = state.enqueue(&volume_id, req.axis, req.slice, req.prompt, None, volume.dim(req.axis))?;
    spawn_job(
        state.clone(),
        JobSpec {
            id: id.clone(),
            volume,
            axis: req.axis,
            slice: req.slice,
            prompt,
            parent_mask: None,
        },
    );
    Ok((StatusCode::ACCEPTED, Json(CreatedId { id })))
}

async fn refine_job(
    State(state): State<Arc<AppState>>,
    Path(parent_id): Path<String>,
    Json(req): Json<RefineRequest>,
) -> ApiResult<(StatusCode, Json<CreatedId>)> {
    let parent = state.job(&parent_id)?;
    if parent.status != JobStatus::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job '{parent_id}' is {:?}; only done jobs can be refined", parent.status),
        ));
    }
    let volume = state.volume(&parent.volume_id)?;
    let prompt = validate_job(&volume, parent.axis, req.slice, &req.prompt)?;
    let parent_mask = state.final_mask(&parent_id)?.to_mask().map_err(ApiError::internal)?;
    let id = state.enqueue(
        &parent.volume_id,
        parent.axis,
        req.slice,
        req.prompt,
        Some(parent_id),
        volume.dim(parent.axis),
    )?;
    spawn_job(
        state.clone(),
        JobSpec {
            id: id.clone(),
            volume,
            axis: parent.axis,
            slice: req.slice,
            prompt,
            parent_mask: Some(parent_mask),
        },
    );
    Ok((StatusCode::ACCEPTED, Json(CreatedId { id })))
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    let record = state.job(&id)?;
    let results = state.job_mask(&record)?;
    Ok(Json(JobView { record, results }))
}

async fn job_mask_file(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id)?;
    if job.status != JobStatus::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job '{id}' is {:?}; its mask is not final", job.status),
        ));
    }
    let bytes = state.store.mask_bytes(&id).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}
