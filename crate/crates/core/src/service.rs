//! HTTP service behind the browser annotator.
//!
//! | Method | Path | Result |
//! |---|---|---|
//! | GET | `/cases` | case list with annotation and job state |
//! | GET | `/cases/{id}/slice/{z}` | windowed 8-bit PNG |
//! | PUT | `/cases/{id}/annotation/{target}` | validate and store annotation JSON |
//! | GET | `/cases/{id}/annotation/{target}` | stored annotation, byte for byte |
//! | POST | `/cases/{id}/segment` | start (or return the running) prediction job |
//! | GET | `/jobs/{id}` | job status |
//! | GET | `/cases/{id}/overlay/{z}` | CT slice with predicted labels |
//!
//! Annotations and predictions live in a session directory beside the
//! manifest; source volumes are only ever read.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::annotation::{AnnotationDoc, SeedAnnotation, Target};
use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::mhd::{read_header, read_mhd, write_label_mhd};
use crate::pipeline::{run_prediction, CaseData, Manifest, PipelineConfig};
use crate::render::{overlay_png, slice_png};
use crate::volume::{ChannelKind, LabelVolume, Volume3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobInfo {
    pub job_id: u64,
    pub case_id: String,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
struct CaseSession {
    ct: Option<Arc<Volume3>>,
    /// Latest job for this case.
    job: Option<u64>,
    prediction: Option<Arc<LabelVolume>>,
}

#[derive(Default)]
struct Sessions {
    cases: HashMap<String, CaseSession>,
    jobs: HashMap<u64, JobInfo>,
    next_job: u64,
}

pub struct ServiceState {
    manifest: Manifest,
    config: PipelineConfig,
    forest: Arc<Forest>,
    session_dir: PathBuf,
    sessions: Mutex<Sessions>,
}

impl ServiceState {
    /// `session_dir` defaults to `session/` next to the manifest.
    pub fn new(manifest: Manifest, config: PipelineConfig, forest: Forest, session_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        forest.check_layout(&config.mode.channel_names())?;
        let session_dir = session_dir.unwrap_or_else(|| manifest.dir.join("session"));
        std::fs::create_dir_all(&session_dir).map_err(|e| Error::io(&session_dir, e))?;
        Ok(ServiceState {
            manifest,
            config,
            forest: Arc::new(forest),
            session_dir,
            sessions: Mutex::new(Sessions::default()),
        })
    }

    pub fn session_dir(&self) -> &Path {
        &self.session_dir
    }

    fn annotation_path(&self, case_id: &str, target: Target) -> PathBuf {
        self.session_dir.join(case_id).join(format!("annotation_{target}.json"))
    }

    fn prediction_path(&self, case_id: &str) -> PathBuf {
        self.session_dir.join(case_id).join("prediction.mhd")
    }

    fn sessions(&self) -> std::sync::MutexGuard<'_, Sessions> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn ct(&self, case_id: &str) -> Result<Arc<Volume3>> {
        if let Some(ct) = self.sessions().cases.get(case_id).and_then(|c| c.ct.clone()) {
            return Ok(ct);
        }
        let record = self
            .manifest
            .get(case_id)
            .ok_or_else(|| Error::Dataset(format!("unknown case `{case_id}`")))?;
        let ct = Arc::new(read_mhd(self.manifest.resolve(&record.ct_path))?.with_kind(ChannelKind::CtHu));
        self.sessions().cases.entry(case_id.to_string()).or_default().ct = Some(ct.clone());
        Ok(ct)
    }

    fn stored_annotation(&self, case_id: &str, target: Target) -> Option<Vec<u8>> {
        std::fs::read(self.annotation_path(case_id, target)).ok()
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn not_found(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn known_case(state: &ServiceState, id: &str) -> ApiResult<()> {
    match state.manifest.get(id) {
        Some(_) => Ok(()),
        None => Err(not_found(format!("unknown case `{id}`"))),
    }
}

fn parse_target(s: &str) -> ApiResult<Target> {
    Target::parse(s).ok_or_else(|| not_found(format!("unknown target `{s}`; use `right` or `left`")))
}

fn slice_index(z: &str, nz: usize) -> ApiResult<usize> {
    match z.parse::<usize>() {
        Ok(z) if z < nz => Ok(z),
        _ => Err(not_found(format!("slice `{z}` does not exist (volume has {nz} slices)"))),
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Serialize)]
struct CaseSummary {
    case_id: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    annotations: HashMap<&'static str, bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    job: Option<JobInfo>,
}

async fn list_cases(State(state): State<Arc<ServiceState>>) -> ApiResult<Json<Vec<CaseSummary>>> {
    let mut out = Vec::new();
    for record in &state.manifest.cases {
        let header = read_header(state.manifest.resolve(&record.ct_path)).map_err(internal)?;
        let annotations = [Target::Right, Target::Left]
            .into_iter()
            .map(|t| (t.as_str(), state.annotation_path(&record.case_id, t).exists()))
            .collect();
        let sessions = state.sessions();
        let job = sessions
            .cases
            .get(&record.case_id)
            .and_then(|c| c.job)
            .and_then(|j| sessions.jobs.get(&j).cloned());
        out.push(CaseSummary {
            case_id: record.case_id.clone(),
            dims: header.geometry.dims,
            spacing: header.geometry.spacing,
            annotations,
            job,
        });
    }
    Ok(Json(out))
}

async fn get_slice(State(state): State<Arc<ServiceState>>, UrlPath((id, z)): UrlPath<(String, String)>) -> ApiResult<Response> {
    known_case(&state, &id)?;
    let ct = {
        let state = state.clone();
        let id = id.clone();
        tokio::task::spawn_blocking(move || state.ct(&id)).await.map_err(internal)?.map_err(internal)?
    };
    let z = slice_index(&z, ct.dims()[2])?;
    slice_png(&ct, z, state.config.window).map(png).map_err(internal)
}

async fn put_annotation(
    State(state): State<Arc<ServiceState>>,
    UrlPath((id, target)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    known_case(&state, &id)?;
    let target = parse_target(&target)?;
    let unprocessable = |msg: String| ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg);
    let doc = AnnotationDoc::from_json(&body).map_err(|e| unprocessable(e.to_string()))?;
    if doc.target != target {
        return Err(unprocessable(format!(
            "invalid annotation: body targets `{}` but was sent to `{target}`",
            doc.target
        )));
    }
    let header = read_header(state.manifest.resolve(&state.manifest.get(&id).expect("checked").ct_path)).map_err(internal)?;
    let seed = SeedAnnotation::from_doc(&doc, &header.geometry).map_err(|e| unprocessable(e.to_string()))?;
    let path = state.annotation_path(&id, target);
    {
        // Serialize writes per case.
        let _guard = state.sessions();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(internal)?;
        }
        std::fs::write(&path, &body).map_err(internal)?;
    }
    Ok(Json(serde_json::json!({
        "case_id": id,
        "target": target.as_str(),
        "slice_z": seed.slice_z,
        "seed_voxels": seed.mask.count(),
    })))
}

async fn get_annotation(State(state): State<Arc<ServiceState>>, UrlPath((id, target)): UrlPath<(String, String)>) -> ApiResult<Response> {
    known_case(&state, &id)?;
    let target = parse_target(&target)?;
    let bytes = state
        .stored_annotation(&id, target)
        .ok_or_else(|| not_found(format!("case `{id}` has no {target} annotation")))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

fn set_status(state: &ServiceState, job: u64, status: JobStatus, error: Option<String>) {
    if let Some(info) = state.sessions().jobs.get_mut(&job) {
        info.status = status;
        info.error = error;
    }
}

fn run_job(state: &ServiceState, job: u64, case_id: &str) -> Result<()> {
    set_status(state, job, JobStatus::Running, None);
    let ct = state.ct(case_id)?;
    let geometry = *ct.geometry();
    let seeds = [Target::Right, Target::Left].map(|t| -> Result<_> {
        let bytes = state
            .stored_annotation(case_id, t)
            .ok_or_else(|| Error::Annotation(format!("{t} annotation disappeared")))?;
        Ok(SeedAnnotation::from_doc(&AnnotationDoc::from_json(&bytes)?, &geometry)?.seeds())
    });
    let [right, left] = seeds;
    let case = CaseData {
        id: case_id.to_string(),
        ct: (*ct).clone(),
        seeds: [right?, left?],
        truth: None,
    };
    let labels = run_prediction(&case, &state.forest, &state.config)?;
    write_label_mhd(&labels, state.prediction_path(case_id))?;
    let mut sessions = state.sessions();
    sessions.cases.entry(case_id.to_string()).or_default().prediction = Some(Arc::new(labels));
    if let Some(info) = sessions.jobs.get_mut(&job) {
        info.status = JobStatus::Done;
    }
    Ok(())
}

async fn start_segment(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    known_case(&state, &id)?;
    let missing: Vec<&str> = [Target::Right, Target::Left]
        .into_iter()
        .filter(|&t| !state.annotation_path(&id, t).exists())
        .map(Target::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("case `{id}` is missing the {} annotation", missing.join(" and ")),
        ));
    }
    let job = {
        let mut sessions = state.sessions();
        let current = sessions.cases.get(&id).and_then(|c| c.job);
        if let Some(info) = current.and_then(|j| sessions.jobs.get(&j)) {
            if matches!(info.status, JobStatus::Pending | JobStatus::Running) {
                return Ok((StatusCode::OK, Json(info.clone())).into_response());
            }
        }
        sessions.next_job += 1;
        let job = sessions.next_job;
        let info = JobInfo { job_id: job, case_id: id.clone(), status: JobStatus::Pending, error: None };
        sessions.jobs.insert(job, info.clone());
        sessions.cases.entry(id.clone()).or_default().job = Some(job);
        info
    };
    let worker = state.clone();
    let job_id = job.job_id;
    tokio::task::spawn_blocking(move || {
        if let Err(e) = run_job(&worker, job_id, &id) {
            log::warn!("job {job_id} failed: {e}");
            set_status(&worker, job_id, JobStatus::Failed, Some(e.to_string()));
        }
    });
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_job(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobInfo>> {
    let info = id.parse::<u64>().ok().and_then(|j| state.sessions().jobs.get(&j).cloned());
    info.map(Json).ok_or_else(|| not_found(format!("unknown job `{id}`")))
}

async fn get_overlay(State(state): State<Arc<ServiceState>>, UrlPath((id, z)): UrlPath<(String, String)>) -> ApiResult<Response> {
    known_case(&state, &id)?;
    let prediction = state.sessions().cases.get(&id).and_then(|c| c.prediction.clone());
    let prediction =
        prediction.ok_or_else(|| ApiError(StatusCode::CONFLICT, format!("case `{id}` has no finished segmentation")))?;
    let z = slice_index(&z, prediction.dims()[2])?;
    let ct = state.ct(&id).map_err(internal)?;
    overlay_png(&ct, &prediction, z, state.config.window).map(png).map_err(internal)
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}/slice/{z}", get(get_slice))
        .route("/cases/{id}/annotation/{target}", get(get_annotation).put(put_annotation))
        .route("/cases/{id}/segment", post(start_segment))
        .route("/jobs/{id}", get(get_job))
        .route("/cases/{id}/overlay/{z}", get(get_overlay))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
