//! HTTP job API: upload or generate datasets, queue selection runs, poll
//! live progress, fetch reports and trajectories.
//!
//! Training runs on a pool of plain threads fed by a FIFO queue; handlers
//! only read snapshots that the trainer publishes once per epoch.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;

use crate::data::{parse_csv, ColumnSchema, Dataset, Recipe, SyntheticSpec};
use crate::error::{Error, Result};
use crate::selector::{prepare, run_selection_observed, select_top_k, ImportanceReport, SelectionRequest, TrajectoryExport};
use crate::trainer::{Control, TrainConfig};

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    pub workers: usize,
    pub data_dir: Option<PathBuf>,
}

/// Cores minus one, at least one.
pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get().saturating_sub(1))
        .unwrap_or(1)
        .max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub epoch: usize,
    pub loss: f64,
    pub mask: Vec<f64>,
}

/// What `GET /jobs/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub state: JobState,
    pub dataset_id: String,
    pub condition: Vec<String>,
    pub k: usize,
    pub config: TrainConfig,
    pub candidates: Vec<String>,
    pub progress: Option<JobProgress>,
    /// Path of the report once the job is done.
    pub result: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetView {
    pub id: String,
    pub rows: usize,
    pub columns: Vec<ColumnSchema>,
}

/// Body of `POST /datasets`: either a recipe or a CSV with its schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetUpload {
    Recipe {
        recipe: String,
        #[serde(default)]
        n: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        noise: Option<f64>,
        #[serde(default)]
        variables: Option<usize>,
    },
    Csv {
        csv: String,
        schema: Vec<ColumnSchema>,
    },
}

/// Body of `POST /jobs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRequest {
    pub dataset_id: String,
    #[serde(default)]
    pub condition: Vec<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub config: TrainConfig,
}

fn default_k() -> usize {
    5
}

struct Live {
    state: JobState,
    progress: Option<JobProgress>,
    epochs: Vec<usize>,
    masks: Vec<Vec<f64>>,
    losses: Vec<f64>,
    report: Option<ImportanceReport>,
    trajectory: Option<TrajectoryExport>,
    error: Option<String>,
}

struct Job {
    id: String,
    dataset_id: String,
    request: SelectionRequest,
    candidates: Vec<String>,
    live: Mutex<Live>,
}

impl Job {
    fn view(&self) -> JobView {
        let live = self.live.lock().expect("job lock");
        JobView {
            id: self.id.clone(),
            state: live.state,
            dataset_id: self.dataset_id.clone(),
            condition: self.request.condition.clone(),
            k: self.request.k,
            config: self.request.config.clone(),
            candidates: self.candidates.clone(),
            progress: live.progress.clone(),
            result: live.report.as_ref().map(|_| format!("/jobs/{}/report", self.id)),
            error: live.error.clone(),
        }
    }
}

pub struct AppState {
    datasets: RwLock<HashMap<String, Arc<StoredDataset>>>,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    queue: Mutex<Sender<Arc<Job>>>,
    next_job: AtomicU64,
    data_dir: Option<PathBuf>,
}

struct StoredDataset {
    ds: Dataset,
    schema: Vec<ColumnSchema>,
}

impl AppState {
    /// Builds the store, reloads persisted datasets, and starts the workers.
    pub fn new(opts: ServiceOptions) -> Result<Arc<Self>> {
        let (tx, rx) = channel::<Arc<Job>>();
        let state = Arc::new(Self {
            datasets: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            queue: Mutex::new(tx),
            next_job: AtomicU64::new(1),
            data_dir: opts.data_dir.clone(),
        });
        if let Some(dir) = &opts.data_dir {
            state.reload(dir)?;
        }
        let rx = Arc::new(Mutex::new(rx));
        for i in 0..opts.workers.max(1) {
            let rx = Arc::clone(&rx);
            let st = Arc::clone(&state);
            std::thread::Builder::new()
                .name(format!("cvs-worker-{i}"))
                .spawn(move || worker_loop(st, rx))
                .map_err(|e| Error::io("worker thread", e))?;
        }
        Ok(state)
    }

    fn reload(&self, dir: &Path) -> Result<()> {
        let dsdir = dir.join("datasets");
        let Ok(entries) = std::fs::read_dir(&dsdir) else {
            return Ok(());
        };
        for entry in entries.flatten() {
            let path = entry.path();
            let Some(id) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".schema.json"))
            else {
                continue;
            };
            let schema = crate::data::read_schema(&path)?;
            let csv_path = dsdir.join(format!("{id}.csv"));
            let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            let ds = parse_csv(&text, &csv_path, &schema, None)?;
            log::info!("reloaded dataset {id}");
            self.datasets
                .write()
                .expect("dataset lock")
                .insert(id.to_string(), Arc::new(StoredDataset { ds, schema }));
        }
        Ok(())
    }

    fn persist(&self, sub: &str, name: &str, text: &str) {
        let Some(dir) = &self.data_dir else { return };
        let dir = dir.join(sub);
        let result = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(dir.join(name), text));
        if let Err(e) = result {
            log::warn!("could not persist {sub}/{name}: {e}");
        }
    }

    fn add_dataset(&self, upload: DatasetUpload) -> Result<DatasetView> {
        let (csv_text, schema) = match upload {
            DatasetUpload::Recipe {
                recipe,
                n,
                seed,
                noise,
                variables,
            } => {
                let recipe = Recipe::parse(&recipe)?;
                let d = SyntheticSpec::default();
                let base = SyntheticSpec {
                    n_samples: n.unwrap_or(d.n_samples),
                    n_variables: variables.unwrap_or(d.n_variables),
                    noise_std: noise.unwrap_or(d.noise_std),
                    seed: seed.unwrap_or(1),
                    ..d
                };
                let ds = recipe.generate(base)?;
                let mut buf = Vec::new();
                ds.write_csv(&mut buf)?;
                (String::from_utf8(buf).expect("csv output is utf-8"), ds.schema())
            }
            DatasetUpload::Csv { csv, schema } => (csv, schema),
        };
        let mut h = Sha256::new();
        h.update(csv_text.as_bytes());
        h.update(serde_json::to_vec(&schema)?);
        let id = hex::encode(&h.finalize()[..8]);
        let ds = parse_csv(&csv_text, Path::new("upload.csv"), &schema, None)?;
        let view = DatasetView {
            id: id.clone(),
            rows: ds.len(),
            columns: schema.clone(),
        };
        let fresh = self
            .datasets
            .write()
            .expect("dataset lock")
            .insert(id.clone(), Arc::new(StoredDataset { ds, schema: schema.clone() }))
            .is_none();
        if fresh {
            self.persist("datasets", &format!("{id}.csv"), &csv_text);
            self.persist("datasets", &format!("{id}.schema.json"), &serde_json::to_string_pretty(&schema)?);
        }
        Ok(view)
    }

    fn dataset(&self, id: &str) -> Option<Arc<StoredDataset>> {
        self.datasets.read().expect("dataset lock").get(id).cloned()
    }

    fn job(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().expect("job lock").get(id).cloned()
    }

    fn submit(&self, req: JobRequest) -> std::result::Result<JobView, ApiError> {
        let stored = self
            .dataset(&req.dataset_id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown dataset {}", req.dataset_id)))?;
        let request = SelectionRequest {
            condition: req.condition,
            k: req.k,
            config: req.config,
        };
        request.config.validate().map_err(ApiError::unprocessable)?;
        let prepared = prepare(&stored.ds, &request.condition, &request.config).map_err(ApiError::unprocessable)?;
        let candidates = prepared.candidate_names();
        select_top_k(&candidates, request.k).map_err(ApiError::unprocessable)?;

        let id = format!("job-{}", self.next_job.fetch_add(1, Ordering::SeqCst));
        let job = Arc::new(Job {
            id: id.clone(),
            dataset_id: req.dataset_id,
            request,
            candidates,
            live: Mutex::new(Live {
                state: JobState::Queued,
                progress: None,
                epochs: Vec::new(),
                masks: Vec::new(),
                losses: Vec::new(),
                report: None,
                trajectory: None,
                error: None,
            }),
        });
        let view = job.view();
        self.jobs.write().expect("job lock").insert(id, Arc::clone(&job));
        self.queue
            .lock()
            .expect("queue lock")
            .send(job)
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "worker pool has stopped"))?;
        Ok(view)
    }

    fn run_job(&self, job: &Job) {
        let Some(stored) = self.dataset(&job.dataset_id) else {
            let mut live = job.live.lock().expect("job lock");
            live.state = JobState::Failed;
            live.error = Some("dataset disappeared".into());
            return;
        };
        {
            let mut live = job.live.lock().expect("job lock");
            live.state = JobState::Running;
            let d = job.candidates.len();
            live.epochs.push(0);
            live.masks.push(vec![1.0 / d as f64; d]);
        }
        let result = run_selection_observed(&stored.ds, &job.request, |p| {
            let mut live = job.live.lock().expect("job lock");
            live.progress = Some(JobProgress {
                epoch: p.epoch,
                loss: p.loss,
                mask: p.mask.to_vec(),
            });
            live.epochs.push(p.epoch);
            live.masks.push(p.mask.to_vec());
            live.losses.push(p.loss);
            Control::Continue
        });
        let mut live = job.live.lock().expect("job lock");
        match result {
            Ok(sel) => {
                let traj = TrajectoryExport::new(&sel.report, &sel.record, false);
                if let Ok(text) = sel.report.to_json() {
                    self.persist("reports", &format!("{}.json", job.id), &text);
                }
                if let Ok(text) = traj.to_json() {
                    self.persist("reports", &format!("{}.trajectory.json", job.id), &text);
                }
                live.report = Some(sel.report);
                live.trajectory = Some(traj);
                live.state = JobState::Done;
            }
            Err(e) => {
                log::error!("{} failed: {e}", job.id);
                live.error = Some(e.to_string());
                live.state = JobState::Failed;
            }
        }
    }
}

fn worker_loop(state: Arc<AppState>, rx: Arc<Mutex<Receiver<Arc<Job>>>>) {
    loop {
        let next = rx.lock().expect("queue lock").recv();
        match next {
            Ok(job) => state.run_job(&job),
            Err(_) => return,
        }
    }
}

/// A JSON `{"error": …}` response with a status code.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(e: Error) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            Error::Numeric { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", post(post_dataset).get(list_datasets))
        .route("/datasets/{id}", get(get_dataset))
        .route("/jobs", post(post_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/report", get(get_report))
        .route("/jobs/{id}/trajectory", get(get_trajectory))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn post_dataset(
    State(st): State<Arc<AppState>>,
    body: std::result::Result<Json<DatasetUpload>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<DatasetView>)> {
    let Json(upload) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let view = tokio::task::spawn_blocking(move || st.add_dataset(upload))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_datasets(State(st): State<Arc<AppState>>) -> Json<Vec<DatasetView>> {
    let map = st.datasets.read().expect("dataset lock");
    let mut out: Vec<DatasetView> = map
        .iter()
        .map(|(id, d)| DatasetView {
            id: id.clone(),
            rows: d.ds.len(),
            columns: d.schema.clone(),
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

async fn get_dataset(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<DatasetView>> {
    let d = st
        .dataset(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown dataset {id}")))?;
    Ok(Json(DatasetView {
        id,
        rows: d.ds.len(),
        columns: d.schema.clone(),
    }))
}

async fn post_job(
    State(st): State<Arc<AppState>>,
    body: std::result::Result<Json<JobRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<JobView>)> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    Ok((StatusCode::ACCEPTED, Json(st.submit(req)?)))
}

async fn list_jobs(State(st): State<Arc<AppState>>) -> Json<Vec<JobView>> {
    let jobs: Vec<Arc<Job>> = st.jobs.read().expect("job lock").values().cloned().collect();
    let mut views: Vec<JobView> = jobs.iter().map(|j| j.view()).collect();
    views.sort_by_key(|v| v.id.trim_start_matches("job-").parse::<u64>().unwrap_or(0));
    Json(views)
}

fn find_job(st: &AppState, id: &str) -> ApiResult<Arc<Job>> {
    st.job(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

async fn get_job(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobView>> {
    Ok(Json(find_job(&st, &id)?.view()))
}

async fn get_report(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ImportanceReport>> {
    let job = find_job(&st, &id)?;
    let live = job.live.lock().expect("job lock");
    match (&live.report, live.state) {
        (Some(r), _) => Ok(Json(r.clone())),
        (None, JobState::Failed) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job {id} failed: {}", live.error.as_deref().unwrap_or("unknown error")),
        )),
        (None, state) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job {id} is {} and has no report yet", serde_json::to_value(state).unwrap_or_default().as_str().unwrap_or("")),
        )),
    }
}

async fn get_trajectory(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<TrajectoryExport>> {
    let job = find_job(&st, &id)?;
    let live = job.live.lock().expect("job lock");
    if let Some(t) = &live.trajectory {
        return Ok(Json(t.clone()));
    }
    Ok(Json(TrajectoryExport {
        run_id: job.id.clone(),
        candidates: job.candidates.clone(),
        epochs: live.epochs.clone(),
        masks: live.masks.clone(),
        losses: live.losses.clone(),
        converged_at: None,
        epoch_seconds: Vec::new(),
    }))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, opts: ServiceOptions) -> Result<()> {
    let state = AppState::new(opts)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}
