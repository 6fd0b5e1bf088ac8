//! HTTP annotation service.
//!
//! Serves the datasets under a content root, hands out one image at a time
//! per annotation session (with a class or cluster proposal unless the
//! session runs without proposals), and stores each decision with the time
//! elapsed since the image was served. Reports are computed from the stored
//! logs.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/datasets` | manifests under the root |
//! | POST | `/api/sessions` | open a session |
//! | GET | `/api/sessions/{id}/next` | next task, marks it served |
//! | POST | `/api/sessions/{id}/annotations` | store one decision |
//! | GET | `/api/report?manifest=…` | consistency report |
//! | GET | `/images/…` | static files under the root |

mod catalog;
mod error;
mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, PoisonError};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use dc3::dataset::AnnotationRecord;
use dc3::proposals::{build_report, ConsistencyReport, ProposalKind, ProposalMode, SessionHeader};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub use catalog::{discover, image_url, Dataset, DatasetInfo, MANIFEST_FILE, PROPOSALS_DIR};
pub use error::{ApiError, ServiceError};
pub use store::{JsonlStore, SessionStore};

/// Most sibling thumbnails attached to a cluster proposal.
pub const MAX_SIBLINGS: usize = 8;

/// Seconds on some fixed scale; only differences matter.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Wall-clock seconds since the Unix epoch.
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Content root: datasets live here or one directory below.
    pub root: PathBuf,
    /// Session logs; defaults to `<root>/sessions`.
    pub sessions_dir: Option<PathBuf>,
    /// Allowed UI origin; any origin when `None`.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            root: root.into(),
            sessions_dir: None,
            cors_origin: None,
        }
    }
}

struct OpenSession {
    header: SessionHeader,
    dataset: usize,
    /// Assigned images in serving order.
    images: Vec<String>,
    /// The served, not yet annotated image and when it was served.
    outstanding: Option<(String, f64)>,
    done: HashMap<String, AnnotationRecord>,
    last_timestamp: f64,
}

struct Inner {
    root: PathBuf,
    datasets: Vec<Dataset>,
    store: Box<dyn SessionStore>,
    clock: Box<dyn Clock>,
    sessions: Mutex<HashMap<String, Arc<Mutex<OpenSession>>>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Discovers datasets under the (canonicalized) root and opens the
    /// session store.
    pub fn new(config: &ServiceConfig, clock: Box<dyn Clock>) -> Result<Self, ServiceError> {
        let root = config
            .root
            .canonicalize()
            .map_err(|e| ServiceError::io(&config.root, e))?;
        let datasets = discover(&root)?;
        let store = JsonlStore::open(config.sessions_dir.clone().unwrap_or_else(|| root.join("sessions")))?;
        Ok(Self::with_store(root, datasets, Box::new(store), clock))
    }

    pub fn with_store(root: PathBuf, datasets: Vec<Dataset>, store: Box<dyn SessionStore>, clock: Box<dyn Clock>) -> Self {
        AppState(Arc::new(Inner {
            root,
            datasets,
            store,
            clock,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    pub fn datasets(&self) -> Vec<DatasetInfo> {
        self.0.datasets.iter().map(Dataset::info).collect()
    }

    fn dataset(&self, name: &str) -> Option<usize> {
        self.0.datasets.iter().position(|d| d.manifest.name == name)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<OpenSession>>, ApiError> {
        lock(&self.0.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session '{id}'")))
    }

    fn fresh_id(&self) -> String {
        loop {
            let n = self.0.next_id.fetch_add(1, Ordering::Relaxed);
            let id = format!("s{n:06}");
            if !self.0.store.exists(&id) && !lock(&self.0.sessions).contains_key(&id) {
                return id;
            }
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub annotator: String,
    pub manifest: String,
    pub mode: ProposalMode,
    pub repetition: u32,
    /// Annotate only the first `limit` images of the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub mode: ProposalMode,
    pub n_images: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskProposal {
    Certain {
        class: usize,
        class_name: String,
    },
    Fuzzy {
        cluster: usize,
        description: String,
        /// The cluster's most likely class by mean prediction.
        class: usize,
        /// Other members of the cluster.
        siblings: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct Task {
    pub image_id: String,
    pub image_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<TaskProposal>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct NextTask {
    pub done: bool,
    pub remaining: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitAnnotation {
    pub image_id: String,
    pub class_index: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReportQuery {
    pub manifest: Option<String>,
}

async fn list_datasets(State(state): State<AppState>) -> Json<Vec<DatasetInfo>> {
    Json(state.datasets())
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    if req.annotator.trim().is_empty() {
        return Err(ApiError::unprocessable("annotator must not be empty"));
    }
    let idx = state
        .dataset(&req.manifest)
        .ok_or_else(|| ApiError::not_found(format!("unknown manifest '{}'", req.manifest)))?;
    let ds = &state.0.datasets[idx];
    if req.mode != ProposalMode::None && !ds.proposals.contains_key(&req.mode) {
        return Err(ApiError::unprocessable(format!(
            "no {} proposals for '{}'",
            req.mode, req.manifest
        )));
    }
    let n = req.limit.unwrap_or(ds.manifest.items.len()).min(ds.manifest.items.len());
    if n == 0 {
        return Err(ApiError::unprocessable("session would have no images"));
    }
    let same = |h: &SessionHeader| {
        h.annotator == req.annotator && h.manifest == req.manifest && h.mode == req.mode && h.repetition == req.repetition
    };
    let clash_open = lock(&state.0.sessions).values().any(|s| same(&lock(s).header));
    let clash_stored = state.0.store.load_all()?.iter().any(|(_, s)| same(&s.header()));
    if clash_open || clash_stored {
        return Err(ApiError::conflict(format!(
            "{} already has repetition {} in mode {} for '{}'",
            req.annotator, req.repetition, req.mode, req.manifest
        )));
    }

    let header = SessionHeader {
        annotator: req.annotator,
        mode: req.mode,
        repetition: req.repetition,
        manifest: req.manifest,
        started: Some(state.0.clock.now()),
    };
    let id = state.fresh_id();
    state.0.store.create(&id, &header)?;
    let session = OpenSession {
        header,
        dataset: idx,
        images: ds.manifest.items[..n].iter().map(|i| i.image_id.clone()).collect(),
        outstanding: None,
        done: HashMap::new(),
        last_timestamp: f64::NEG_INFINITY,
    };
    lock(&state.0.sessions).insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: id,
            mode: req.mode,
            n_images: n,
            class_names: ds.manifest.class_names.clone(),
        }),
    ))
}

fn task_for(state: &AppState, session: &OpenSession, image_id: &str) -> Result<Task, ApiError> {
    let ds = &state.0.datasets[session.dataset];
    let url_of = |id: &str| -> Result<String, ApiError> {
        let item = ds
            .manifest
            .item(id)
            .ok_or_else(|| ApiError::not_found(format!("image '{id}' missing from manifest")))?;
        image_url(&state.0.root, &ds.manifest.resolve(item))
            .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("image '{id}' is outside the root")))
    };
    let proposal = match ds.proposals.get(&session.header.mode) {
        None => None,
        Some(set) => {
            let entry = set
                .image(image_id)
                .ok_or_else(|| ApiError::not_found(format!("no proposal for '{image_id}'")))?;
            match (entry.kind, entry.class, entry.cluster) {
                (ProposalKind::Certain, Some(class), _) => Some(TaskProposal::Certain {
                    class,
                    class_name: ds.manifest.class_names.get(class).cloned().unwrap_or_default(),
                }),
                (ProposalKind::Fuzzy, _, Some(cluster)) => {
                    let c = set
                        .cluster(cluster)
                        .ok_or_else(|| ApiError::not_found(format!("no cluster {cluster}")))?;
                    let siblings = c
                        .members
                        .iter()
                        .filter(|m| m.as_str() != image_id)
                        .take(MAX_SIBLINGS)
                        .map(|m| url_of(m))
                        .collect::<Result<Vec<_>, _>>()?;
                    Some(TaskProposal::Fuzzy {
                        cluster,
                        description: c.description.clone(),
                        class: c.class,
                        siblings,
                    })
                }
                _ => None,
            }
        }
    };
    Ok(Task {
        image_id: image_id.to_string(),
        image_url: url_of(image_id)?,
        proposal,
    })
}

async fn next_task(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<NextTask>, ApiError> {
    let session = state.session(&id)?;
    let mut s = lock(&session);
    let total = s.images.len();
    let remaining = total - s.done.len();
    let current = match &s.outstanding {
        Some((image, _)) => Some(image.clone()),
        None => {
            let next = s.images.iter().find(|i| !s.done.contains_key(*i)).cloned();
            if let Some(image) = &next {
                s.outstanding = Some((image.clone(), state.0.clock.now()));
            }
            next
        }
    };
    let task = current.map(|image| task_for(&state, &s, &image)).transpose()?;
    Ok(Json(NextTask {
        done: task.is_none(),
        remaining,
        total,
        task,
    }))
}

async fn submit_annotation(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SubmitAnnotation>,
) -> Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    let session = state.session(&id)?;
    let mut s = lock(&session);
    if !s.images.contains(&req.image_id) {
        return Err(ApiError::not_found(format!("image '{}' is not part of session {id}", req.image_id)));
    }
    let k = state.0.datasets[s.dataset].manifest.num_classes;
    if req.class_index >= k {
        return Err(ApiError::unprocessable(format!(
            "class {} out of range for {k} classes",
            req.class_index
        )));
    }
    if let Some(existing) = s.done.get(&req.image_id) {
        if existing.class_index == req.class_index {
            return Ok((StatusCode::OK, Json(existing.clone())));
        }
        return Err(ApiError::conflict(format!(
            "image '{}' already annotated as class {}",
            req.image_id, existing.class_index
        )));
    }
    let served_at = match &s.outstanding {
        Some((image, t)) if *image == req.image_id => *t,
        _ => {
            return Err(ApiError::conflict(format!(
                "image '{}' has not been served in session {id}",
                req.image_id
            )))
        }
    };
    let now = state.0.clock.now();
    let timestamp = now.max(s.last_timestamp);
    let record = AnnotationRecord {
        timestamp: Some(timestamp),
        duration: Some((now - served_at).max(0.0)),
        repetition: s.header.repetition,
        ..AnnotationRecord::new(req.image_id.clone(), s.header.annotator.clone(), req.class_index)
    };
    state.0.store.append(&id, &record)?;
    s.last_timestamp = timestamp;
    s.outstanding = None;
    s.done.insert(req.image_id, record.clone());
    Ok((StatusCode::CREATED, Json(record)))
}

async fn report(
    State(state): State<AppState>,
    Query(q): Query<ReportQuery>,
) -> Result<Json<ConsistencyReport>, ApiError> {
    if let Some(name) = &q.manifest {
        if state.dataset(name).is_none() {
            return Err(ApiError::not_found(format!("unknown manifest '{name}'")));
        }
    }
    let sessions: Vec<_> = state
        .0
        .store
        .load_all()?
        .into_iter()
        .map(|(_, s)| s)
        .filter(|s| q.manifest.as_ref().is_none_or(|m| *m == s.manifest))
        .collect();
    Ok(Json(build_report(&sessions)))
}

/// The full application: API routes, static images and CORS.
pub fn router(state: AppState, cors_origin: Option<&str>) -> Result<Router, ServiceError> {
    let origin = match cors_origin {
        None => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| ServiceError::InvalidOrigin(o.to_string()))?),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(tower_http::cors::Any)
        .allow_headers(tower_http::cors::Any);
    let images = ServeDir::new(state.0.root.clone());
    Ok(Router::new()
        .route("/api/datasets", get(list_datasets))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/next", get(next_task))
        .route("/api/sessions/{id}/annotations", post(submit_annotation))
        .route("/api/report", get(report))
        .nest_service("/images", images)
        .layer(cors)
        .with_state(state))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = AppState::new(&config, Box::new(SystemClock))?;
    let app = router(state, config.cors_origin.as_deref())?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Serve { addr, source })?;
    axum::serve(listener, app)
        .await
        .map_err(|source| ServiceError::Serve { addr, source })
}
