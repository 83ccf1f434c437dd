//! HTTP/JSON service over the corpus, annotations, inference, reviews and
//! the latest evaluation report.
//!
//! Annotation and review writes go through one lock each and are appended to
//! JSONL logs in the work directory; images are never modified.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use acp_core::corpus::{Corpus, PixelBox, RoiSpec};
use acp_core::detector::{Detection, Detector};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::stages::{detect_image, load_checkpoint, load_corpus, load_prepared, Workspace};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    body: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), body: None }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(extra) = self.body {
            body["current"] = extra;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn now_unix() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record).expect("serializable");
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Current annotation of one image: consensus boxes plus each annotator's
/// own boxes, with the revision the next write must quote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationState {
    pub image_id: String,
    pub revision: u64,
    pub consensus: Vec<PixelBox>,
    pub annotators: BTreeMap<String, Vec<PixelBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationWrite {
    pub annotator_id: String,
    pub boxes: Vec<PixelBox>,
    /// Revision the client last saw.
    pub revision: u64,
    /// Whether the boxes replace the consensus set rather than the
    /// annotator's own set.
    #[serde(default)]
    pub consensus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationEvent {
    image_id: String,
    revision: u64,
    annotator_id: String,
    consensus: bool,
    boxes: Vec<PixelBox>,
    recorded_unix: u64,
}

struct AnnotationStore {
    states: HashMap<String, AnnotationState>,
    log: PathBuf,
}

impl AnnotationStore {
    fn open(corpus: &Corpus, log: PathBuf) -> CliResult<Self> {
        let mut states: HashMap<String, AnnotationState> = corpus
            .images
            .iter()
            .map(|r| {
                let state = AnnotationState {
                    image_id: r.id.clone(),
                    revision: 0,
                    consensus: corpus.consensus_for(&r.id).boxes,
                    annotators: BTreeMap::new(),
                };
                (r.id.clone(), state)
            })
            .collect();
        for a in corpus.annotations.iter().filter(|a| !a.consensus) {
            if let Some(s) = states.get_mut(&a.image_id) {
                for who in &a.annotator_ids {
                    s.annotators.entry(who.clone()).or_default().extend(a.boxes.iter().copied());
                }
            }
        }
        let mut store = Self { states, log };
        for ev in read_jsonl::<AnnotationEvent>(&store.log)? {
            store.apply(&ev);
        }
        Ok(store)
    }

    fn apply(&mut self, ev: &AnnotationEvent) {
        if let Some(s) = self.states.get_mut(&ev.image_id) {
            if ev.consensus {
                s.consensus = ev.boxes.clone();
            } else {
                s.annotators.insert(ev.annotator_id.clone(), ev.boxes.clone());
            }
            s.revision = ev.revision;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    pub image_id: String,
    pub detection_index: usize,
    pub verdict: Verdict,
    pub reviewer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub sequence: u64,
    pub image_id: String,
    pub detection_index: usize,
    pub verdict: Verdict,
    pub reviewer: String,
    pub recorded_unix: u64,
}

pub struct AppState {
    cfg: PipelineConfig,
    corpus: Corpus,
    workspace: Workspace,
    annotations: Mutex<AnnotationStore>,
    reviews: Mutex<Vec<ReviewRecord>>,
    detector: RwLock<Option<Arc<Detector<f32>>>>,
}

impl AppState {
    pub fn open(cfg: PipelineConfig) -> CliResult<Self> {
        let corpus = load_corpus(&cfg)?;
        let workspace = Workspace::new(&cfg.paths.work_dir);
        let annotations = AnnotationStore::open(&corpus, workspace.annotations_log())?;
        let reviews = read_jsonl(&workspace.reviews_log())?;
        Ok(Self {
            cfg,
            corpus,
            workspace,
            annotations: Mutex::new(annotations),
            reviews: Mutex::new(reviews),
            detector: RwLock::new(None),
        })
    }

    /// The trained detector, loaded from the work directory on first use.
    fn detector(&self) -> ApiResult<Arc<Detector<f32>>> {
        if let Some(d) = self.detector.read().expect("lock").as_ref() {
            return Ok(d.clone());
        }
        let path = self.workspace.checkpoint();
        let ckpt = match load_checkpoint(&path) {
            Ok(c) => c,
            Err(CliError::MissingCheckpoint(_)) => {
                return Err(ApiError::new(StatusCode::CONFLICT, "no checkpoint: train a model first"))
            }
            Err(e) => return Err(ApiError::internal(e)),
        };
        let det = Arc::new(ckpt.detector::<f32>().map_err(ApiError::internal)?);
        *self.detector.write().expect("lock") = Some(det.clone());
        Ok(det)
    }

    fn roi_spec(&self) -> ApiResult<RoiSpec> {
        load_prepared(&self.cfg)
            .map(|(_, spec)| spec)
            .map_err(|_| ApiError::new(StatusCode::CONFLICT, "no ROI spec: run prepare first"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub id: String,
    pub device_tag: String,
    pub width: usize,
    pub height: usize,
    pub has_acp: bool,
}

async fn list_images(State(st): State<Arc<AppState>>) -> Json<Vec<ImageSummary>> {
    Json(
        st.corpus
            .images
            .iter()
            .map(|r| ImageSummary {
                id: r.id.clone(),
                device_tag: r.device_tag.clone(),
                width: r.width,
                height: r.height,
                has_acp: st.corpus.consensus_for(&r.id).has_acp(),
            })
            .collect(),
    )
}

async fn get_image(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let r = st.corpus.image(&id).ok_or_else(|| ApiError::not_found("image", &id))?;
    let bytes = tokio::task::spawn_blocking({
        let path = r.path.clone();
        move || fs::read(path)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_annotation(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AnnotationState>> {
    let store = st.annotations.lock().expect("lock");
    store.states.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found("image", &id))
}

async fn post_annotation(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<AnnotationWrite>,
) -> ApiResult<Json<AnnotationState>> {
    let image = st.corpus.image(&id).ok_or_else(|| ApiError::not_found("image", &id))?;
    if body.annotator_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "annotator_id must not be empty"));
    }
    for b in &body.boxes {
        b.validate_within(image.width as f64, image.height as f64)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    }
    let mut store = st.annotations.lock().expect("lock");
    let current = store.states.get(&id).cloned().ok_or_else(|| ApiError::not_found("image", &id))?;
    if body.revision != current.revision {
        let mut err = ApiError::new(
            StatusCode::CONFLICT,
            format!("revision conflict: sent {}, current {}", body.revision, current.revision),
        );
        err.body = Some(serde_json::to_value(&current).expect("serializable"));
        return Err(err);
    }
    let ev = AnnotationEvent {
        image_id: id.clone(),
        revision: current.revision + 1,
        annotator_id: body.annotator_id,
        consensus: body.consensus,
        boxes: body.boxes,
        recorded_unix: now_unix(),
    };
    append_jsonl(&store.log, &ev).map_err(ApiError::internal)?;
    store.apply(&ev);
    Ok(Json(store.states[&id].clone()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub image_id: String,
    pub threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InferResponse {
    pub image_id: String,
    pub threshold: f64,
    pub detections: Vec<Detection<f64>>,
}

async fn post_infer(State(st): State<Arc<AppState>>, Json(req): Json<InferRequest>) -> ApiResult<Json<InferResponse>> {
    let image_ref = st.corpus.image(&req.image_id).ok_or_else(|| ApiError::not_found("image", &req.image_id))?.clone();
    let threshold = req.threshold.unwrap_or(st.cfg.eval.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "threshold must lie in [0, 1]"));
    }
    let detector = st.detector()?;
    let spec = st.roi_spec()?;
    let detections = tokio::task::spawn_blocking(move || -> CliResult<Vec<Detection<f64>>> {
        let image = image_ref.load()?;
        detect_image(&detector, &image, &spec, threshold)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(Json(InferResponse { image_id: req.image_id, threshold, detections }))
}

async fn post_review(State(st): State<Arc<AppState>>, Json(req): Json<ReviewRequest>) -> ApiResult<(StatusCode, Json<ReviewRecord>)> {
    if st.corpus.image(&req.image_id).is_none() {
        return Err(ApiError::not_found("image", &req.image_id));
    }
    if req.reviewer.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "reviewer must not be empty"));
    }
    let mut log = st.reviews.lock().expect("lock");
    let record = ReviewRecord {
        sequence: log.len() as u64 + 1,
        image_id: req.image_id,
        detection_index: req.detection_index,
        verdict: req.verdict,
        reviewer: req.reviewer,
        recorded_unix: now_unix(),
    };
    append_jsonl(&st.workspace.reviews_log(), &record).map_err(ApiError::internal)?;
    log.push(record.clone());
    Ok((StatusCode::CREATED, Json(record)))
}

#[derive(Debug, Deserialize)]
pub struct ReviewQuery {
    pub image_id: Option<String>,
}

async fn list_reviews(State(st): State<Arc<AppState>>, Query(q): Query<ReviewQuery>) -> Json<Vec<ReviewRecord>> {
    let log = st.reviews.lock().expect("lock");
    Json(log.iter().filter(|r| q.image_id.as_ref().is_none_or(|id| &r.image_id == id)).cloned().collect())
}

async fn get_report(State(st): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let path = st.workspace.report();
    let text = fs::read_to_string(&path).map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "no report: run eval first"))?;
    serde_json::from_str(&text).map(Json).map_err(ApiError::internal)
}

async fn require_token(State(st): State<Arc<AppState>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &st.cfg.service.auth_token {
        let ok = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}", get(get_image))
        .route("/api/annotations/{image_id}", get(get_annotation).post(post_annotation))
        .route("/api/infer", axum::routing::post(post_infer))
        .route("/api/reviews", get(list_reviews).post(post_review))
        .route("/api/report", get(get_report))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

pub async fn serve(cfg: PipelineConfig) -> CliResult<()> {
    let bind = cfg.service.bind.clone();
    let state = Arc::new(AppState::open(cfg)?);
    let listener = tokio::net::TcpListener::bind(&bind).await.map_err(|e| CliError::Server(format!("bind {bind}: {e}")))?;
    eprintln!("listening on {bind}");
    axum::serve(listener, router(state)).await.map_err(|e| CliError::Server(e.to_string()))
}
