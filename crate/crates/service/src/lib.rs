//! HTTP session service: upload a scene once, then click, undo, auto-segment and
//! query masks by text. JSON field names are documented in `docs/openapi.yaml`.

pub mod rle;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use snapkit_core::autoprompt::{generate_auto_masks, AutoPromptConfig, SegmentationResult};
use snapkit_core::geometry::{nearest_neighbor, Point3};
use snapkit_core::model::{SceneFeatures, SnapModel};
use snapkit_core::pcdata::{load_scene, DomainId, SceneSample};
use snapkit_core::promptenc::PromptSet;
use snapkit_core::textsem::{classify_masks, open_vocab_query, EmbeddingProvider, TextVocabulary, ToyProvider, TEXT_TEMPERATURE};
use tokio::sync::Mutex;

pub use rle::Rle;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }
}

impl From<snapkit_core::Error> for ApiError {
    fn from(e: snapkit_core::Error) -> Self {
        use snapkit_core::Error as E;
        let status = match e {
            E::Input(_) | E::Format { .. } | E::Consistency(_) | E::Domain(_) | E::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Debug)]
struct ObjectState {
    clicks: Vec<usize>,
    mask: Vec<bool>,
    score: f32,
    clip: Vec<f32>,
}

struct Session {
    scene: SceneSample,
    features: Arc<SceneFeatures>,
    objects: BTreeMap<i64, ObjectState>,
    /// Object id of every click still in effect, oldest first.
    history: Vec<i64>,
    auto: Option<SegmentationResult>,
    sequence: u64,
}

/// Shared server state. Model weights are immutable while serving.
#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<SnapModel>>,
    provider: Arc<dyn EmbeddingProvider>,
    vocabulary: Option<Arc<TextVocabulary>>,
    sessions: Arc<RwLock<HashMap<String, Arc<Mutex<Session>>>>>,
}

impl AppState {
    pub fn new(model: Option<SnapModel>) -> Self {
        let dim = model.as_ref().map_or(32, |m| m.config.clip_dim);
        Self {
            model: model.map(Arc::new),
            provider: Arc::new(ToyProvider { dim }),
            vocabulary: None,
            sessions: Arc::new(RwLock::new(HashMap::new())),
        }
    }

    pub fn with_provider(mut self, provider: Arc<dyn EmbeddingProvider>) -> Self {
        self.provider = provider;
        self
    }

    /// Vocabulary used to name auto-segmentation masks.
    pub fn with_vocabulary(mut self, vocabulary: TextVocabulary) -> Self {
        self.vocabulary = Some(Arc::new(vocabulary));
        self
    }

    fn model(&self) -> Result<Arc<SnapModel>, ApiError> {
        self.model
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let map = self.sessions.read().map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "session table poisoned"))?;
        map.get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Debug, Deserialize)]
pub struct InlineScene {
    pub positions: Vec<Point3>,
    #[serde(default)]
    pub scene_id: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct CreateSessionRequest {
    pub domain: String,
    #[serde(default)]
    pub scene: Option<InlineScene>,
    /// Directory of a saved scene archive on the server.
    #[serde(default)]
    pub archive_path: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub status: String,
    pub n_points: usize,
    pub domain: String,
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateSessionRequest>) -> ApiResult<CreateSessionResponse> {
    let domain: DomainId = req.domain.parse().map_err(ApiError::from)?;
    let model = state.model()?;
    let scene = match (req.scene, req.archive_path) {
        (Some(inline), None) => {
            let id = inline.scene_id.unwrap_or_else(|| format!("upload/{}", uuid::Uuid::new_v4()));
            SceneSample::unlabeled(inline.positions, domain, id)
        }
        (None, Some(path)) => {
            let mut s = blocking(move || load_scene(&path).map_err(ApiError::from)).await?;
            s.domain = domain;
            s
        }
        _ => return Err(ApiError::bad_request("give exactly one of scene or archive_path")),
    };
    if scene.positions.is_empty() {
        return Err(ApiError::bad_request("scene has no points"));
    }
    scene.validate()?;
    let (scene, features) = blocking(move || {
        let f = model.encode_scene(&scene.positions, domain, &scene.scene_id)?;
        Ok((scene, f))
    })
    .await?;
    let id = uuid::Uuid::new_v4().to_string();
    let n_points = scene.n_points();
    let session = Session {
        scene,
        features: Arc::new(features),
        objects: BTreeMap::new(),
        history: Vec::new(),
        auto: None,
        sequence: 0,
    };
    state
        .sessions
        .write()
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "session table poisoned"))?
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(CreateSessionResponse { session_id: id, status: "ready".into(), n_points, domain: domain.to_string() }))
}

#[derive(Debug, Deserialize)]
pub struct ClickRequest {
    /// Omitted or unknown ids start a new object.
    #[serde(default)]
    pub object_id: Option<i64>,
    pub point: Point3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectMask {
    pub object_id: i64,
    pub mask: Rle,
    pub score: f32,
    pub point_count: usize,
    pub clicks: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickResponse {
    #[serde(flatten)]
    pub object: ObjectMask,
    /// Index of the scene point the click was snapped to.
    pub snapped_index: usize,
    /// Position of this mutation in the session's order.
    pub sequence: u64,
}

fn object_mask(id: i64, o: &ObjectState) -> ObjectMask {
    ObjectMask {
        object_id: id,
        mask: Rle::encode(&o.mask),
        score: o.score,
        point_count: o.mask.iter().filter(|b| **b).count(),
        clicks: o.clicks.clone(),
    }
}

fn predict_object(model: &SnapModel, session_scene: &SceneSample, features: &SceneFeatures, clicks: Vec<usize>) -> Result<ObjectState, ApiError> {
    let pts: Vec<Point3> = clicks.iter().map(|&i| session_scene.positions[i]).collect();
    let pred = model.predict_with_features(features, &PromptSet::new(vec![pts]))?;
    Ok(ObjectState {
        mask: pred.binary_mask(0, 0.5),
        score: pred.scores[0],
        clip: pred.clip_embeddings.row(0).to_vec(),
        clicks,
    })
}

async fn add_click(State(state): State<AppState>, Path(id): Path<String>, Json(req): Json<ClickRequest>) -> ApiResult<ClickResponse> {
    let model = state.model()?;
    if req.point.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request("click coordinates must be finite"));
    }
    let session = state.session(&id)?;
    let s = session.lock_owned().await;
    let snapped = nearest_neighbor(&s.scene.positions, &req.point)?;
    let object_id = match req.object_id {
        Some(oid) => oid,
        None => s.objects.keys().next_back().map_or(0, |k| k + 1),
    };
    let mut clicks = s.objects.get(&object_id).map(|o| o.clicks.clone()).unwrap_or_default();
    clicks.push(snapped);
    let features = Arc::clone(&s.features);
    let (obj, s) = blocking(move || {
        let obj = predict_object(&model, &s.scene, &features, clicks)?;
        Ok((obj, s))
    })
    .await?;
    let mut s = s;
    s.objects.insert(object_id, obj);
    s.history.push(object_id);
    s.sequence += 1;
    Ok(Json(ClickResponse { object: object_mask(object_id, &s.objects[&object_id]), snapped_index: snapped, sequence: s.sequence }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UndoResponse {
    /// Object whose last click was removed; `null` when nothing was left to undo.
    pub object_id: Option<i64>,
    /// True when the object lost its only click and was deleted.
    pub removed: bool,
    pub object: Option<ObjectMask>,
    pub sequence: u64,
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<UndoResponse> {
    let model = state.model()?;
    let session = state.session(&id)?;
    let mut s = session.lock_owned().await;
    let Some(object_id) = s.history.pop() else {
        return Ok(Json(UndoResponse { object_id: None, removed: false, object: None, sequence: s.sequence }));
    };
    let mut clicks = s.objects.get(&object_id).map(|o| o.clicks.clone()).unwrap_or_default();
    clicks.pop();
    if clicks.is_empty() {
        s.objects.remove(&object_id);
        s.sequence += 1;
        return Ok(Json(UndoResponse { object_id: Some(object_id), removed: true, object: None, sequence: s.sequence }));
    }
    let features = Arc::clone(&s.features);
    let (obj, mut s) = blocking(move || {
        let obj = predict_object(&model, &s.scene, &features, clicks)?;
        Ok((obj, s))
    })
    .await?;
    let summary = object_mask(object_id, &obj);
    s.objects.insert(object_id, obj);
    s.sequence += 1;
    Ok(Json(UndoResponse { object_id: Some(object_id), removed: false, object: Some(summary), sequence: s.sequence }))
}

#[derive(Debug, Default, Deserialize)]
pub struct AutoRequest {
    #[serde(default)]
    pub k_max: Option<usize>,
    #[serde(default)]
    pub tau_s: Option<f32>,
    #[serde(default)]
    pub tau_nms: Option<f64>,
    /// Initial voxel size for the session's domain.
    #[serde(default)]
    pub v0: Option<f32>,
    #[serde(default)]
    pub batch_limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoMask {
    pub mask: Rle,
    pub score: f32,
    pub iteration: usize,
    pub prompt_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AutoResponse {
    pub masks: Vec<AutoMask>,
    pub prompts_per_iteration: Vec<usize>,
    pub sequence: u64,
}

/// RLE masks plus names from `vocabulary` when given.
pub fn auto_masks(result: &SegmentationResult, vocabulary: Option<&TextVocabulary>) -> Vec<AutoMask> {
    let names: Option<Vec<String>> = vocabulary.and_then(|v| {
        classify_masks(&result.clip_embeddings, v, TEXT_TEMPERATURE)
            .ok()
            .map(|(ids, _)| ids.iter().map(|&i| v.class_names[i].clone()).collect())
    });
    (0..result.len())
        .map(|i| AutoMask {
            mask: Rle::encode(&result.masks[i]),
            score: result.scores[i],
            iteration: result.provenance[i].iteration,
            prompt_index: result.provenance[i].point_index,
            class_name: names.as_ref().map(|n| n[i].clone()),
        })
        .collect()
}

async fn auto_segment(State(state): State<AppState>, Path(id): Path<String>, body: Option<Json<AutoRequest>>) -> ApiResult<AutoResponse> {
    let model = state.model()?;
    let req = body.map(|b| b.0).unwrap_or_default();
    let session = state.session(&id)?;
    let s = session.lock_owned().await;
    let mut cfg = AutoPromptConfig::default();
    let domain = s.scene.domain;
    if let Some(v) = req.k_max {
        cfg.k_max = v;
    }
    if let Some(v) = req.tau_s {
        cfg.tau_s = v;
    }
    if let Some(v) = req.tau_nms {
        cfg.tau_nms = v;
    }
    if let Some(v) = req.batch_limit {
        cfg.batch_limit = v;
    }
    if let Some(v) = req.v0 {
        *cfg.v0.get_mut(domain) = v;
    }
    cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let (result, mut s) = blocking(move || {
        let r = generate_auto_masks(&model, &s.scene.positions, domain, &s.scene.scene_id, &cfg)?;
        Ok((r, s))
    })
    .await?;
    let masks = auto_masks(&result, state.vocabulary.as_deref());
    let prompts_per_iteration = result.prompts_per_iteration.clone();
    s.auto = Some(result);
    s.sequence += 1;
    Ok(Json(AutoResponse { masks, prompts_per_iteration, sequence: s.sequence }))
}

#[derive(Debug, Deserialize)]
pub struct TextQueryRequest {
    pub query: String,
    #[serde(default)]
    pub tau_sim: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TextHit {
    /// Index into the auto-segmentation masks, or the object id for clicked objects.
    pub mask_index: i64,
    pub source: String,
    pub similarity: f64,
    pub mask: Rle,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TextQueryResponse {
    pub results: Vec<TextHit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

async fn text_query(State(state): State<AppState>, Path(id): Path<String>, Json(req): Json<TextQueryRequest>) -> ApiResult<TextQueryResponse> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    let tau = req.tau_sim.unwrap_or(0.0);
    // auto masks when present, else the clicked objects
    let (result, labels, source) = match &s.auto {
        Some(r) if !r.is_empty() => (r.clone(), (0..r.len() as i64).collect::<Vec<_>>(), "auto"),
        _ => {
            let ids: Vec<i64> = s.objects.keys().copied().collect();
            let objs: Vec<&ObjectState> = s.objects.values().collect();
            let r = SegmentationResult {
                masks: objs.iter().map(|o| o.mask.clone()).collect(),
                scores: objs.iter().map(|o| o.score).collect(),
                clip_embeddings: objs.iter().map(|o| o.clip.clone()).collect(),
                provenance: objs
                    .iter()
                    .map(|o| snapkit_core::autoprompt::Provenance {
                        iteration: 0,
                        point_index: o.clicks[0],
                        point: s.scene.positions[o.clicks[0]],
                    })
                    .collect(),
                prompts_per_iteration: Vec::new(),
            };
            (r, ids, "object")
        }
    };
    if result.is_empty() {
        return Ok(Json(TextQueryResponse { results: Vec::new(), notice: Some("no masks yet: click or run auto first".into()) }));
    }
    let hits = open_vocab_query(&result, &req.query, state.provider.as_ref(), tau)?;
    Ok(Json(TextQueryResponse {
        results: hits
            .into_iter()
            .map(|(i, sim)| TextHit { mask_index: labels[i], source: source.into(), similarity: sim, mask: Rle::encode(&result.masks[i]) })
            .collect(),
        notice: None,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MasksResponse {
    pub objects: Vec<ObjectMask>,
    pub auto: Option<Vec<AutoMask>>,
    pub sequence: u64,
}

async fn list_masks(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<MasksResponse> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    Ok(Json(MasksResponse {
        objects: s.objects.iter().map(|(k, o)| object_mask(*k, o)).collect(),
        auto: s.auto.as_ref().map(|r| auto_masks(r, state.vocabulary.as_deref())),
        sequence: s.sequence,
    }))
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_loaded": state.model.is_some() }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/auto", post(auto_segment))
        .route("/sessions/{id}/text-query", post(text_query))
        .route("/sessions/{id}/masks", get(list_masks))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Binds `addr` (port 0 picks a free one) and serves on a background task.
pub async fn spawn(addr: SocketAddr, state: AppState) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    Ok((local, handle))
}
