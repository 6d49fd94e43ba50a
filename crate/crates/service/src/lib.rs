//! Local HTTP service for interactive 2D adaptation sessions.
//!
//! Every body and response is JSON. Errors carry a machine-readable
//! `code`. Adaptation progress and new rollouts are pushed over a
//! server-sent event stream per session with increasing sequence numbers.

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::Stream;
use opa_core::adapter::{adapt, expert_from_perturbation, instance_table, AdaptConfig, AdaptError, PerturbationDoc, PerturbationRecord};
use opa_core::checkpoint::Checkpoint;
use opa_core::eval::default_horizon;
use opa_core::policy::{anchors, rollout_to_goal, PreferenceTable, RelationNetParams};
use opa_core::rotmath::{Dim, Rotation};
use opa_core::scene::{Pose, Scene, SceneDoc, SceneObject, Trajectory, TrajectoryDoc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex as StdMutex};
use tokio::sync::{broadcast, Mutex};

/// Objects in generated session scenes.
pub const SCENE_OBJECTS: usize = 5;
const EVENT_CAPACITY: usize = 1024;
/// Forward every n-th optimizer step as a progress event.
const PROGRESS_EVERY: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Defaults that adapt-request bodies override field by field.
    pub adapt: AdaptConfig,
    /// Seed for randomized scenes.
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            adapt: AdaptConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptStatus {
    Idle,
    Running,
    Done,
    Failed,
}

struct SessionState {
    scene: Scene,
    table: PreferenceTable,
    trajectory: Trajectory,
    perturbation: Option<PerturbationRecord>,
    status: AdaptStatus,
    rng: ChaCha8Rng,
}

struct Session {
    state: Mutex<SessionState>,
    events: broadcast::Sender<SessionEvent>,
    seq: AtomicU64,
}

impl Session {
    fn emit(&self, body: EventBody) {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst) + 1;
        // no subscribers is fine
        let _ = self.events.send(SessionEvent { seq, body });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EventBody {
    Progress { restart: usize, step: usize, loss: f64 },
    Rollout { trajectory: TrajectoryDoc },
    Error { code: String, message: String },
}

impl EventBody {
    fn name(&self) -> &'static str {
        match self {
            EventBody::Progress { .. } => "progress",
            EventBody::Rollout { .. } => "rollout",
            EventBody::Error { .. } => "error",
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    params: Arc<RelationNetParams>,
    anchors: Arc<PreferenceTable>,
    config: Arc<ServiceConfig>,
    sessions: Arc<StdMutex<HashMap<String, Arc<Session>>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    /// Rejects 3D checkpoints: interactive sessions are planar.
    pub fn new(checkpoint: Checkpoint, config: ServiceConfig) -> Result<AppState, String> {
        if checkpoint.params.arch.dim != Dim::Two {
            return Err("interactive sessions need a 2D checkpoint".into());
        }
        Ok(AppState {
            params: Arc::new(checkpoint.params),
            anchors: Arc::new(checkpoint.table),
            config: Arc::new(config),
            sessions: Arc::default(),
            next_id: Arc::new(AtomicU64::new(1)),
        })
    }

    /// Hex sha256 over every relation-network weight.
    pub fn network_digest(&self) -> String {
        let mut h = Sha256::new();
        for net in [&self.params.position, &self.params.orientation] {
            for p in net.params() {
                for x in &p.value {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", format!("no session {id}")))
    }

    fn rollout(&self, scene: &Scene, table: &PreferenceTable) -> Result<Trajectory, ApiError> {
        rollout_to_goal(scene, table, &self.params, 2 * default_horizon(scene)).map_err(|e| ApiError::internal(e.to_string()))
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

fn adapt_error(e: &AdaptError) -> ApiError {
    let code = match e {
        AdaptError::DegeneratePerturbation => "DEGENERATE_PERTURBATION",
        AdaptError::InvalidRecord(_) => "INVALID_PERTURBATION",
        AdaptError::InvalidConfig(_) => "INVALID_CONFIG",
        AdaptError::NoProgress { .. } => "NO_PROGRESS",
        AdaptError::Policy(_) | AdaptError::Scene(_) => return ApiError::internal(e.to_string()),
    };
    ApiError::unprocessable(code, e.to_string())
}

/// Fixed scene: five unseen object types scattered along a 2 m path.
pub fn default_scene() -> Scene {
    let spots = [(0.45, 0.3, 0.4), (0.8, -0.35, 2.0), (1.1, 0.45, -1.2), (1.4, -0.2, 0.8), (1.65, 0.4, -2.6)];
    let objects = spots
        .iter()
        .enumerate()
        .map(|(k, &(x, y, th))| SceneObject {
            id: k as u32 + 1,
            type_index: anchors::FIRST_FREE + k as u32,
            pose: Pose::planar(x, y, th),
            radius: 0.12,
        })
        .collect();
    Scene::new(Pose::planar(0.0, 0.0, 0.0), 0.05, goal_at(2.0, 0.0, 0.0), objects, 0.1).expect("valid default scene")
}

fn goal_at(x: f64, y: f64, th: f64) -> SceneObject {
    SceneObject {
        id: 0,
        type_index: anchors::GOAL,
        pose: Pose::planar(x, y, th),
        radius: 0.2,
    }
}

/// Random scene with the same object types as [`default_scene`].
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R) -> Scene {
    let length = rng.random_range(1.6..2.2);
    let heading: f64 = rng.random_range(-0.5..0.5);
    let (c, s) = (heading.cos(), heading.sin());
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < SCENE_OBJECTS {
        attempts += 1;
        let t = rng.random_range(0.15..0.85) * length;
        let lateral = rng.random_range(-0.5..0.5);
        let radius = rng.random_range(0.08..0.16);
        let p = [t * c - lateral * s, t * s + lateral * c];
        let clear = objects
            .iter()
            .all(|o| ((o.pose.p[0] - p[0]).powi(2) + (o.pose.p[1] - p[1]).powi(2)).sqrt() > o.radius + radius + 0.05);
        if !clear && attempts < 1000 {
            continue;
        }
        let k = objects.len() as u32;
        objects.push(SceneObject {
            id: k + 1,
            type_index: anchors::FIRST_FREE + k,
            pose: Pose::new(p.to_vec(), Rotation::from_angle(rng.random_range(-3.1..3.1))),
            radius,
        });
    }
    Scene::new(
        Pose::planar(0.0, 0.0, rng.random_range(-3.1..3.1)),
        0.05,
        goal_at(length * c, length * s, rng.random_range(-3.1..3.1)),
        objects,
        0.1,
    )
    .expect("valid random scene")
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateRequest {
    random: bool,
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: AdaptStatus,
    pub has_perturbation: bool,
    pub scene: SceneDoc,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_restart: usize,
    pub restarts: usize,
    pub total_steps: usize,
    pub wall_s: f64,
    pub budget_exhausted: bool,
    pub trajectory: TrajectoryDoc,
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable("MALFORMED_BODY", e.to_string()))
}

fn summary(id: &str, st: &SessionState) -> SessionSummary {
    SessionSummary {
        id: id.to_string(),
        status: st.status,
        has_perturbation: st.perturbation.is_some(),
        scene: SceneDoc::from(&st.scene),
    }
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let n = app.next_id.fetch_add(1, Ordering::SeqCst);
    let id = format!("s{n}");
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(app.config.seed.wrapping_add(n)));
    let scene = if req.random { random_scene(&mut rng) } else { default_scene() };
    let table = instance_table(&app.anchors, &scene).map_err(|e| ApiError::internal(e.to_string()))?;
    let trajectory = app.rollout(&scene, &table)?;
    let st = SessionState {
        scene,
        table,
        trajectory,
        perturbation: None,
        status: AdaptStatus::Idle,
        rng,
    };
    let out = summary(&id, &st);
    let (tx, _) = broadcast::channel(EVENT_CAPACITY);
    let session = Arc::new(Session {
        state: Mutex::new(st),
        events: tx,
        seq: AtomicU64::new(0),
    });
    app.sessions.lock().expect("session map lock").insert(id.clone(), session);
    log::info!("created session {id}");
    Ok((StatusCode::CREATED, Json(out)))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    let s = app.session(&id)?;
    let st = s.state.lock().await;
    Ok(Json(summary(&id, &st)))
}

async fn get_scene(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SceneDoc>, ApiError> {
    let s = app.session(&id)?;
    let st = s.state.lock().await;
    Ok(Json(SceneDoc::from(&st.scene)))
}

async fn randomize_scene(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SceneDoc>, ApiError> {
    let s = app.session(&id)?;
    let mut st = s.state.lock().await;
    if st.status == AdaptStatus::Running {
        return Err(ApiError::new(StatusCode::CONFLICT, "ADAPT_RUNNING", "adaptation in progress"));
    }
    let scene = random_scene(&mut st.rng);
    // learned preferences carry over; new types start ignored
    let table = instance_table(&st.table, &scene).map_err(|e| ApiError::internal(e.to_string()))?;
    st.trajectory = app.rollout(&scene, &table)?;
    st.table = table;
    st.scene = scene;
    st.perturbation = None;
    s.emit(EventBody::Rollout {
        trajectory: TrajectoryDoc::from(&st.trajectory),
    });
    Ok(Json(SceneDoc::from(&st.scene)))
}

async fn reset_preferences(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<TrajectoryDoc>, ApiError> {
    let s = app.session(&id)?;
    let mut st = s.state.lock().await;
    if st.status == AdaptStatus::Running {
        return Err(ApiError::new(StatusCode::CONFLICT, "ADAPT_RUNNING", "adaptation in progress"));
    }
    st.table = instance_table(&app.anchors, &st.scene).map_err(|e| ApiError::internal(e.to_string()))?;
    st.trajectory = app.rollout(&st.scene, &st.table)?;
    st.status = AdaptStatus::Idle;
    let doc = TrajectoryDoc::from(&st.trajectory);
    s.emit(EventBody::Rollout { trajectory: doc.clone() });
    Ok(Json(doc))
}

async fn get_rollout(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<TrajectoryDoc>, ApiError> {
    let s = app.session(&id)?;
    let st = s.state.lock().await;
    Ok(Json(TrajectoryDoc::from(&st.trajectory)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PerturbationAccepted {
    pub accepted: bool,
    pub samples: usize,
    pub steps: usize,
}

async fn post_perturbation(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let s = app.session(&id)?;
    let doc: PerturbationDoc = serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable("MALFORMED_BODY", e.to_string()))?;
    let record = PerturbationRecord::from_doc(doc).map_err(|e| adapt_error(&e))?;
    if record.scene_snapshot.dim() != Dim::Two {
        return Err(ApiError::unprocessable("INVALID_PERTURBATION", "sessions are planar"));
    }
    let segment = expert_from_perturbation(&record, record.scene_snapshot.alpha).map_err(|e| adapt_error(&e))?;
    let mut st = s.state.lock().await;
    if st.status == AdaptStatus::Running {
        return Err(ApiError::new(StatusCode::CONFLICT, "ADAPT_RUNNING", "adaptation in progress"));
    }
    let out = PerturbationAccepted {
        accepted: true,
        samples: record.poses.len(),
        steps: segment.steps(),
    };
    st.perturbation = Some(record);
    Ok((StatusCode::ACCEPTED, Json(out)))
}

fn merged_config(base: &AdaptConfig, body: &Bytes) -> Result<AdaptConfig, ApiError> {
    let mut v = serde_json::to_value(base).map_err(|e| ApiError::internal(e.to_string()))?;
    let overrides: serde_json::Value = parse_body(body)?;
    match overrides {
        serde_json::Value::Null => {}
        serde_json::Value::Object(map) => {
            let target = v.as_object_mut().expect("config is an object");
            for (k, val) in map {
                if !target.contains_key(&k) {
                    return Err(ApiError::unprocessable("MALFORMED_BODY", format!("unknown field {k}")));
                }
                target.insert(k, val);
            }
        }
        _ => return Err(ApiError::unprocessable("MALFORMED_BODY", "expected an object of overrides")),
    }
    let cfg: AdaptConfig = serde_json::from_value(v).map_err(|e| ApiError::unprocessable("MALFORMED_BODY", e.to_string()))?;
    cfg.validate().map_err(|e| adapt_error(&e))?;
    Ok(cfg)
}

async fn post_adapt(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<AdaptSummary>, ApiError> {
    let s = app.session(&id)?;
    let config = merged_config(&app.config.adapt, &body)?;
    let (record, table) = {
        let mut st = s.state.lock().await;
        if st.status == AdaptStatus::Running {
            return Err(ApiError::new(StatusCode::CONFLICT, "ADAPT_RUNNING", "adaptation already running"));
        }
        let Some(record) = st.perturbation.clone() else {
            return Err(ApiError::unprocessable("NO_PERTURBATION", "post a perturbation first"));
        };
        st.status = AdaptStatus::Running;
        (record, st.table.clone())
    };
    let params = app.params.clone();
    let worker = s.clone();
    let result = tokio::task::spawn_blocking(move || {
        let progress = |p: opa_core::adapter::AdaptProgress| {
            if p.step % PROGRESS_EVERY == 0 {
                worker.emit(EventBody::Progress {
                    restart: p.restart,
                    step: p.step,
                    loss: p.loss,
                });
            }
        };
        adapt(&record, &params, &table, &config, opa_core::par::Exec::default(), &progress)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()));
    let mut st = s.state.lock().await;
    let outcome = match result {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => {
            st.status = AdaptStatus::Failed;
            let err = adapt_error(&e);
            s.emit(EventBody::Error {
                code: err.code.clone(),
                message: err.message.clone(),
            });
            return Err(err);
        }
        Err(e) => {
            st.status = AdaptStatus::Failed;
            return Err(e);
        }
    };
    let table = instance_table(&outcome.table, &st.scene).map_err(|e| ApiError::internal(e.to_string()))?;
    let trajectory = match app.rollout(&st.scene, &table) {
        Ok(t) => t,
        Err(e) => {
            st.status = AdaptStatus::Failed;
            return Err(e);
        }
    };
    st.table = table;
    st.trajectory = trajectory;
    st.status = AdaptStatus::Done;
    let doc = TrajectoryDoc::from(&st.trajectory);
    s.emit(EventBody::Rollout { trajectory: doc.clone() });
    log::info!("session {id}: adapted {} -> {} in {:.3} s", outcome.initial_loss, outcome.best_loss, outcome.wall_s);
    Ok(Json(AdaptSummary {
        initial_loss: outcome.initial_loss,
        final_loss: outcome.best_loss,
        best_restart: outcome.best_restart,
        restarts: outcome.restarts.len(),
        total_steps: outcome.total_steps(),
        wall_s: outcome.wall_s,
        budget_exhausted: outcome.budget_exhausted,
        trajectory: doc,
    }))
}

async fn events(State(app): State<AppState>, Path(id): Path<String>) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let s = app.session(&id)?;
    let rx = s.events.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let sse = Event::default()
                        .event(ev.body.name())
                        .id(ev.seq.to_string())
                        .json_data(&ev)
                        .expect("event serializes");
                    return Some((Ok(sse), rx));
                }
                // a slow client misses progress events but keeps the stream
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Info {
    pub dim: usize,
    pub network_sha256: String,
    pub sessions: usize,
}

async fn info(State(app): State<AppState>) -> Json<Info> {
    Json(Info {
        dim: app.params.arch.dim.n(),
        network_sha256: app.network_digest(),
        sessions: app.sessions.lock().expect("session map lock").len(),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/info", get(info))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/scene", get(get_scene))
        .route("/api/session/{id}/scene/randomize", post(randomize_scene))
        .route("/api/session/{id}/preferences/reset", post(reset_preferences))
        .route("/api/session/{id}/rollout", get(get_rollout))
        .route("/api/session/{id}/perturbation", post(post_perturbation))
        .route("/api/session/{id}/adapt", post(post_adapt))
        .route("/api/session/{id}/events", get(events))
        .layer(tower_http::cors::CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
