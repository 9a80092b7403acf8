//! Local HTTP + WebSocket front for simulator sessions: interactive grasping,
//! demonstration recording and live policy rollouts.
//!
//! Clouds travel as base64 SDPC strings. Errors are `{"error": message}`
//! with 400 (bad config), 404 (unknown id) or 422 (rejected request).

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{watch, Mutex};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use sculptdiff_core::baselines::{HeuristicConfig, HeuristicMode, HeuristicPolicy, NnDatabase, NnPolicy};
use sculptdiff_core::dataset::{self, GraspAction, Trajectory, Workspace};
use sculptdiff_core::metrics::chamfer;
use sculptdiff_core::pointcloud::sdpc;
use sculptdiff_core::policy::{rollout, Policy, RolloutConfig, RolloutStep, SculptDiff};
use sculptdiff_core::sim::{self, mix, ClayConfig, ClayState, ShapeRecipe};
use sculptdiff_core::{PointCloud, StageFrame};

pub const DEFAULT_PORT: u16 = 7421;
pub const WS_PROTOCOL: &str = "sculptdiff.v1";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn unprocessable(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Unprocessable(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

type ApiResult<T> = Result<T, ServiceError>;

/// Fixed settings shared by every session.
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub frame: StageFrame,
    pub clay: ClayConfig,
    pub workspace: Workspace,
    pub cloud_size: usize,
    pub demos_dir: PathBuf,
    pub heuristic: HeuristicConfig,
    pub execute_steps: usize,
    pub nn_k: usize,
    /// Browser origins allowed by CORS besides any localhost origin.
    pub allowed_origins: Vec<String>,
}

impl ServiceConfig {
    pub fn from_config(cfg: &sculptdiff_core::Config) -> Self {
        Self {
            frame: cfg.frame,
            clay: cfg.clay.clone(),
            workspace: cfg.workspace,
            cloud_size: cfg.encoder.cloud_size,
            demos_dir: cfg.paths.demos_dir.clone(),
            heuristic: cfg.heuristic.clone(),
            execute_steps: cfg.policy.execute_steps,
            nn_k: cfg.rollout.nn_k,
            allowed_origins: Vec::new(),
        }
    }
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self::from_config(&sculptdiff_core::Config::default())
    }
}

struct Session {
    clay: ClayState,
    cloud: PointCloud,
    /// Grasps applied since creation; also the observation seed counter.
    grasps: usize,
    recorded_states: Vec<PointCloud>,
    recorded_actions: Vec<GraspAction>,
    goal: Option<PointCloud>,
}

impl Session {
    fn chamfer_to_goal(&self) -> ApiResult<Option<f64>> {
        self.goal.as_ref().map(|g| chamfer(&self.cloud, g).map_err(internal)).transpose()
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum RolloutEvent {
    Grasp { grasp_index: usize, action: GraspAction, chamfer: f64 },
    Done { grasps: usize, initial_chamfer: f64, final_chamfer: f64 },
    Error { message: String },
}

struct RolloutLog {
    events: std::sync::Mutex<Vec<RolloutEvent>>,
    /// Bumped after every push; the payload is the event count.
    notify: watch::Sender<usize>,
}

impl RolloutLog {
    fn push(&self, e: RolloutEvent) {
        let mut ev = self.events.lock().unwrap();
        ev.push(e);
        self.notify.send_replace(ev.len());
    }

    fn finished(&self) -> bool {
        matches!(self.events.lock().unwrap().last(), Some(RolloutEvent::Done { .. } | RolloutEvent::Error { .. }))
    }
}

#[derive(Clone)]
pub struct AppState {
    cfg: Arc<ServiceConfig>,
    sessions: Arc<RwLock<HashMap<String, Arc<Mutex<Session>>>>>,
    rollouts: Arc<RwLock<HashMap<String, Arc<RolloutLog>>>>,
    counter: Arc<AtomicU64>,
    /// Serializes writes into the demos directory.
    demo_lock: Arc<Mutex<()>>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        Self {
            cfg: Arc::new(cfg),
            sessions: Arc::default(),
            rollouts: Arc::default(),
            counter: Arc::default(),
            demo_lock: Arc::default(),
        }
    }

    fn next_id(&self, prefix: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        format!("{prefix}{n:x}-{:08x}", mix(n, std::process::id() as u64) as u32)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))
    }
}

pub fn encode_cloud(cloud: &PointCloud) -> String {
    B64.encode(sdpc::encode(cloud))
}

pub fn decode_cloud(s: &str) -> Result<PointCloud, String> {
    let raw = B64.decode(s).map_err(|e| format!("cloud is not valid base64: {e}"))?;
    sdpc::decode(&raw).map_err(|e| format!("cloud: {e}"))
}

pub fn router(state: AppState) -> Router {
    let extra: Vec<HeaderValue> = state.cfg.allowed_origins.iter().filter_map(|o| o.parse().ok()).collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(move |origin, _| {
            let o = origin.as_bytes();
            extra.iter().any(|e| e == origin)
                || ["http://localhost", "http://127.0.0.1"]
                    .iter()
                    .any(|p| o.starts_with(p.as_bytes()) && matches!(o.get(p.len()), None | Some(b':')))
        }))
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/grasp", post(grasp))
        .route("/sessions/{id}/finish", post(finish))
        .route("/sessions/{id}/state", get(session_state))
        .route("/sessions/{id}/goal", post(set_goal))
        .route("/rollouts", post(start_rollout))
        .route("/rollouts/{id}/events", get(rollout_events))
        .route("/demos", get(list_demos))
        .route("/echo", post(echo))
        .layer(cors)
        .with_state(state)
}

/// Binds and serves until the process exits.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(cfg))).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

async fn create_session(State(st): State<AppState>, body: axum::body::Bytes) -> ApiResult<Json<Value>> {
    // overrides are merged field by field onto the service defaults
    let mut merged = serde_json::to_value(&st.cfg.clay).map_err(internal)?;
    if !body.iter().all(u8::is_ascii_whitespace) {
        let over: Value =
            serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON body: {e}")))?;
        let Value::Object(over) = over else {
            return Err(ServiceError::BadRequest("body must be a JSON object of clay overrides".into()));
        };
        let base = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in over {
            base.insert(k, v);
        }
    }
    let clay: ClayConfig =
        serde_json::from_value(merged).map_err(|e| ServiceError::BadRequest(format!("invalid config: {e}")))?;
    clay.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let (frame, n) = (st.cfg.frame, st.cfg.cloud_size);
    let session = blocking(move || {
        let clay = sim::init(&clay, &frame).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let cloud = clay.observe(n, mix(clay.seed, 0)).map_err(internal)?;
        Ok(Session {
            recorded_states: vec![cloud.clone()],
            clay,
            cloud,
            grasps: 0,
            recorded_actions: Vec::new(),
            goal: None,
        })
    })
    .await?;
    let id = st.next_id("s");
    let cloud = encode_cloud(&session.cloud);
    st.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(json!({ "id": id, "cloud": cloud })))
}

#[derive(Deserialize)]
struct GraspRequest {
    action: GraspAction,
}

async fn grasp(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<GraspRequest>,
) -> ApiResult<Json<Value>> {
    st.cfg.workspace.check(&req.action, &st.cfg.frame).map_err(unprocessable)?;
    let session = st.session(&id)?;
    // the fair mutex hands the lock out in arrival order
    let mut s = session.lock_owned().await;
    let n = st.cfg.cloud_size;
    blocking(move || {
        let action = req.action;
        s.clay = s.clay.apply_grasp(&action);
        s.grasps += 1;
        s.cloud = s.clay.observe(n, mix(s.clay.seed, s.grasps as u64)).map_err(internal)?;
        s.recorded_actions.push(action);
        let post = s.cloud.clone();
        s.recorded_states.push(post);
        Ok(Json(json!({
            "cloud": encode_cloud(&s.cloud),
            "grasp_index": s.grasps - 1,
            "chamfer_to_goal": s.chamfer_to_goal()?,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct FinishRequest {
    shape_label: String,
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn finish(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<FinishRequest>,
) -> ApiResult<Json<Value>> {
    if !valid_label(&req.shape_label) {
        return Err(unprocessable("shape_label must be non-empty ASCII letters, digits, '-' or '_'"));
    }
    let session = st.session(&id)?;
    let mut s = session.lock_owned().await;
    if s.recorded_actions.is_empty() {
        return Err(unprocessable("no grasps recorded"));
    }
    let traj = Trajectory {
        goal: s.goal.clone().unwrap_or_else(|| s.cloud.clone()),
        states: s.recorded_states.clone(),
        actions: s.recorded_actions.clone(),
        shape_label: req.shape_label.clone(),
        source: format!("{id}-{}", s.grasps),
    };
    traj.validate(Some(st.cfg.cloud_size)).map_err(unprocessable)?;
    let (states, actions) = (traj.states.len(), traj.actions.len());
    let _guard = st.demo_lock.clone().lock_owned().await;
    let root = st.cfg.demos_dir.clone();
    let path = blocking(move || {
        let base = format!("{}-{}", req.shape_label, traj.source);
        let mut dir = root.join(&base);
        let mut k = 1;
        while dir.exists() {
            k += 1;
            dir = root.join(format!("{base}-{k}"));
        }
        dataset::save(&traj, &dir).map_err(internal)?;
        Ok(dir)
    })
    .await?;
    // recording restarts from the current state
    s.recorded_actions.clear();
    s.recorded_states = vec![s.cloud.clone()];
    Ok(Json(json!({ "path": path, "states": states, "actions": actions })))
}

async fn session_state(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let session = st.session(&id)?;
    let s = session.lock().await;
    Ok(Json(json!({
        "id": id,
        "cloud": encode_cloud(&s.cloud),
        "grasps": s.grasps,
        "recorded_grasps": s.recorded_actions.len(),
        "goal": s.goal.as_ref().map(encode_cloud),
        "chamfer_to_goal": s.chamfer_to_goal()?,
    })))
}

#[derive(Deserialize)]
struct GoalRequest {
    cloud: Option<String>,
    shape: Option<String>,
}

async fn set_goal(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<GoalRequest>,
) -> ApiResult<Json<Value>> {
    let session = st.session(&id)?;
    let mut s = session.lock_owned().await;
    let goal = match (req.cloud, req.shape) {
        (Some(c), None) => {
            let g = decode_cloud(&c).map_err(unprocessable)?;
            if g.is_empty() {
                return Err(unprocessable("goal cloud is empty"));
            }
            g
        }
        (None, Some(name)) => {
            let recipe: ShapeRecipe = name.parse().map_err(unprocessable)?;
            let (clay, frame, n) = (s.clay.config.clone(), st.cfg.frame, st.cfg.cloud_size);
            blocking(move || sim::goal_cloud(recipe, &clay, &frame, n).map_err(internal)).await?
        }
        _ => return Err(unprocessable("goal needs exactly one of cloud or shape")),
    };
    s.goal = Some(goal);
    Ok(Json(json!({ "goal": s.goal.as_ref().map(encode_cloud), "chamfer_to_goal": s.chamfer_to_goal()? })))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Diffusion,
    Heuristic,
    Nn,
}

#[derive(Deserialize)]
struct RolloutRequest {
    session: String,
    policy: PolicyKind,
    checkpoint: Option<PathBuf>,
    max_grasps: usize,
    #[serde(default)]
    seed: u64,
    mode: Option<HeuristicMode>,
    k: Option<usize>,
}

fn load_model(path: Option<&Path>) -> ApiResult<SculptDiff> {
    let path = path.ok_or_else(|| unprocessable("policy needs a checkpoint"))?;
    SculptDiff::load(path).map_err(|e| unprocessable(format!("{}: {e}", path.display())))
}

fn build_policy(cfg: &ServiceConfig, req: &RolloutRequest) -> ApiResult<Box<dyn Policy + Send>> {
    Ok(match req.policy {
        PolicyKind::Diffusion => Box::new(load_model(req.checkpoint.as_deref())?),
        PolicyKind::Heuristic => {
            let mut h = cfg.heuristic.clone();
            if let Some(m) = req.mode {
                h.mode = m;
            }
            h.validate().map_err(unprocessable)?;
            Box::new(HeuristicPolicy { cfg: h, frame: cfg.frame })
        }
        PolicyKind::Nn => {
            let model = load_model(req.checkpoint.as_deref())?;
            let trajs = load_demos(&cfg.demos_dir).map_err(internal)?;
            if trajs.is_empty() {
                return Err(unprocessable("nearest-neighbor policy needs recorded demos"));
            }
            let trajs: Vec<Trajectory> = trajs.into_iter().map(|(_, t)| t).collect();
            let db = NnDatabase::build(&model, &trajs).map_err(unprocessable)?;
            Box::new(NnPolicy { model, db, k: req.k.unwrap_or(cfg.nn_k).max(1) })
        }
    })
}

async fn start_rollout(State(st): State<AppState>, Json(req): Json<RolloutRequest>) -> ApiResult<Json<Value>> {
    if req.max_grasps == 0 {
        return Err(unprocessable("max_grasps must be > 0"));
    }
    let session = st.session(&req.session)?;
    let (env, goal) = {
        let s = session.lock().await;
        let goal = s.goal.clone().ok_or_else(|| unprocessable("session has no goal"))?;
        (s.clay.clone(), goal)
    };
    let cfg = st.cfg.clone();
    let policy = {
        let cfg = cfg.clone();
        blocking(move || build_policy(&cfg, &req).map(|p| (p, req))).await?
    };
    let (mut policy, req) = policy;
    let id = st.next_id("r");
    let (tx, _) = watch::channel(0);
    let log = Arc::new(RolloutLog { events: Default::default(), notify: tx });
    st.rollouts.write().unwrap().insert(id.clone(), log.clone());
    let rc = RolloutConfig {
        max_grasps: req.max_grasps,
        stop_threshold: 0.0,
        execute_steps: cfg.execute_steps,
        cloud_size: cfg.cloud_size,
        seed: req.seed,
        workspace: cfg.workspace,
    };
    tokio::task::spawn_blocking(move || {
        let on_step = |s: &RolloutStep| {
            log.push(RolloutEvent::Grasp { grasp_index: s.grasp_index, action: s.action, chamfer: s.chamfer })
        };
        match rollout(&env, &goal, policy.as_mut(), &rc, on_step) {
            Ok(r) => log.push(RolloutEvent::Done {
                grasps: r.trajectory.num_grasps(),
                initial_chamfer: r.initial_chamfer(),
                final_chamfer: r.final_chamfer(),
            }),
            Err(e) => log.push(RolloutEvent::Error { message: e.to_string() }),
        }
    });
    Ok(Json(json!({ "id": id })))
}

async fn rollout_events(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let log = st
        .rollouts
        .read()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| ServiceError::NotFound(format!("unknown rollout {id}")))?;
    Ok(ws.protocols([WS_PROTOCOL]).on_upgrade(move |socket| stream_events(socket, log)))
}

/// Replays events already produced, then follows the rollout until it ends.
async fn stream_events(mut socket: WebSocket, log: Arc<RolloutLog>) {
    let mut rx = log.notify.subscribe();
    let mut sent = 0;
    loop {
        let pending: Vec<RolloutEvent> = log.events.lock().unwrap()[sent..].to_vec();
        for e in &pending {
            let text = serde_json::to_string(e).expect("events serialize");
            if socket.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
        sent += pending.len();
        if log.finished() && sent == log.events.lock().unwrap().len() {
            break;
        }
        if rx.changed().await.is_err() {
            break;
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}

fn load_demos(root: &Path) -> sculptdiff_core::Result<Vec<(PathBuf, Trajectory)>> {
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    dataset::find_trajectories(root)?.into_iter().map(|p| dataset::load(&p).map(|t| (p, t))).collect()
}

async fn list_demos(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    let root = st.cfg.demos_dir.clone();
    let demos = blocking(move || load_demos(&root).map_err(internal)).await?;
    let list: Vec<Value> = demos
        .iter()
        .map(|(p, t)| json!({ "path": p, "shape_label": t.shape_label, "grasps": t.num_grasps() }))
        .collect();
    Ok(Json(Value::Array(list)))
}

#[derive(Serialize, Deserialize)]
struct Echo {
    action: GraspAction,
}

/// Returns the action exactly as the server parsed it.
async fn echo(Json(req): Json<Echo>) -> Json<Echo> {
    Json(req)
}
