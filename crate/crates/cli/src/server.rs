//! HTTP service behind the preference-ranking UI.
//!
//! One operator session: the clustering and encoder are loaded once and
//! never change, while each accepted ranking retrains the utility head.
//! Reads run concurrently; retraining is serialized by a flag, and requests
//! that need the head answer 409 while it is being rebuilt.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use terrapref::datapipe::Dataset;
use terrapref::evalkit::{aligned_fraction, densify, hausdorff, TerrainRanks};
use terrapref::linalg::Matrix;
use terrapref::par::ExecMode;
use terrapref::planner::{run_episode, EpisodeConfig, UtilityModel};
use terrapref::preference::{cost, PreferenceRanking, UtilityConfig, UtilityHead};
use terrapref::rng::{derive_seed, tag};
use terrapref::scenarios::SterlingUtility;
use terrapref::sterling::Checkpoint;
use terrapref::worldsim::{viewpoint_transform, World};

use crate::args::ServeArgs;
use crate::artifacts::*;
use crate::commands::fit_head;
use crate::tiles::render_base64;

/// Viewing distance used to draw each terrain in the costmap.
const COSTMAP_VIEW_DISTANCE: f64 = 1.0;
const DEFAULT_ALPHA: f64 = 0.5;

/// Everything loaded at start-up; read-only afterwards.
pub struct SessionData {
    pub world: World,
    pub task: Option<TaskFile>,
    pub dataset: Dataset,
    pub checkpoint: Checkpoint,
    pub clusters: ClusterFile,
    pub seed: u64,
    pub session_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub exec: ExecMode,
    cluster_payload: Vec<Value>,
    /// Cluster each terrain's canonical view falls into.
    terrain_cluster: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, Default)]
struct ModelState {
    ranking: Option<PreferenceRanking<usize>>,
    head: Option<UtilityHead>,
    utility_hash: Option<String>,
    submissions: usize,
    last_error: Option<String>,
}

pub struct AppState {
    pub data: SessionData,
    model: RwLock<ModelState>,
    training: AtomicBool,
}

impl AppState {
    pub fn open(args: &ServeArgs, exec: ExecMode) -> Result<Self> {
        let world = load_world(&args.world)?;
        let task = args
            .task
            .as_deref()
            .map(|p| load_task(p, &world))
            .transpose()?;
        let dataset = load_dataset(&args.dataset)?;
        let checkpoint: Checkpoint = read_json(&args.checkpoint)?;
        let clusters: ClusterFile = read_json(&args.clustering)?;
        if clusters.dataset_hash != dataset.manifest.content_hash
            || clusters.clustering.assignment.len() != dataset.len()
        {
            return Err(CliError::Runtime(format!(
                "{} was computed on a different dataset",
                args.clustering.display()
            )));
        }
        std::fs::create_dir_all(&args.session).map_err(|e| CliError::File {
            path: args.session.clone(),
            message: e.to_string(),
        })?;
        let cluster_payload = cluster_payload(&dataset, &clusters);
        let terrain_cluster = terrain_clusters(&world, &checkpoint, &clusters)?;
        Ok(Self {
            data: SessionData {
                world,
                task,
                dataset,
                checkpoint,
                clusters,
                seed: args.seed,
                session_dir: args.session.clone(),
                static_dir: args.static_dir.clone(),
                exec,
                cluster_payload,
                terrain_cluster,
            },
            model: RwLock::new(ModelState::default()),
            training: AtomicBool::new(false),
        })
    }

    fn snapshot(&self) -> ModelState {
        self.model.read().expect("model lock").clone()
    }
}

fn cluster_payload(dataset: &Dataset, clusters: &ClusterFile) -> Vec<Value> {
    let sizes = clusters.clustering.sizes();
    clusters
        .exemplars
        .iter()
        .enumerate()
        .map(|(id, members)| {
            let exemplars: Vec<Value> = members
                .iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    json!({
                        "tile_png_base64": render_base64(&s.views[0]),
                        "meta": {"sample": i, "label": s.label, "x": s.state.x, "y": s.state.y, "views": s.views.len()},
                    })
                })
                .collect();
            json!({"id": id, "size": sizes[id], "exemplars": exemplars})
        })
        .collect()
}

fn canonical_views(world: &World) -> Matrix {
    let rows: Vec<Vec<f64>> = world
        .terrains()
        .iter()
        .map(|t| viewpoint_transform(&t.visual_prototype, COSTMAP_VIEW_DISTANCE, 0.0))
        .collect();
    Matrix::from_rows(&rows)
}

fn terrain_clusters(
    world: &World,
    ckpt: &Checkpoint,
    clusters: &ClusterFile,
) -> Result<BTreeMap<u32, usize>> {
    let z = ckpt.encode_visual_batch(&canonical_views(world))?;
    Ok(world
        .terrains()
        .iter()
        .enumerate()
        .map(|(r, t)| (t.id, clusters.clustering.nearest(z.row(r))))
        .collect())
}

/// Terrain ranks implied by a cluster ranking.
fn ranks_from_clusters(data: &SessionData, ranking: &PreferenceRanking<usize>) -> TerrainRanks {
    TerrainRanks(
        data.terrain_cluster
            .iter()
            .filter_map(|(&t, c)| ranking.rank_of(c).map(|r| (t, r as u32)))
            .collect(),
    )
}

fn error(status: StatusCode, message: impl Into<String>, detail: Value) -> Response {
    (
        status,
        Json(json!({"error": message.into(), "detail": detail})),
    )
        .into_response()
}

async fn clusters(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"clusters": state.data.cluster_payload, "ranking": state.snapshot().ranking}))
}

#[derive(Serialize)]
struct Status {
    state: &'static str,
    submissions: usize,
    utility_hash: Option<String>,
    ranking: Option<PreferenceRanking<usize>>,
    last_error: Option<String>,
}

async fn status(State(state): State<Arc<AppState>>) -> Json<Status> {
    let m = state.snapshot();
    let phase = if state.training.load(Ordering::SeqCst) {
        "training"
    } else if m.head.is_some() {
        "ready"
    } else {
        "untrained"
    };
    Json(Status {
        state: phase,
        submissions: m.submissions,
        utility_hash: m.utility_hash,
        ranking: m.ranking,
        last_error: m.last_error,
    })
}

/// Clears the training flag however the request ends.
struct TrainingGuard<'a>(&'a AtomicBool);

impl Drop for TrainingGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn submit_ranking(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let ranking: PreferenceRanking<usize> = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return error(
                StatusCode::BAD_REQUEST,
                "malformed ranking",
                json!(e.to_string()),
            )
        }
    };
    let ids: Vec<usize> = (0..state.data.clusters.clustering.k).collect();
    if let Err(e) = ranking.validate(&ids) {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid ranking",
            json!({"reason": e.to_string(), "clusters": ids}),
        );
    }
    if state
        .training
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return error(StatusCode::CONFLICT, "retraining in progress", Value::Null);
    }
    let worker = state.clone();
    let trained = tokio::task::spawn_blocking(move || {
        let _guard = TrainingGuard(&worker.training);
        let d = &worker.data;
        let cfg = UtilityConfig::new(derive_seed(d.seed, tag("serve-utility")));
        let head = fit_head(&d.checkpoint, &d.dataset, &d.clusters, &ranking, &cfg)?;
        let text = to_json(&head);
        write_json(&d.session_dir, RANKING_FILE, &ranking)?;
        write_text(&d.session_dir, UTILITY_FILE, &text)?;
        let hash = sha256_hex(text.as_bytes());
        let mut m = worker.model.write().expect("model lock");
        m.ranking = Some(ranking);
        m.head = Some(head);
        m.utility_hash = Some(hash.clone());
        m.submissions += 1;
        m.last_error = None;
        Ok::<_, CliError>(hash)
    })
    .await;
    match trained {
        Ok(Ok(hash)) => Json(json!({"status": "trained", "utility_hash": hash})).into_response(),
        Ok(Err(e)) => {
            state.model.write().expect("model lock").last_error = Some(e.to_string());
            error(
                StatusCode::INTERNAL_SERVER_ERROR,
                "training failed",
                json!(e.to_string()),
            )
        }
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "training task failed",
            json!(e.to_string()),
        ),
    }
}

#[derive(Debug, Deserialize)]
pub struct PreviewQuery {
    pub world: Option<String>,
    pub start: Option<String>,
    pub goal: Option<String>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Costmap {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    /// Row-major `e^{-u}` per cell; obstacles cost 1.
    pub values: Vec<f64>,
}

fn costmap(data: &SessionData, model: &dyn UtilityModel) -> Result<Costmap> {
    let u = model.utilities(&canonical_views(&data.world))?;
    let by_terrain: BTreeMap<u32, f64> = data
        .world
        .terrains()
        .iter()
        .zip(&u)
        .map(|(t, &u)| cost(u).map(|c| (t.id, c)))
        .collect::<std::result::Result<_, _>>()?;
    let cfg = data.world.config();
    let values = (0..cfg.height)
        .flat_map(|r| (0..cfg.width).map(move |c| (c, r)))
        .map(|(c, r)| {
            if data.world.is_blocked_cell(c, r) {
                1.0
            } else {
                by_terrain[&data.world.cell_terrain(c, r)]
            }
        })
        .collect();
    Ok(Costmap {
        width: cfg.width,
        height: cfg.height,
        cell_size: cfg.cell_size,
        values,
    })
}

#[allow(clippy::result_large_err)]
fn preview_payload(
    data: &SessionData,
    m: &ModelState,
    q: &PreviewQuery,
) -> std::result::Result<Value, Response> {
    let unprocessable = |msg: String| error(StatusCode::UNPROCESSABLE_ENTITY, msg, Value::Null);
    if let Some(w) = &q.world {
        let hash = data.world.content_hash();
        if w != "session" && !(w.len() >= 8 && hash.starts_with(w.as_str())) {
            return Err(error(
                StatusCode::NOT_FOUND,
                format!("unknown world '{w}'"),
                json!({"served": hash}),
            ));
        }
    }
    let (Some(head), Some(ranking)) = (&m.head, &m.ranking) else {
        return Err(error(
            StatusCode::CONFLICT,
            "no trained utility yet; POST /api/ranking first",
            Value::Null,
        ));
    };
    let start = match (&q.start, &data.task) {
        (Some(s), _) => parse_pose(s).map_err(|e| unprocessable(e.to_string()))?,
        (None, Some(t)) => t.start,
        (None, None) => return Err(unprocessable("start is required".into())),
    };
    let goal = match (&q.goal, &data.task) {
        (Some(g), _) => parse_point(g).map_err(|e| unprocessable(e.to_string()))?,
        (None, Some(t)) => t.goal,
        (None, None) => return Err(unprocessable("goal is required".into())),
    };
    let alpha = q.alpha.unwrap_or(DEFAULT_ALPHA);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(unprocessable(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let model = SterlingUtility {
        checkpoint: &data.checkpoint,
        head,
    };
    let mut cfg = EpisodeConfig::new(goal, alpha);
    cfg.exec = data.exec;
    let internal = |e: CliError| {
        error(
            StatusCode::INTERNAL_SERVER_ERROR,
            e.to_string(),
            Value::Null,
        )
    };
    let episode = run_episode(
        &data.world,
        &model,
        &cfg,
        start,
        derive_seed(data.seed, tag("preview")),
    )
    .map_err(|e| unprocessable(e.to_string()))?;
    let path = episode.points();
    let task_reference = data
        .task
        .as_ref()
        .filter(|t| t.goal == goal && t.start.xy() == start.xy())
        .map(|t| t.reference.clone());
    let ranks = ranks_from_clusters(data, ranking);
    let reference = task_reference
        .clone()
        .unwrap_or_else(|| vec![start.xy(), goal]);
    let aligned =
        aligned_fraction(&path, &data.world, &ranks, &reference).map_err(|e| internal(e.into()))?;
    let h = match &task_reference {
        Some(r) => Some(
            hausdorff(&densify(&path, 0.05), &densify(r, 0.05)).map_err(|e| internal(e.into()))?,
        ),
        None => None,
    };
    let costmap = costmap(data, &model).map_err(internal)?;
    Ok(json!({
        "path": path,
        "outcome": episode.outcome,
        "costmap": costmap,
        "metrics": {"aligned_fraction": aligned, "hausdorff_to_reference": h},
        "utility_hash": m.utility_hash,
        "alpha": alpha,
    }))
}

#[allow(clippy::result_large_err)]
async fn preview(State(state): State<Arc<AppState>>, Query(q): Query<PreviewQuery>) -> Response {
    if state.training.load(Ordering::SeqCst) {
        return error(StatusCode::CONFLICT, "retraining in progress", Value::Null);
    }
    let m = state.snapshot();
    let worker = state.clone();
    match tokio::task::spawn_blocking(move || preview_payload(&worker.data, &m, &q)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(r)) => r,
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "preview task failed",
            json!(e.to_string()),
        ),
    }
}

/// Static UI bundle; `index.html` for the root.
async fn static_file(State(state): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(root) = &state.data.static_dir else {
        return error(
            StatusCode::NOT_FOUND,
            "no UI bundle configured",
            Value::Null,
        );
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    if rel_path
        .components()
        .any(|c| !matches!(c, Component::Normal(_)))
    {
        return error(StatusCode::NOT_FOUND, "not found", Value::Null);
    }
    match tokio::fs::read(root.join(rel_path)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(rel_path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found", Value::Null),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/clusters", get(clusters))
        .route("/api/ranking", post(submit_ranking))
        .route("/api/preview", get(preview))
        .route("/api/status", get(status))
        .fallback(get(static_file))
        .with_state(state)
}

pub fn serve(args: &ServeArgs, exec: ExecMode) -> Result<()> {
    let state = Arc::new(AppState::open(args, exec)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))?;
        println!("serving on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}
