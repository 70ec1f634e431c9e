//! Annotation task service.
//!
//! A data directory holds `scenes/<scene_id>/` in the [`crate::dataset`]
//! layout, an optional `embeddings.jsonl` label table, and `tasks/` with the
//! task journal. On start every track without a task gets one at `TRACKED`
//! with its ranked CAD candidates. Tasks are handed out first-in first-out
//! per stage; a task handed out is held for [`LEASE`] before it is offered
//! to anyone else. Writes are journaled before they are acknowledged.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cadkit_core::retrieval::{rank_candidates, EmbeddingProvider, HashEmbedding, ModelViewDescriptors};
use cadkit_core::{
    detect_symmetry, estimate_pose, CandidateList, CorrespondenceSet, SolveResult, SolverConfig,
    SymmetryClass, TriangleMesh,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::dataset::{DatasetError, SceneDir};
use crate::formats::{read_text, scene_to_json, LookupEmbedding};
use crate::journal::{Journal, JournalError, TaskMap};
use crate::tasks::{advance_task, transition, AnnotationTask, Payload, PayloadKind, Stage, TaskContext, TaskError};

/// How long a handed-out task is withheld from other annotators.
pub const LEASE: Duration = Duration::from_secs(600);
/// Wall-clock budget for one pose solve.
pub const SOLVE_BUDGET: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("track {track_id} appears in scenes {first} and {second}")]
    DuplicateTrack {
        track_id: String,
        first: String,
        second: String,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Read-only scene data behind the tasks.
pub struct Workspace {
    pub scenes: BTreeMap<String, SceneDir>,
    pub models: BTreeMap<String, TriangleMesh>,
    pub symmetry: BTreeMap<String, SymmetryClass>,
    pub descriptors: Vec<ModelViewDescriptors>,
    track_scene: HashMap<String, String>,
}

impl Workspace {
    pub fn load(data_dir: &Path) -> Result<Workspace, ServiceError> {
        let mut scenes = BTreeMap::new();
        let scenes_dir = data_dir.join("scenes");
        if scenes_dir.is_dir() {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&scenes_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for dir in dirs {
                let sd = SceneDir::load(&dir)?;
                scenes.insert(sd.scene.scene_id.clone(), sd);
            }
        }

        let mut models = BTreeMap::new();
        let mut descriptors = Vec::new();
        let mut track_scene: HashMap<String, String> = HashMap::new();
        for (scene_id, sd) in &scenes {
            for (id, m) in &sd.models {
                models.entry(id.clone()).or_insert_with(|| m.clone());
            }
            descriptors.extend(sd.descriptors.iter().cloned());
            for t in &sd.tracks {
                if let Some(first) = track_scene.insert(t.track_id.clone(), scene_id.clone()) {
                    return Err(ServiceError::DuplicateTrack {
                        track_id: t.track_id.clone(),
                        first,
                        second: scene_id.clone(),
                    });
                }
            }
        }
        descriptors.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        descriptors.dedup_by(|a, b| a.model_id == b.model_id);
        let symmetry = models
            .iter()
            .map(|(id, m)| (id.clone(), detect_symmetry(m)))
            .collect();

        Ok(Workspace {
            scenes,
            models,
            symmetry,
            descriptors,
            track_scene,
        })
    }

    pub fn scene_of_track(&self, track_id: &str) -> Option<&SceneDir> {
        self.track_scene.get(track_id).and_then(|s| self.scenes.get(s))
    }

    fn scene_for(&self, task: &AnnotationTask) -> Result<&SceneDir, String> {
        self.scenes
            .get(&task.scene_id)
            .ok_or_else(|| format!("unknown scene {}", task.scene_id))
    }

    fn model(&self, model_id: &str) -> Result<&TriangleMesh, String> {
        self.models
            .get(model_id)
            .ok_or_else(|| format!("unknown model {model_id}"))
    }

    /// Solve the pose for a task's stored correspondences.
    pub fn solve_task(&self, task: &AnnotationTask) -> Result<SolveResult, String> {
        let corr = task
            .correspondences
            .as_ref()
            .ok_or("task has no correspondences")?;
        let scene = self.scene_for(task)?;
        let mesh = self.model(&corr.model_id)?;
        let cfg = SolverConfig {
            world_up: scene.scene.world_up,
            ..SolverConfig::default()
        };
        estimate_pose(corr, &scene.scene.cameras(), mesh, &self.symmetry[&corr.model_id], &cfg)
            .map_err(|e| e.to_string())
    }
}

impl TaskContext for Workspace {
    fn check_correspondences(&self, task: &AnnotationTask, set: &CorrespondenceSet) -> Result<(), String> {
        self.model(&set.model_id)?;
        set.validate(&self.scene_for(task)?.scene.cameras())
            .map_err(|e| e.to_string())
    }

    fn solve(&self, task: &AnnotationTask) -> Result<SolveResult, String> {
        self.solve_task(task)
    }
}

/// A context whose solve was already run, so it can be applied under the
/// store lock without blocking other requests.
struct Presolved<'a> {
    ws: &'a Workspace,
    result: Result<SolveResult, String>,
}

impl TaskContext for Presolved<'_> {
    fn check_correspondences(&self, task: &AnnotationTask, set: &CorrespondenceSet) -> Result<(), String> {
        self.ws.check_correspondences(task, set)
    }

    fn solve(&self, _: &AnnotationTask) -> Result<SolveResult, String> {
        self.result.clone()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("no task {0}")]
    NotFound(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

/// Tasks in memory, backed by the journal.
pub struct TaskStore {
    tasks: TaskMap,
    journal: Journal,
    leases: HashMap<String, Instant>,
    next_seq: u64,
}

impl TaskStore {
    pub fn open(dir: &Path) -> Result<TaskStore, JournalError> {
        let (journal, tasks) = Journal::open(dir)?;
        let next_seq = tasks.values().map(|t| t.seq + 1).max().unwrap_or(0);
        Ok(TaskStore {
            tasks,
            journal,
            leases: HashMap::new(),
            next_seq,
        })
    }

    pub fn get(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(task_id)
    }

    pub fn by_track(&self, track_id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(&format!("task-{track_id}"))
    }

    pub fn tasks(&self) -> &TaskMap {
        &self.tasks
    }

    fn write(&mut self, task: AnnotationTask) -> Result<(), JournalError> {
        self.journal.append(&task)?;
        self.tasks.insert(task.task_id.clone(), task);
        if self.journal.needs_compaction() {
            self.journal.compact(&self.tasks)?;
        }
        Ok(())
    }

    /// Create a `TRACKED` task for every track that has none.
    pub fn seed(&mut self, ws: &Workspace, emb: &dyn EmbeddingProvider) -> Result<usize, JournalError> {
        let mut created = 0;
        for (scene_id, sd) in &ws.scenes {
            for track in &sd.tracks {
                if self.by_track(&track.track_id).is_some() {
                    continue;
                }
                let candidates = rank_candidates(track, &ws.descriptors, emb).unwrap_or(CandidateList {
                    track_id: track.track_id.clone(),
                    entries: Vec::new(),
                });
                let task = AnnotationTask::new(scene_id, candidates, self.next_seq);
                self.next_seq += 1;
                self.write(task)?;
                created += 1;
            }
        }
        Ok(created)
    }

    /// Oldest unleased task at `stage`, leased to the caller.
    pub fn next(&mut self, stage: Stage, now: Instant) -> Option<AnnotationTask> {
        let leases = &self.leases;
        let task = self
            .tasks
            .values()
            .filter(|t| t.stage == stage)
            .filter(|t| leases.get(&t.task_id).map_or(true, |&at| now.duration_since(at) >= LEASE))
            .min_by_key(|t| t.seq)?
            .clone();
        self.leases.insert(task.task_id.clone(), now);
        Some(task)
    }

    /// Apply a submission and journal the result before returning it.
    pub fn submit(
        &mut self,
        task_id: &str,
        version: u64,
        payload: Payload,
        annotator: Option<String>,
        ctx: &dyn TaskContext,
    ) -> Result<AnnotationTask, SubmitError> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| SubmitError::NotFound(task_id.to_string()))?;
        let mut next = advance_task(task, version, payload, ctx)?;
        if annotator.is_some() {
            next.annotator = annotator;
        }
        self.write(next.clone())?;
        self.leases.remove(task_id);
        Ok(next)
    }
}

pub struct AppState {
    pub workspace: Workspace,
    pub store: Mutex<TaskStore>,
    solver_slots: Semaphore,
}

impl AppState {
    pub fn new(workspace: Workspace, store: TaskStore) -> Self {
        let slots = std::thread::available_parallelism().map_or(1, |n| n.get());
        AppState {
            workspace,
            store: Mutex::new(store),
            solver_slots: Semaphore::new(slots),
        }
    }

    /// Load the workspace, replay the journal and seed new tasks.
    pub fn open(data_dir: &Path) -> Result<AppState, ServiceError> {
        let workspace = Workspace::load(data_dir)?;
        let emb_path = data_dir.join("embeddings.jsonl");
        let emb: Box<dyn EmbeddingProvider> = if emb_path.exists() {
            let text = read_text(&emb_path).map_err(DatasetError::from)?;
            Box::new(LookupEmbedding::parse(&text).map_err(DatasetError::from)?)
        } else {
            Box::new(HashEmbedding::default())
        };
        let mut store = TaskStore::open(&data_dir.join("tasks"))?;
        store.seed(&workspace, emb.as_ref())?;
        Ok(AppState::new(workspace, store))
    }
}

type Shared = Arc<AppState>;

struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        ApiError(status, json!({ "error": message.to_string() }))
    }
    fn not_found(what: impl ToString) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, what)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        let status = match &e {
            SubmitError::NotFound(_) => StatusCode::NOT_FOUND,
            SubmitError::Task(TaskError::Conflict { .. }) => StatusCode::CONFLICT,
            SubmitError::Task(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SubmitError::Journal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e)
    }
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/:id", get(get_task))
        .route("/api/tasks/:id/result", post(submit_result))
        .route("/api/scenes/:id", get(get_scene))
        .route("/api/scenes/:id/frames/:frame_id/image", get(frame_image))
        .route("/api/models/:id/mesh", get(model_mesh))
        .route("/api/tracks/:id/candidates", get(track_candidates))
        .route("/api/tracks/:id/solve-result", get(track_solve_result))
        .with_state(state)
}

#[derive(Deserialize)]
struct NextQuery {
    stage: String,
}

async fn next_task(State(st): State<Shared>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    let stage = Stage::parse(&q.stage)
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown stage {}", q.stage)))?;
    let task = st.store.lock().unwrap().next(stage, Instant::now());
    Ok(match task {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn get_task(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<AnnotationTask>, ApiError> {
    let store = st.store.lock().unwrap();
    store
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no task {id}")))
}

#[derive(Deserialize)]
struct Submission {
    version: u64,
    payload: Payload,
    #[serde(default)]
    annotator: Option<String>,
}

#[derive(Serialize)]
struct SubmitResponse {
    task: AnnotationTask,
    /// Set when the automatic solve after correspondences failed; the task
    /// stays at `CORRESPONDED` and a `solve` payload retries.
    #[serde(skip_serializing_if = "Option::is_none")]
    solve_error: Option<String>,
}

/// Run the solver for `task` on the blocking pool within the time budget.
async fn solve_off_thread(st: &Shared, task: AnnotationTask) -> Result<SolveResult, String> {
    let _slot = st.solver_slots.acquire().await.map_err(|e| e.to_string())?;
    let st2 = Arc::clone(st);
    let job = tokio::task::spawn_blocking(move || st2.workspace.solve_task(&task));
    match tokio::time::timeout(SOLVE_BUDGET, job).await {
        Ok(Ok(result)) => result,
        Ok(Err(join)) => Err(format!("solver crashed: {join}")),
        Err(_) => Err(format!("solve exceeded {} s", SOLVE_BUDGET.as_secs())),
    }
}

async fn apply_solve(st: &Shared, task: AnnotationTask, annotator: Option<String>) -> Result<AnnotationTask, SubmitError> {
    let result = solve_off_thread(st, task.clone()).await;
    let ctx = Presolved {
        ws: &st.workspace,
        result,
    };
    st.store
        .lock()
        .unwrap()
        .submit(&task.task_id, task.version, Payload::Solve, annotator, &ctx)
}

async fn submit_result(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SubmitResponse>, ApiError> {
    let sub: Submission = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("bad submission: {e}")))?;

    if sub.payload == Payload::Solve {
        let task = st
            .store
            .lock()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no task {id}")))?;
        if task.version != sub.version {
            return Err(SubmitError::Task(TaskError::Conflict {
                current: task.version,
                submitted: sub.version,
            })
            .into());
        }
        if transition(task.stage, PayloadKind::Solve).is_none() {
            return Err(SubmitError::Task(TaskError::InvalidTransition {
                stage: task.stage,
                kind: PayloadKind::Solve,
            })
            .into());
        }
        let task = apply_solve(&st, task, sub.annotator).await?;
        return Ok(Json(SubmitResponse { task, solve_error: None }));
    }

    let task = st
        .store
        .lock()
        .unwrap()
        .submit(&id, sub.version, sub.payload, sub.annotator, &st.workspace)?;
    if task.stage != Stage::Corresponded {
        return Ok(Json(SubmitResponse { task, solve_error: None }));
    }
    match apply_solve(&st, task.clone(), None).await {
        Ok(task) => Ok(Json(SubmitResponse { task, solve_error: None })),
        Err(SubmitError::Task(TaskError::Solve(e))) => Ok(Json(SubmitResponse {
            task,
            solve_error: Some(e),
        })),
        Err(e) => {
            // someone else moved the task on; report where it is now
            let current = st.store.lock().unwrap().get(&id).cloned().unwrap_or(task);
            Ok(Json(SubmitResponse {
                task: current,
                solve_error: Some(e.to_string()),
            }))
        }
    }
}

async fn get_scene(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let sd = st
        .workspace
        .scenes
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("no scene {id}")))?;
    let scene: serde_json::Value = serde_json::from_str(&scene_to_json(&sd.scene)).expect("scene JSON parses");
    Ok(Json(json!({ "scene": scene, "tracks": sd.tracks })))
}

fn image_content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn frame_image(
    State(st): State<Shared>,
    UrlPath((id, frame_id)): UrlPath<(String, u32)>,
) -> Result<Response, ApiError> {
    let sd = st
        .workspace
        .scenes
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("no scene {id}")))?;
    let frame = sd
        .scene
        .frames
        .iter()
        .find(|f| f.camera.frame_id == frame_id)
        .ok_or_else(|| ApiError::not_found(format!("no frame {frame_id} in scene {id}")))?;
    let path = sd.dir.join(&frame.image);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("image {} is missing", frame.image)))?;
    Ok(([(header::CONTENT_TYPE, image_content_type(&path))], bytes).into_response())
}

async fn model_mesh(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let mesh = st
        .workspace
        .models
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("no model {id}")))?;
    Ok(([(header::CONTENT_TYPE, "model/obj")], cadkit_core::mesh::to_obj(mesh)).into_response())
}

async fn track_candidates(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<CandidateList>, ApiError> {
    let store = st.store.lock().unwrap();
    store
        .by_track(&id)
        .map(|t| Json(t.candidates.clone()))
        .ok_or_else(|| ApiError::not_found(format!("no track {id}")))
}

async fn track_solve_result(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SolveResult>, ApiError> {
    let store = st.store.lock().unwrap();
    let task = store
        .by_track(&id)
        .ok_or_else(|| ApiError::not_found(format!("no track {id}")))?;
    task.solve_result
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("track {id} has no pose yet")))
}

/// Serve `data_dir` on `port` until interrupted.
pub async fn serve(data_dir: &Path, port: u16) -> anyhow::Result<()> {
    let state = Arc::new(AppState::open(data_dir)?);
    let n = state.store.lock().unwrap().tasks().len();
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("serving {n} tasks on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
