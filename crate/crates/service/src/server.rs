//! One model, one debugging session, served over HTTP.
//!
//! Reads work on the state as of the last completed operation. Verdicts and
//! job starts take the state lock in turn, and at most one fine-tune runs at
//! a time, on a copy of the model and session that replaces the shared one
//! when it finishes.

use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use protodebug::dataset::{encode_rgb_png, Dataset};
use protodebug::debugger::{
    Candidate, DebugSession, Decision, SessionConfig, SessionReport, SessionSummary, Status,
    Verdict,
};
use protodebug::explain::{attribution, display_patches, overlay, scaled_min_area};
use protodebug::metrics::EvalResult;
use protodebug::model::ProtoPNet;
use serde::{Deserialize, Serialize};

use crate::jobs::{JobKind, JobState, JobStatus};

pub const PORT_ENV: &str = "PROTODEBUG_PORT";
pub const DEFAULT_PORT: u16 = 8080;

pub const REPORT_FILE: &str = "session_report.json";
pub const SESSION_FILE: &str = "session.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, Default)]
pub struct ServerOptions {
    /// Every accepted verdict is appended here as one JSON line.
    pub feedback_log: Option<PathBuf>,
    /// Report, session state and checkpoint are rewritten here whenever a
    /// round closes.
    pub out_dir: Option<PathBuf>,
}

struct Inner {
    model: ProtoPNet,
    session: DebugSession,
    jobs: Vec<JobStatus>,
    active: Option<u64>,
    options: ServerOptions,
}

#[derive(Clone)]
pub struct AppState {
    data: Arc<Dataset>,
    inner: Arc<Mutex<Inner>>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<protodebug::Error> for ApiError {
    fn from(e: protodebug::Error) -> Self {
        use protodebug::Error as E;
        let status = match &e {
            E::Index(_) => StatusCode::NOT_FOUND,
            E::Session(_) => StatusCode::CONFLICT,
            E::Config(_) | E::Data(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub summary: SessionSummary,
    pub max_rounds: usize,
    /// No further verdicts are accepted.
    pub finished: bool,
    pub active_job: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    #[serde(flatten)]
    pub candidate: Candidate,
    pub overlay_url: String,
    pub verdict: Option<Decision>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeView {
    pub prototype: usize,
    pub class: usize,
    /// Most activated first.
    pub candidates: Vec<CandidateView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypesView {
    pub round: usize,
    pub status: Status,
    pub prototypes: Vec<PrototypeView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 0 before any fine-tune, `r + 1` after round `r`.
    pub round: usize,
    pub eval: EvalResult,
}

fn finished(s: &DebugSession) -> bool {
    s.status == Status::Converged
        || (s.status == Status::Collecting && s.round >= s.config.max_rounds)
}

pub fn overlay_url(image: &str, prototype: usize) -> String {
    format!("/api/images/{image}/overlay/{prototype}")
}

impl AppState {
    /// Starts a session on `model` and prepares its first round.
    pub fn new(
        model: ProtoPNet,
        data: Dataset,
        config: SessionConfig,
        options: ServerOptions,
    ) -> protodebug::Result<Self> {
        let mut session = DebugSession::new(config, model.num_classes());
        if session.config.max_rounds > 0 {
            session.prepare_round(&model, &data)?;
        }
        Self::resume(model, data, session, options)
    }

    /// Serves an existing session as is.
    pub fn resume(
        model: ProtoPNet,
        data: Dataset,
        session: DebugSession,
        options: ServerOptions,
    ) -> protodebug::Result<Self> {
        if session.num_classes != model.num_classes() {
            return Err(protodebug::Error::Session(
                "session and model disagree on classes".into(),
            ));
        }
        let inner = Inner {
            model,
            session,
            jobs: Vec::new(),
            active: None,
            options,
        };
        persist(&inner);
        Ok(Self {
            data: Arc::new(data),
            inner: Arc::new(Mutex::new(inner)),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn report(&self) -> protodebug::Result<SessionReport> {
        self.lock().session.report()
    }

    pub fn model(&self) -> ProtoPNet {
        self.lock().model.clone()
    }

    pub fn session(&self) -> DebugSession {
        self.lock().session.clone()
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.lock().jobs.get(id as usize).cloned()
    }

    fn run_finetune(&self, id: u64, mut model: ProtoPNet, mut session: DebugSession) {
        let data = &self.data;
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
            let report = session.finetune(&mut model, data)?;
            if !finished(&session) {
                session.prepare_round(&model, data)?;
            }
            Ok::<_, protodebug::Error>(report)
        }));
        let mut g = self.lock();
        g.active = None;
        let (state, message) = match outcome {
            Ok(Ok(report)) => {
                let f1 = session.last_eval.as_ref().map_or(f64::NAN, |e| e.macro_f1);
                let msg = format!(
                    "round {} fine-tuned: loss {:.4}, test macro F1 {f1:.3}",
                    session.round - 1,
                    report.final_loss().unwrap_or(f64::NAN)
                );
                g.model = model;
                g.session = session;
                persist(&g);
                (JobState::Done, msg)
            }
            Ok(Err(e)) => (JobState::Failed, e.to_string()),
            Err(_) => (JobState::Failed, "fine-tune panicked".to_string()),
        };
        if state == JobState::Failed {
            log::error!("job {id}: {message}");
        }
        if let Err(e) = g.jobs[id as usize].advance(state, message) {
            log::error!("{e}");
        }
    }
}

fn persist(g: &Inner) {
    let Some(dir) = &g.options.out_dir else {
        return;
    };
    let write = || -> protodebug::Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Ok(report) = g.session.report() {
            std::fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
        }
        std::fs::write(dir.join(SESSION_FILE), g.session.to_json()?)?;
        g.model.save(dir.join(CHECKPOINT_FILE))
    };
    if let Err(e) = write() {
        log::warn!("cannot write session outputs to {}: {e}", dir.display());
    }
}

fn append_feedback(g: &Inner) -> std::io::Result<()> {
    let (Some(path), Some(entry)) = (&g.options.feedback_log, g.session.log.last()) else {
        return Ok(());
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
    line.push(b'\n');
    f.write_all(&line)
}

async fn get_session(State(s): State<AppState>) -> Json<SessionView> {
    let g = s.lock();
    Json(SessionView {
        summary: g.session.summary(),
        max_rounds: g.session.config.max_rounds,
        finished: finished(&g.session),
        active_job: g.active,
    })
}

async fn get_prototypes(State(s): State<AppState>) -> Json<PrototypesView> {
    let g = s.lock();
    let session = &g.session;
    let prototypes = (0..g.model.num_prototypes())
        .map(|j| PrototypeView {
            prototype: j,
            class: g.model.prototype_class[j],
            candidates: session
                .candidates
                .iter()
                .filter(|c| c.prototype == j)
                .map(|c| CandidateView {
                    candidate: c.clone(),
                    overlay_url: overlay_url(&c.image, j),
                    verdict: session
                        .verdicts
                        .iter()
                        .find(|v| v.prototype == j && v.image == c.image)
                        .map(|v| v.decision),
                })
                .collect(),
        })
        .collect();
    Json(PrototypesView {
        round: session.round,
        status: session.status,
        prototypes,
    })
}

async fn get_overlay(
    State(s): State<AppState>,
    Path((image, prototype)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let ex = s
        .data
        .find(&image)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image {image}")))?;
    let (model, patches, min_area) = {
        let g = s.lock();
        if prototype >= g.model.num_prototypes() {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                format!("unknown prototype {prototype}"),
            ));
        }
        let [h, w, _] = g.model.config.input_shape;
        let min_area = g
            .session
            .config
            .min_patch_area
            .unwrap_or_else(|| scaled_min_area(h, w));
        let patches = g
            .session
            .candidate(prototype, &image)
            .map(|c| c.patches.clone());
        (g.model.clone(), patches, min_area)
    };
    let map = attribution(&model, prototype, ex)?;
    let patches = patches.unwrap_or_else(|| display_patches(&map, min_area));
    let png = encode_rgb_png(&overlay(&map, ex, &patches))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn post_feedback(
    State(s): State<AppState>,
    Json(verdict): Json<Verdict>,
) -> ApiResult<Json<SessionSummary>> {
    let mut g = s.lock();
    if g.active.is_some() || g.session.status == Status::Finetuning {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "fine-tuning in progress",
        ));
    }
    if finished(&g.session) {
        return Err(ApiError::new(
            StatusCode::GONE,
            "the session accepts no more verdicts",
        ));
    }
    let summary = g.session.submit(verdict)?;
    if let Err(e) = append_feedback(&g) {
        log::warn!("cannot append to the feedback log: {e}");
    }
    Ok(Json(summary))
}

/// Closes verdict collection and, unless that converges the session,
/// starts the round's fine-tune in the background.
async fn post_finetune(State(s): State<AppState>) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let (job, model, session) = {
        let mut g = s.lock();
        if g.active.is_some() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "a job is already running",
            ));
        }
        if finished(&g.session) {
            return Err(ApiError::new(StatusCode::GONE, "the session has finished"));
        }
        if g.session.status == Status::Collecting {
            let k = g.model.num_prototypes();
            g.session.finish_collection(k)?;
        }
        let id = g.jobs.len() as u64;
        let mut job = JobStatus::queued(id, JobKind::Finetune);
        if g.session.status == Status::Converged {
            job.advance(JobState::Done, "converged: no forbid verdict this round")
                .expect("fresh job");
            g.jobs.push(job.clone());
            persist(&g);
            return Ok((StatusCode::OK, Json(job)));
        }
        job.advance(
            JobState::Running,
            format!("fine-tuning round {}", g.session.round),
        )
        .expect("fresh job");
        g.jobs.push(job.clone());
        g.active = Some(id);
        (job, g.model.clone(), g.session.clone())
    };
    let state = s.clone();
    let id = job.id;
    tokio::task::spawn_blocking(move || state.run_finetune(id, model, session));
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<JobStatus>> {
    s.job(id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

async fn get_metrics(State(s): State<AppState>) -> Json<Vec<RoundMetrics>> {
    let g = s.lock();
    let initial = g.session.initial_eval.iter().map(|e| RoundMetrics {
        round: 0,
        eval: e.clone(),
    });
    let rounds = g.session.rounds.iter().filter_map(|r| {
        r.eval_after.as_ref().map(|e| RoundMetrics {
            round: r.round + 1,
            eval: e.clone(),
        })
    });
    Json(initial.chain(rounds).collect())
}

async fn get_report(State(s): State<AppState>) -> ApiResult<Json<SessionReport>> {
    Ok(Json(s.report()?))
}

async fn get_checkpoint(State(s): State<AppState>) -> ApiResult<Response> {
    let bytes = s.lock().model.to_bytes()?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/session", get(get_session))
        .route("/api/prototypes", get(get_prototypes))
        .route("/api/images/{id}/overlay/{prototype}", get(get_overlay))
        .route("/api/feedback", post(post_feedback))
        .route("/api/rounds/finetune", post(post_finetune))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/metrics", get(get_metrics))
        .route("/api/report", get(get_report))
        .route("/api/checkpoint", get(get_checkpoint))
        .with_state(state)
}

/// Port from [`PORT_ENV`], else [`DEFAULT_PORT`].
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| format!("{PORT_ENV}={v} is not a port number")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

/// Serves `state` on `addr` until `shutdown` resolves.
pub async fn serve(
    state: AppState,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
