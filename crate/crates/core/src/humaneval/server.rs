//! HTTP surface for the judging UI.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /api/session` | issue an anonymous annotator token |
//! | `GET /api/next-assignment?token=` | next pair (two shape grids, no image, no key); 204 when done |
//! | `GET /api/pairs/{pair_id}/image?token=` | query image of the caller's current pair |
//! | `POST /api/vote` | record one vote for the caller's current pair |
//! | `GET /api/progress[?token=]` | collection progress |
//!
//! Pairs go to annotators uniformly at random among those still short of
//! five votes, never twice to the same annotator. A handed-out pair is held
//! for its annotator until the vote arrives or the hold expires. All vote
//! appends happen under one lock, so the log has a single writer.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{append_jsonl, read_jsonl, PairRecord, Side, VoteRecord, PROTOCOL_VERSION, VOTES_PER_PAIR};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::toy_data::Image;
use crate::voxel::read_grid;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub pairs_path: PathBuf,
    /// Append-only vote log; existing votes are loaded on start.
    pub votes_path: PathBuf,
    /// Base for relative shape and image paths in the pair file.
    pub root: PathBuf,
    /// Seeds the assignment order.
    pub seed: u64,
    /// How long a handed-out pair stays reserved for its annotator.
    pub hold: Duration,
}

impl ServerConfig {
    pub fn new(pairs_path: impl Into<PathBuf>, votes_path: impl Into<PathBuf>, root: impl Into<PathBuf>) -> Self {
        ServerConfig {
            pairs_path: pairs_path.into(),
            votes_path: votes_path.into(),
            root: root.into(),
            seed: 0,
            hold: Duration::from_secs(30 * 60),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionResponse {
    pub token: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    pub dims: [usize; 3],
    /// One byte per cell (0 or 1), x-fastest.
    pub occupied: Vec<u8>,
}

/// What the UI receives for a pair. Carries neither the query image nor
/// which side is ours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentPayload {
    pub pair_id: String,
    pub shape_a: GridPayload,
    pub shape_b: GridPayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Vote body posted by the UI; the server adds the annotator id and
/// protocol version.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoteSubmission {
    pub token: String,
    pub pair_id: String,
    pub realism_choice: Side,
    pub coherence_choice: Side,
    pub realism_at_ms: u64,
    pub coherence_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteAck {
    pub pair_id: String,
    /// False when the same vote had already been stored (retry).
    pub recorded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub pairs: usize,
    pub votes_per_pair: usize,
    pub votes_required: usize,
    pub votes_recorded: usize,
    pub pairs_complete: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator_votes: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

#[derive(Default)]
struct Session {
    done: HashSet<usize>,
    pending: Option<(usize, Instant)>,
}

struct Inner {
    pairs: Vec<PairRecord>,
    index: HashMap<String, usize>,
    votes: Vec<usize>,
    /// Stored votes keyed by (annotator, pair), for idempotent retries.
    stored: HashMap<(String, usize), VoteRecord>,
    sessions: HashMap<String, Session>,
    log: File,
    rng: Rng,
    hold: Duration,
}

impl Inner {
    fn held(&self, now: Instant) -> Vec<usize> {
        let mut held = vec![0; self.pairs.len()];
        for s in self.sessions.values() {
            if let Some((p, at)) = s.pending {
                if now.duration_since(at) < self.hold {
                    held[p] += 1;
                }
            }
        }
        held
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    root: Arc<PathBuf>,
}

impl AppState {
    pub fn open(cfg: &ServerConfig) -> Result<Self> {
        let pairs: Vec<PairRecord> = read_jsonl(&cfg.pairs_path)?;
        let index: HashMap<String, usize> = pairs.iter().enumerate().map(|(i, p)| (p.pair_id.clone(), i)).collect();
        if index.len() != pairs.len() {
            return Err(Error::Format("duplicate pair_id in pair file".into()));
        }
        let mut votes = vec![0; pairs.len()];
        let mut stored = HashMap::new();
        let mut sessions: HashMap<String, Session> = HashMap::new();
        if cfg.votes_path.exists() {
            for v in read_jsonl::<VoteRecord>(&cfg.votes_path)? {
                let &i = index
                    .get(&v.pair_id)
                    .ok_or_else(|| Error::Format(format!("vote log names unknown pair {}", v.pair_id)))?;
                votes[i] += 1;
                sessions.entry(v.annotator_id.clone()).or_default().done.insert(i);
                stored.insert((v.annotator_id.clone(), i), v);
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cfg.votes_path)
            .map_err(|e| Error::io(&cfg.votes_path, e))?;
        Ok(AppState {
            inner: Arc::new(Mutex::new(Inner {
                pairs,
                index,
                votes,
                stored,
                sessions,
                log,
                rng: rng::stream(cfg.seed, "humaneval-assign"),
                hold: cfg.hold,
            })),
            root: Arc::new(cfg.root.clone()),
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/session", post(new_session))
        .route("/api/next-assignment", get(next_assignment))
        .route("/api/pairs/:pair_id/image", get(pair_image))
        .route("/api/vote", post(submit_vote))
        .route("/api/progress", get(progress))
        .with_state(state)
}

/// Serves until the process is stopped.
pub fn serve(cfg: &ServerConfig, addr: SocketAddr) -> Result<()> {
    let state = AppState::open(cfg)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("humaneval server listening on {addr}");
        axum::serve(listener, router(state)).await.map_err(|e| Error::io(addr.to_string(), e))
    })
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Inner> {
    state.inner.lock().unwrap_or_else(|p| p.into_inner())
}

fn require_token(q: &TokenQuery) -> Result<&str, ApiError> {
    q.token.as_deref().ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "missing token".into()))
}

fn unknown_token() -> ApiError {
    ApiError(StatusCode::UNAUTHORIZED, "unknown token".into())
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

async fn new_session(State(state): State<AppState>) -> Json<SessionResponse> {
    let token = format!("{:032x}", rand::thread_rng().gen::<u128>());
    lock(&state).sessions.insert(token.clone(), Session::default());
    Json(SessionResponse { token })
}

async fn next_assignment(State(state): State<AppState>, Query(q): Query<TokenQuery>) -> Result<Response, ApiError> {
    let token = require_token(&q)?;
    let pair = {
        let mut g = lock(&state);
        let now = Instant::now();
        let held = g.held(now);
        let inner = &mut *g;
        let session = inner.sessions.get(token).ok_or_else(unknown_token)?;
        let pick = match session.pending {
            Some((p, _)) => Some(p),
            None => {
                let open: Vec<usize> = (0..inner.pairs.len())
                    .filter(|&i| !session.done.contains(&i) && inner.votes[i] + held[i] < VOTES_PER_PAIR)
                    .collect();
                open.choose(&mut inner.rng).copied()
            }
        };
        let Some(i) = pick else {
            return Ok(StatusCode::NO_CONTENT.into_response());
        };
        inner.sessions.get_mut(token).expect("session checked").pending = Some((i, now));
        inner.pairs[i].clone()
    };
    let load = |p: &Path| -> Result<GridPayload, ApiError> {
        let g = read_grid(state.resolve(p))?;
        Ok(GridPayload { dims: g.dims(), occupied: g.values().iter().map(|&v| (v >= 0.5) as u8).collect() })
    };
    let payload = AssignmentPayload { pair_id: pair.pair_id.clone(), shape_a: load(&pair.shape_a)?, shape_b: load(&pair.shape_b)? };
    Ok(Json(payload).into_response())
}

async fn pair_image(
    State(state): State<AppState>,
    UrlPath(pair_id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
) -> Result<Json<ImagePayload>, ApiError> {
    let token = require_token(&q)?;
    let path = {
        let g = lock(&state);
        let session = g.sessions.get(token).ok_or_else(unknown_token)?;
        let &i = g.index.get(&pair_id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "unknown pair".into()))?;
        if session.pending.map(|(p, _)| p) != Some(i) {
            return Err(ApiError(StatusCode::FORBIDDEN, "pair is not the caller's current assignment".into()));
        }
        g.pairs[i].query_image.clone()
    };
    let img = Image::read(state.resolve(&path))?;
    Ok(Json(ImagePayload { width: img.width, height: img.height, data: img.data }))
}

async fn submit_vote(State(state): State<AppState>, Json(v): Json<VoteSubmission>) -> Result<(StatusCode, Json<VoteAck>), ApiError> {
    if v.coherence_at_ms < v.realism_at_ms {
        return Err(ApiError(StatusCode::BAD_REQUEST, "coherence answer precedes realism answer".into()));
    }
    if v.coherence_at_ms > now_ms() + 60_000 {
        return Err(ApiError(StatusCode::BAD_REQUEST, "timestamp lies in the future".into()));
    }
    let mut g = lock(&state);
    let inner = &mut *g;
    let &i = inner.index.get(&v.pair_id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "unknown pair".into()))?;
    let session = inner.sessions.get_mut(&v.token).ok_or_else(unknown_token)?;
    let record = VoteRecord {
        pair_id: v.pair_id.clone(),
        annotator_id: v.token.clone(),
        realism_choice: v.realism_choice,
        coherence_choice: v.coherence_choice,
        realism_at_ms: v.realism_at_ms,
        coherence_at_ms: v.coherence_at_ms,
        protocol_version: PROTOCOL_VERSION,
    };
    if session.done.contains(&i) {
        return match inner.stored.get(&(v.token.clone(), i)) {
            Some(prev) if *prev == record => Ok((StatusCode::OK, Json(VoteAck { pair_id: v.pair_id, recorded: false }))),
            _ => Err(ApiError(StatusCode::CONFLICT, "a different vote for this pair is already stored".into())),
        };
    }
    if session.pending.map(|(p, _)| p) != Some(i) {
        return Err(ApiError(StatusCode::CONFLICT, "pair is not the caller's current assignment".into()));
    }
    if inner.votes[i] >= VOTES_PER_PAIR {
        session.pending = None;
        return Err(ApiError(StatusCode::CONFLICT, "pair already has all its votes".into()));
    }
    append_jsonl(&mut inner.log, &record)?;
    session.pending = None;
    session.done.insert(i);
    inner.votes[i] += 1;
    inner.stored.insert((v.token, i), record);
    Ok((StatusCode::CREATED, Json(VoteAck { pair_id: v.pair_id, recorded: true })))
}

async fn progress(State(state): State<AppState>, Query(q): Query<TokenQuery>) -> Result<Json<Progress>, ApiError> {
    let g = lock(&state);
    let annotator_votes = match q.token.as_deref() {
        Some(t) => Some(g.sessions.get(t).ok_or_else(unknown_token)?.done.len()),
        None => None,
    };
    Ok(Json(Progress {
        pairs: g.pairs.len(),
        votes_per_pair: VOTES_PER_PAIR,
        votes_required: g.pairs.len() * VOTES_PER_PAIR,
        votes_recorded: g.votes.iter().sum(),
        pairs_complete: g.votes.iter().filter(|&&c| c >= VOTES_PER_PAIR).count(),
        annotator_votes,
    }))
}
