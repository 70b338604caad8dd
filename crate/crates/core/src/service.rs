//! Human-oracle annotation service.
//!
//! A session directory holds everything needed to survive a crash:
//!
//! ```text
//! session.json        loop snapshot, rewritten atomically at round boundaries
//! queue.jsonl         every pair issued to annotators, append-only
//! annotations.jsonl   every accepted answer, append-only
//! checkpoints/        round_kk/ checkpoints as written by the loop
//! ```
//!
//! On open both JSONL files are replayed; a torn trailing line left by a crash
//! mid-write is truncated away. The loop only advances when the current round
//! has no pending pairs, and it holds the session lock while training, so
//! submissions and loop mutation never interleave.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

use crate::active::{
    write_checkpoint, ActiveLoop, AnnotationRecord, AnnotationSource, Drive, LoopConfig, LoopData, LoopError, Oracle,
    OracleError, PendingRound, Phase,
};
use crate::data::{group_kfold_split, load_manifest, Dataset, SplitSpec};
use crate::loss::RelativeLabel;
use crate::model::NetworkConfig;

pub const TOKEN_HEADER: &str = "x-annotation-token";
const SESSION_FORMAT: &str = "alrank-session/1";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown pair `{0}`")]
    UnknownPair(String),
    #[error("pair `{0}` is already answered")]
    AlreadyAnswered(String),
    #[error("label {0} is not one of 0, 0.5, 1")]
    InvalidLabel(f64),
    #[error("round {round} still has {pending} pending pairs")]
    NotDrained { round: usize, pending: usize },
    #[error("the labeling schedule is complete")]
    Finished,
    #[error("round {0} was already issued with different pairs")]
    QueueConflict(usize),
    #[error("{path}: line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Session(String),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            ServiceError::UnknownPair(_) => "not_found",
            ServiceError::AlreadyAnswered(_) | ServiceError::NotDrained { .. } | ServiceError::Finished => "conflict",
            ServiceError::QueueConflict(_) => "conflict",
            ServiceError::InvalidLabel(_) => "invalid_label",
            ServiceError::Corrupt { .. } | ServiceError::Session(_) => "session",
            ServiceError::Loop(_) => "loop",
            ServiceError::Io(_) => "io",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ServiceError::AlreadyAnswered(_)
            | ServiceError::NotDrained { .. }
            | ServiceError::Finished
            | ServiceError::QueueConflict(_) => StatusCode::CONFLICT,
            ServiceError::InvalidLabel(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.category(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}

/// A pair issued to annotators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub pair_id: String,
    pub round: usize,
    pub i: String,
    pub j: String,
}

pub fn pair_id(round: usize, index: usize) -> String {
    format!("r{round:02}-{index:05}")
}

/// Reads complete JSONL lines, truncating a torn trailing line in place.
fn replay_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if complete < bytes.len() {
        log::warn!("{}: dropping {} bytes of torn trailing line", path.display(), bytes.len() - complete);
        file.set_len(complete as u64)?;
        file.sync_data()?;
    }
    let text = String::from_utf8_lossy(&bytes[..complete]);
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| ServiceError::Corrupt {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn open_append(path: &Path) -> io::Result<File> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.seek(SeekFrom::End(0))?;
    Ok(f)
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(value).expect("record serializes");
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()
}

/// Durable queue of issued pairs and their answers.
pub struct AnnotationQueue {
    entries: Vec<QueueEntry>,
    index: HashMap<String, usize>,
    answers: HashMap<String, AnnotationRecord>,
    queue_file: File,
    answer_file: File,
}

impl AnnotationQueue {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let queue_path = dir.join("queue.jsonl");
        let answer_path = dir.join("annotations.jsonl");
        let entries: Vec<QueueEntry> = replay_jsonl(&queue_path)?;
        let mut index = HashMap::with_capacity(entries.len());
        for (k, e) in entries.iter().enumerate() {
            if index.insert(e.pair_id.clone(), k).is_some() {
                return Err(ServiceError::Corrupt {
                    path: queue_path,
                    line: k + 1,
                    message: format!("duplicate pair id `{}`", e.pair_id),
                });
            }
        }
        let mut answers = HashMap::new();
        for (n, rec) in replay_jsonl::<AnnotationRecord>(&answer_path)?.into_iter().enumerate() {
            let corrupt = |message: String| ServiceError::Corrupt { path: answer_path.clone(), line: n + 1, message };
            let id = rec.pair_id.clone().ok_or_else(|| corrupt("answer without pair_id".into()))?;
            if !index.contains_key(&id) {
                return Err(corrupt(format!("answer for unissued pair `{id}`")));
            }
            // first answer wins, as at submission time
            answers.entry(id).or_insert(rec);
        }
        Ok(AnnotationQueue {
            entries,
            index,
            answers,
            queue_file: open_append(&queue_path)?,
            answer_file: open_append(&answer_path)?,
        })
    }

    /// Issues a round's queries. Re-issuing an identical round is a no-op.
    pub fn issue(&mut self, round: &PendingRound) -> Result<()> {
        let existing: Vec<&QueueEntry> = self.entries.iter().filter(|e| e.round == round.round).collect();
        if !existing.is_empty() {
            let same = existing.len() == round.queries.len()
                && existing.iter().zip(&round.queries).all(|(e, q)| e.i == q.i && e.j == q.j);
            return if same { Ok(()) } else { Err(ServiceError::QueueConflict(round.round)) };
        }
        for (k, q) in round.queries.iter().enumerate() {
            let entry = QueueEntry { pair_id: pair_id(round.round, k), round: round.round, i: q.i.clone(), j: q.j.clone() };
            append_line(&mut self.queue_file, &entry)?;
            self.index.insert(entry.pair_id.clone(), self.entries.len());
            self.entries.push(entry);
        }
        Ok(())
    }

    pub fn entry(&self, pair_id: &str) -> Option<&QueueEntry> {
        self.index.get(pair_id).map(|&k| &self.entries[k])
    }

    pub fn is_answered(&self, pair_id: &str) -> bool {
        self.answers.contains_key(pair_id)
    }

    /// Up to `limit` unanswered pairs ordered by `(round, pair_id)`.
    pub fn next_pending(&self, limit: usize) -> Vec<&QueueEntry> {
        let mut pending: Vec<&QueueEntry> = self.entries.iter().filter(|e| !self.answers.contains_key(&e.pair_id)).collect();
        pending.sort_by(|a, b| (a.round, &a.pair_id).cmp(&(b.round, &b.pair_id)));
        pending.truncate(limit);
        pending
    }

    pub fn submit(&mut self, pair_id: &str, label: f64, annotator: Option<String>) -> Result<AnnotationRecord> {
        let entry = self.entry(pair_id).ok_or_else(|| ServiceError::UnknownPair(pair_id.to_string()))?.clone();
        if self.answers.contains_key(pair_id) {
            return Err(ServiceError::AlreadyAnswered(pair_id.to_string()));
        }
        let label = RelativeLabel::from_value(label).map_err(|_| ServiceError::InvalidLabel(label))?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let rec = AnnotationRecord {
            i: entry.i,
            j: entry.j,
            label,
            round: entry.round,
            source: AnnotationSource::Human,
            timestamp: Some(timestamp),
            pair_id: Some(pair_id.to_string()),
            annotator,
        };
        append_line(&mut self.answer_file, &rec)?;
        self.answers.insert(pair_id.to_string(), rec.clone());
        Ok(rec)
    }

    /// `(issued, answered)` counts for one round.
    pub fn round_counts(&self, round: usize) -> (usize, usize) {
        let issued: Vec<&QueueEntry> = self.entries.iter().filter(|e| e.round == round).collect();
        let answered = issued.iter().filter(|e| self.answers.contains_key(&e.pair_id)).count();
        (issued.len(), answered)
    }

    /// All answers of a round in issue order, if every pair is answered.
    pub fn completed_round(&self, round: usize) -> Option<Vec<AnnotationRecord>> {
        let issued: Vec<&QueueEntry> = self.entries.iter().filter(|e| e.round == round).collect();
        issued.iter().map(|e| self.answers.get(&e.pair_id).cloned()).collect()
    }
}

/// Oracle backed by the annotation queue: issues the round and defers until
/// every issued pair has an answer.
pub struct HumanOracle<'a> {
    pub queue: &'a mut AnnotationQueue,
}

impl Oracle for HumanOracle<'_> {
    fn annotate(&mut self, round: &PendingRound) -> std::result::Result<Vec<AnnotationRecord>, OracleError> {
        self.queue.issue(round).map_err(|e| OracleError::Failed(e.to_string()))?;
        match self.queue.completed_round(round.round) {
            Some(records) if !records.is_empty() => Ok(records),
            _ => Err(OracleError::Deferred),
        }
    }
}

/// Where a session's samples come from, so a restarted server can rebuild them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub manifest: PathBuf,
    pub fold: usize,
    pub split: SplitSpec,
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<LoopData> {
        let err = |e: String| ServiceError::Session(format!("{}: {e}", self.manifest.display()));
        let manifest = load_manifest(&self.manifest).map_err(|e| err(e.to_string()))?;
        let folds = group_kfold_split(&manifest, &self.split).map_err(|e| err(e.to_string()))?;
        let fold = folds
            .get(self.fold)
            .ok_or_else(|| err(format!("fold {} out of range ({} folds)", self.fold, folds.len())))?;
        Ok(LoopData::new(Dataset::from_manifest(&manifest), fold.train.clone(), &fold.val, seed)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    format: String,
    source: Option<DataSource>,
    #[serde(rename = "loop")]
    active: ActiveLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub round: usize,
    pub pending: usize,
    pub answered: usize,
    pub issued: usize,
    pub labeling_ratio: f64,
    pub done: bool,
    pub can_advance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePreview {
    pub id: String,
    pub features: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Pending,
    Answered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingPair {
    pub pair_id: String,
    pub round: usize,
    pub status: PairStatus,
    pub left: SamplePreview,
    pub right: SamplePreview,
}

pub struct Session {
    dir: PathBuf,
    source: Option<DataSource>,
    data: LoopData,
    images: HashMap<String, String>,
    active: ActiveLoop,
    queue: AnnotationQueue,
}

impl Session {
    /// Starts a new session and issues the initial round.
    pub fn create(
        dir: &Path,
        source: Option<DataSource>,
        data: LoopData,
        network: NetworkConfig,
        config: LoopConfig,
    ) -> Result<Self> {
        if dir.join("session.json").exists() {
            return Err(ServiceError::Session(format!("{} already holds a session", dir.display())));
        }
        fs::create_dir_all(dir)?;
        let active = ActiveLoop::new(&data, network, config)?;
        let queue = AnnotationQueue::open(dir)?;
        let mut s = Session { dir: dir.to_path_buf(), source, data, images: HashMap::new(), active, queue };
        s.run_until_barrier()?;
        Ok(s)
    }

    /// Reopens a session, replaying the queue and answer logs.
    pub fn resume(dir: &Path, data: Option<LoopData>) -> Result<Self> {
        let path = dir.join("session.json");
        let text = fs::read_to_string(&path).map_err(|e| ServiceError::Session(format!("{}: {e}", path.display())))?;
        let file: SessionFile =
            serde_json::from_str(&text).map_err(|e| ServiceError::Session(format!("{}: {e}", path.display())))?;
        if file.format != SESSION_FORMAT {
            return Err(ServiceError::Session(format!("unsupported session format `{}`", file.format)));
        }
        let data = match (data, &file.source) {
            (Some(d), _) => d,
            (None, Some(src)) => src.load(file.active.config.seed)?,
            (None, None) => return Err(ServiceError::Session("session has no recorded data source".into())),
        };
        let mut queue = AnnotationQueue::open(dir)?;
        if let Some(p) = file.active.pending() {
            queue.issue(p)?;
        }
        Ok(Session { dir: dir.to_path_buf(), source: file.source, data, images: HashMap::new(), active: file.active, queue })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join("session.json").exists()
    }

    /// Image paths shown in pair previews.
    pub fn set_images(&mut self, images: HashMap<String, String>) {
        self.images = images;
    }

    pub fn active(&self) -> &ActiveLoop {
        &self.active
    }

    pub fn queue(&self) -> &AnnotationQueue {
        &self.queue
    }

    fn save(&self) -> Result<()> {
        let file = SessionFile { format: SESSION_FORMAT.into(), source: self.source.clone(), active: self.active.clone() };
        let tmp = self.dir.join("session.json.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(serde_json::to_string(&file).expect("session serializes").as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join("session.json"))?;
        Ok(())
    }

    fn run_until_barrier(&mut self) -> Result<Drive> {
        let ckpt_dir = self.dir.join("checkpoints");
        let mut oracle = HumanOracle { queue: &mut self.queue };
        let drive = self.active.drive(&self.data, &mut oracle, |cp| write_checkpoint(&ckpt_dir, cp).map(|_| ()))?;
        self.save()?;
        Ok(drive)
    }

    pub fn status(&self) -> Status {
        let round = self.active.round();
        let (issued, answered) = self.queue.round_counts(round);
        let done = self.active.is_done();
        let pending = issued - answered;
        Status {
            round,
            pending,
            answered,
            issued,
            labeling_ratio: self.active.state.labeling_ratio(),
            done,
            can_advance: !done && pending == 0,
        }
    }

    fn preview(&self, id: &str) -> SamplePreview {
        SamplePreview {
            id: id.to_string(),
            features: self.data.dataset.features_of(id).map(<[f64]>::to_vec).unwrap_or_default(),
            image: self.images.get(id).cloned(),
        }
    }

    pub fn next_pending(&self, limit: usize) -> Vec<PendingPair> {
        self.queue
            .next_pending(limit)
            .into_iter()
            .map(|e| PendingPair {
                pair_id: e.pair_id.clone(),
                round: e.round,
                status: PairStatus::Pending,
                left: self.preview(&e.i),
                right: self.preview(&e.j),
            })
            .collect()
    }

    pub fn submit(&mut self, pair_id: &str, label: f64, annotator: Option<String>) -> Result<AnnotationRecord> {
        self.queue.submit(pair_id, label, annotator)
    }

    /// Feeds the drained round to the loop, trains, and issues the next round.
    pub fn advance(&mut self) -> Result<Status> {
        let st = self.status();
        if st.done {
            return Err(ServiceError::Finished);
        }
        if st.pending > 0 {
            return Err(ServiceError::NotDrained { round: st.round, pending: st.pending });
        }
        self.run_until_barrier()?;
        Ok(self.status())
    }
}

#[derive(Clone)]
pub struct AppState {
    pub session: Arc<Mutex<Session>>,
    pub token: Option<String>,
}

#[derive(Deserialize)]
struct PairsQuery {
    limit: Option<usize>,
}

#[derive(Deserialize)]
struct LabelBody {
    label: f64,
    annotator: Option<String>,
}

#[derive(Serialize)]
struct PairsBody {
    pairs: Vec<PendingPair>,
}

#[derive(Serialize)]
struct Ack {
    pair_id: String,
    label: RelativeLabel,
    status: PairStatus,
}

fn authorize(state: &AppState, headers: &HeaderMap) -> std::result::Result<(), Response> {
    match &state.token {
        Some(t) if headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) != Some(t.as_str()) => Err((
            StatusCode::UNAUTHORIZED,
            Json(ErrorBody { error: "unauthorized", message: format!("missing or wrong {TOKEN_HEADER} header") }),
        )
            .into_response()),
        _ => Ok(()),
    }
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Session> {
    state.session.lock().unwrap_or_else(|p| p.into_inner())
}

async fn get_pairs(State(state): State<AppState>, headers: HeaderMap, Query(q): Query<PairsQuery>) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    let pairs = lock(&state).next_pending(q.limit.unwrap_or(10));
    Json(PairsBody { pairs }).into_response()
}

async fn post_label(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<LabelBody>,
) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    let result = lock(&state).submit(&id, body.label, body.annotator);
    match result {
        Ok(rec) => Json(Ack { pair_id: id, label: rec.label, status: PairStatus::Answered }).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_status(State(state): State<AppState>, headers: HeaderMap) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    Json(lock(&state).status()).into_response()
}

async fn post_advance(State(state): State<AppState>, headers: HeaderMap) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    let session = state.session.clone();
    let result = tokio::task::spawn_blocking(move || session.lock().unwrap_or_else(|p| p.into_inner()).advance()).await;
    match result {
        Ok(Ok(status)) => Json(status).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServiceError::Session(format!("advance task failed: {e}")).into_response(),
    }
}

/// The HTTP API, optionally serving a static client bundle for other paths.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/pairs", get(get_pairs))
        .route("/pairs/{id}/label", post(post_label))
        .route("/status", get(get_status))
        .route("/rounds/advance", post(post_advance))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn bind(addr: &str) -> io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

pub fn local_addr(listener: &tokio::net::TcpListener) -> io::Result<SocketAddr> {
    listener.local_addr()
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

impl Session {
    /// Phase name for diagnostics.
    pub fn phase_name(&self) -> &'static str {
        match self.active.phase {
            Phase::AwaitingLabels { .. } => "awaiting_labels",
            Phase::ReadyToTrain => "ready_to_train",
            Phase::Done => "done",
        }
    }
}
