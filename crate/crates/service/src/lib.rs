//! HTTP service for crowd annotation: hands out images, records verdicts in
//! an append-only log and reports consensus.
//!
//! Routes:
//! - `GET /api/next?annotator=ID`
//! - `POST /api/annotate` with `{image_id, annotator, verdict}`
//! - `GET /api/consensus`
//! - `GET /api/stats`
//! - `GET /img/<path>` serves files under the manifest directory

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use safer_core::curation::{
    consensus, AnnotationRecord, AnnotationStore, ConsensusResult, ConsensusRule, Decision, Verdict,
};
use safer_core::DatasetManifest;

/// Annotators per image before its consensus is final.
pub const DEFAULT_PANEL_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct ServiceConfig {
    pub panel_size: usize,
    pub rule: ConsensusRule,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            panel_size: DEFAULT_PANEL_SIZE,
            rule: ConsensusRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub image_id: Option<String>,
    pub image_url: Option<String>,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub image_id: String,
    pub annotator: String,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub image_id: String,
    pub annotators: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub images: usize,
    pub complete: usize,
    /// Images judged per annotator.
    pub annotators: BTreeMap<String, usize>,
    /// Kept images per label among complete images.
    pub kept: BTreeMap<String, usize>,
    pub rejected_no_consensus: usize,
    pub rejected_irrelevant: usize,
}

#[derive(Debug)]
pub enum ServiceError {
    BadRequest(String),
    UnknownImage(String),
    Store(String),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, kind, message) = match self {
            ServiceError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ServiceError::UnknownImage(id) => (StatusCode::NOT_FOUND, "unknown_image", format!("unknown image `{id}`")),
            ServiceError::Store(m) => (StatusCode::INTERNAL_SERVER_ERROR, "store_failure", m),
        };
        (status, Json(serde_json::json!({ "error": kind, "message": message }))).into_response()
    }
}

/// Service state: the manifest, the log, and a per-image view of the
/// latest verdicts.
pub struct Annotations {
    manifest: DatasetManifest,
    store: AnnotationStore,
    config: ServiceConfig,
    position: HashMap<String, usize>,
    /// Latest verdict per annotator, per manifest index.
    verdicts: Vec<BTreeMap<String, Verdict>>,
}

impl Annotations {
    pub fn new(manifest: DatasetManifest, store: AnnotationStore, config: ServiceConfig) -> safer_core::Result<Self> {
        if config.panel_size == 0 {
            return Err(safer_core::Error::Config("panel size must be positive".into()));
        }
        let position: HashMap<String, usize> =
            manifest.records().iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        let mut verdicts = vec![BTreeMap::new(); manifest.records().len()];
        for r in store.records() {
            match position.get(&r.image_id) {
                Some(&i) => {
                    verdicts[i].insert(r.annotator_id.clone(), r.verdict);
                }
                None => log::warn!("log entry for `{}` is not in the manifest", r.image_id),
            }
        }
        Ok(Annotations {
            manifest,
            store,
            config,
            position,
            verdicts,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    fn complete(&self, i: usize) -> bool {
        self.verdicts[i].len() >= self.config.panel_size
    }

    /// Lowest-index image this annotator has not judged and that is not complete.
    pub fn next_for(&self, annotator: &str) -> NextItem {
        let done = self.verdicts.iter().filter(|v| v.contains_key(annotator)).count();
        let next = (0..self.verdicts.len()).find(|&i| !self.complete(i) && !self.verdicts[i].contains_key(annotator));
        let rec = next.map(|i| &self.manifest.records()[i]);
        NextItem {
            image_id: rec.map(|r| r.id.clone()),
            image_url: rec.map(|r| format!("/img/{}", r.image_path.to_string_lossy().replace('\\', "/"))),
            progress: Progress {
                done,
                total: self.verdicts.len(),
            },
        }
    }

    pub fn submit(&mut self, s: &Submission) -> Result<SubmissionAck, ServiceError> {
        if s.annotator.trim().is_empty() {
            return Err(ServiceError::BadRequest("annotator id is empty".into()));
        }
        let verdict: Verdict = s.verdict.parse().map_err(|e: safer_core::Error| ServiceError::BadRequest(e.to_string()))?;
        let &i = self
            .position
            .get(&s.image_id)
            .ok_or_else(|| ServiceError::UnknownImage(s.image_id.clone()))?;
        self.store
            .append(AnnotationRecord::now(&s.image_id, &s.annotator, verdict))
            .map_err(|e| ServiceError::Store(e.to_string()))?;
        self.verdicts[i].insert(s.annotator.clone(), verdict);
        Ok(SubmissionAck {
            image_id: s.image_id.clone(),
            annotators: self.verdicts[i].len(),
            complete: self.complete(i),
        })
    }

    /// Consensus for every annotated image, in manifest order.
    pub fn consensus(&self) -> Vec<ConsensusResult> {
        let mut by_image: HashMap<&str, Vec<AnnotationRecord>> = HashMap::new();
        for r in self.store.records() {
            by_image.entry(r.image_id.as_str()).or_default().push(r.clone());
        }
        self.manifest
            .records()
            .iter()
            .filter_map(|rec| by_image.get(rec.id.as_str()))
            .map(|recs| consensus(&recs[0].image_id, recs, self.config.rule).expect("non-empty group"))
            .collect()
    }

    pub fn stats(&self) -> Stats {
        let mut annotators: BTreeMap<String, usize> = BTreeMap::new();
        for v in &self.verdicts {
            for a in v.keys() {
                *annotators.entry(a.clone()).or_insert(0) += 1;
            }
        }
        let mut stats = Stats {
            images: self.verdicts.len(),
            complete: 0,
            annotators,
            kept: BTreeMap::new(),
            rejected_no_consensus: 0,
            rejected_irrelevant: 0,
        };
        for (i, v) in self.verdicts.iter().enumerate() {
            if !self.complete(i) {
                continue;
            }
            stats.complete += 1;
            let votes: Vec<Verdict> = v.values().copied().collect();
            match self.config.rule.decide(&votes) {
                Decision::Keep(l) => *stats.kept.entry(l.to_string()).or_insert(0) += 1,
                Decision::RejectNoConsensus => stats.rejected_no_consensus += 1,
                Decision::RejectIrrelevant => stats.rejected_irrelevant += 1,
            }
        }
        stats
    }
}

pub type SharedState = Arc<Mutex<Annotations>>;

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_handler(State(state): State<SharedState>, Query(q): Query<NextQuery>) -> Result<Json<NextItem>, ServiceError> {
    let annotator = q
        .annotator
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ServiceError::BadRequest("missing `annotator` query parameter".into()))?;
    Ok(Json(state.lock().unwrap().next_for(&annotator)))
}

async fn annotate_handler(
    State(state): State<SharedState>,
    Json(body): Json<Submission>,
) -> Result<Json<SubmissionAck>, ServiceError> {
    let st = state.clone();
    tokio::task::spawn_blocking(move || st.lock().unwrap().submit(&body))
        .await
        .map_err(|e| ServiceError::Store(e.to_string()))?
        .map(Json)
}

async fn consensus_handler(State(state): State<SharedState>) -> Json<Vec<ConsensusResult>> {
    Json(state.lock().unwrap().consensus())
}

async fn stats_handler(State(state): State<SharedState>) -> Json<Stats> {
    Json(state.lock().unwrap().stats())
}

pub fn router(state: SharedState) -> Router {
    let images: PathBuf = state.lock().unwrap().manifest.base_dir().to_path_buf();
    Router::new()
        .route("/api/next", get(next_handler))
        .route("/api/annotate", post(annotate_handler))
        .route("/api/consensus", get(consensus_handler))
        .route("/api/stats", get(stats_handler))
        .nest_service("/img", ServeDir::new(images))
        .with_state(state)
}

/// A bound server; `addr` is known before serving starts.
pub struct Server {
    listener: tokio::net::TcpListener,
    state: SharedState,
}

impl Server {
    pub async fn bind(addr: SocketAddr, annotations: Annotations) -> std::io::Result<Self> {
        Ok(Server {
            listener: tokio::net::TcpListener::bind(addr).await?,
            state: Arc::new(Mutex::new(annotations)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> SharedState {
        self.state.clone()
    }

    pub async fn run(self) -> std::io::Result<()> {
        axum::serve(self.listener, router(self.state)).await
    }

    pub async fn run_until(self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        axum::serve(self.listener, router(self.state))
            .with_graceful_shutdown(shutdown)
            .await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use safer_core::SampleRecord;

    fn service(dir: &std::path::Path, n: usize, panel: usize) -> Annotations {
        let recs = (0..n).map(|i| SampleRecord::new(format!("img{i}"), format!("img{i}.png"))).collect();
        let m = DatasetManifest::new("pool", recs).unwrap().with_base_dir(dir);
        let store = AnnotationStore::open(dir.join("log.jsonl")).unwrap();
        Annotations::new(
            m,
            store,
            ServiceConfig {
                panel_size: panel,
                ..ServiceConfig::default()
            },
        )
        .unwrap()
    }

    fn sub(id: &str, who: &str, v: &str) -> Submission {
        Submission {
            image_id: id.into(),
            annotator: who.into(),
            verdict: v.into(),
        }
    }

    #[test]
    fn fresh_annotator_gets_first_image() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), 3, 2);
        let n = s.next_for("a1");
        assert_eq!(n.image_id.as_deref(), Some("img0"));
        assert_eq!(n.image_url.as_deref(), Some("/img/img0.png"));
        assert_eq!(n.progress, Progress { done: 0, total: 3 });
    }

    #[test]
    fn assignment_skips_judged_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = service(dir.path(), 3, 2);
        s.submit(&sub("img0", "a1", "Happiness")).unwrap();
        assert_eq!(s.next_for("a1").image_id.as_deref(), Some("img1"));
        assert_eq!(s.next_for("a2").image_id.as_deref(), Some("img0"));
        let ack = s.submit(&sub("img0", "a2", "Happiness")).unwrap();
        assert!(ack.complete);
        assert_eq!(s.next_for("a3").image_id.as_deref(), Some("img1"));
    }

    #[test]
    fn duplicate_submission_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = service(dir.path(), 1, 8);
        s.submit(&sub("img0", "a1", "Happiness")).unwrap();
        let ack = s.submit(&sub("img0", "a1", "Sadness")).unwrap();
        assert_eq!(ack.annotators, 1);
        let c = s.consensus();
        assert_eq!(c[0].vote_histogram.values().sum::<usize>(), 1);
        assert_eq!(c[0].vote_histogram.get("Sadness"), Some(&1));
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = service(dir.path(), 1, 8);
        assert!(matches!(s.submit(&sub("nope", "a1", "Fear")), Err(ServiceError::UnknownImage(_))));
        assert!(matches!(s.submit(&sub("img0", "a1", "bored")), Err(ServiceError::BadRequest(_))));
        assert!(matches!(s.submit(&sub("img0", " ", "Fear")), Err(ServiceError::BadRequest(_))));
        assert!(s.store().records().is_empty());
    }
}
