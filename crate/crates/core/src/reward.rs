//! Classifier verdicts as a binary reward, with an optional length penalty,
//! served over HTTP.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::classifier::{
    ClassifierConfig, ClassifierContext, ClassifierRegistry, ClassifyError, Mode, TraceClassifier,
};
use crate::digest;
use crate::gateway::Gateway;
use crate::model::{AppliedItem, Label, Rubric, TraceRecord};

pub const DEFAULT_PENALTY_THRESHOLD: f64 = 200.0;

/// `max(0, (threshold - xi) / threshold)`.
pub fn length_penalty(xi: f64, threshold: f64) -> f64 {
    ((threshold - xi) / threshold).max(0.0)
}

/// Length of a response in whitespace-separated tokens.
pub fn response_length(response: &str) -> usize {
    response.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    /// Every reward is penalized.
    #[default]
    All,
    /// Only rewards for traces judged correct are penalized.
    CorrectOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// `rubric` or `baseline-0`.
    pub mode: Mode,
    pub penalty: bool,
    pub penalty_threshold: f64,
    pub penalty_scope: PenaltyScope,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            mode: Mode::Rubric,
            penalty: false,
            penalty_threshold: DEFAULT_PENALTY_THRESHOLD,
            penalty_scope: PenaltyScope::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub question: String,
    pub response: String,
    /// Reasoning to classify; defaults to the response.
    #[serde(default)]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardResponse {
    pub base_reward: u8,
    pub penalty: f64,
    pub reward: f64,
    pub predicted_correct: bool,
    pub tagged_keywords: BTreeSet<String>,
    pub applied_items: Vec<AppliedItem>,
    pub timing_ms: u64,
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("classification failed: {0}")]
    Classification(#[from] ClassifyError),
}

impl RewardError {
    pub fn status(&self) -> StatusCode {
        match self {
            RewardError::BadRequest(_) => StatusCode::BAD_REQUEST,
            RewardError::Classification(_) => StatusCode::BAD_GATEWAY,
        }
    }
}

impl IntoResponse for RewardError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// Scores requests against one immutable rubric and configuration.
pub struct RewardScorer {
    gateway: Arc<Gateway>,
    rubric: Arc<Rubric>,
    classifier: Box<dyn TraceClassifier>,
    config: RewardConfig,
}

impl RewardScorer {
    /// Compression is always off when scoring.
    pub fn new(
        gateway: Arc<Gateway>,
        rubric: Arc<Rubric>,
        config: RewardConfig,
        exemplars: Arc<BTreeMap<String, String>>,
    ) -> Result<RewardScorer, ClassifyError> {
        if !(config.penalty_threshold > 0.0) {
            return Err(ClassifyError::Config(
                "penalty threshold must be positive".to_string(),
            ));
        }
        let classifier_config = ClassifierConfig {
            mode: config.mode,
            compress_at_inference: false,
            ..ClassifierConfig::default()
        };
        let ctx = ClassifierContext {
            rubric: Some(rubric.clone()),
            exemplars,
        };
        let classifier = ClassifierRegistry::with_builtins().build(&classifier_config, &ctx)?;
        Ok(RewardScorer {
            gateway,
            rubric,
            classifier,
            config,
        })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    pub fn rubric(&self) -> &Rubric {
        &self.rubric
    }

    pub async fn score(&self, request: &RewardRequest) -> Result<RewardResponse, RewardError> {
        if request.question.trim().is_empty() {
            return Err(RewardError::BadRequest("question is empty".into()));
        }
        if request.response.trim().is_empty() {
            return Err(RewardError::BadRequest("response is empty".into()));
        }
        let started = Instant::now();
        let trace = request.trace.clone().unwrap_or_else(|| request.response.clone());
        let id = format!(
            "req-{}",
            &digest::sha256_hex(format!("{}\u{0}{trace}", request.question).as_bytes())[..12]
        );
        let record = TraceRecord {
            id,
            question: request.question.clone(),
            solution: None,
            trace,
            final_answer: None,
            label: None,
            domain: self.rubric.domain.clone(),
        };
        let classification = self.classifier.classify(&self.gateway, &record).await?;
        let predicted_correct = classification.predicted == Label::Correct;
        let base_reward = classification.predicted.bit();
        let penalized = self.config.penalty
            && (self.config.penalty_scope == PenaltyScope::All || predicted_correct);
        let penalty = if penalized {
            length_penalty(
                response_length(&request.response) as f64,
                self.config.penalty_threshold,
            )
        } else {
            0.0
        };
        Ok(RewardResponse {
            base_reward,
            penalty,
            reward: (f64::from(base_reward) - penalty).clamp(-1.0, 1.0),
            predicted_correct,
            tagged_keywords: classification.tagged_keywords,
            applied_items: classification.applied_items,
            timing_ms: started.elapsed().as_millis() as u64,
        })
    }
}

async fn score_handler(
    State(scorer): State<Arc<RewardScorer>>,
    body: Result<Json<RewardRequest>, JsonRejection>,
) -> Result<Json<RewardResponse>, RewardError> {
    let Json(request) = body.map_err(|e| RewardError::BadRequest(e.body_text()))?;
    match scorer.score(&request).await {
        Ok(response) => {
            tracing::info!(
                reward = response.reward,
                base = response.base_reward,
                ms = response.timing_ms,
                "scored request"
            );
            Ok(Json(response))
        }
        Err(e) => {
            tracing::warn!(error = %e, "scoring failed");
            Err(e)
        }
    }
}

async fn health(State(scorer): State<Arc<RewardScorer>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "rubric_items": scorer.rubric().len() }))
}

async fn rubric_meta(State(scorer): State<Arc<RewardScorer>>) -> Json<serde_json::Value> {
    let rubric = scorer.rubric();
    Json(json!({
        "domain": rubric.domain,
        "items": rubric.len(),
        "keywords": rubric.keyword_index.len(),
        "digest": rubric.digest(),
        "mode": scorer.config().mode,
        "penalty": scorer.config().penalty,
        "penalty_threshold": scorer.config().penalty_threshold,
    }))
}

pub fn router(scorer: Arc<RewardScorer>) -> Router {
    Router::new()
        .route("/v1/score", post(score_handler))
        .route("/v1/health", get(health))
        .route("/v1/rubric/meta", get(rubric_meta))
        .with_state(scorer)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    scorer: Arc<RewardScorer>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(scorer))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves on it in a background task. Returns the bound
/// address, a shutdown trigger and the server task.
pub async fn spawn(
    addr: SocketAddr,
    scorer: Arc<RewardScorer>,
) -> std::io::Result<(SocketAddr, tokio::sync::oneshot::Sender<()>, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let task = tokio::spawn(serve(listener, scorer, async {
        let _ = rx.await;
    }));
    Ok((local, tx, task))
}
