//! HTTP API for interactive diagnosis.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/v1/sessions` | [`CreateSession`] | 201, [`SessionView`] |
//! | GET | `/v1/sessions/{id}` | | [`SessionView`] |
//! | POST | `/v1/sessions/{id}/answer` | [`Answer`] | [`SessionView`] |
//! | GET | `/v1/vocab` | | [`VocabView`] |
//! | GET | `/v1/healthz` | | `{"status": "ok"}` |
//!
//! Failures carry `{code, message}`: 400 `bad_request` for unparsable
//! bodies, 404 `unknown_session`, 409 `session_finished` or `no_pending_inquiry`,
//! 410 `session_expired`, 422 `unknown_symptom`, `invalid_status` or
//! `invalid_session`, and 500 `internal`.

mod store;

use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coad_core::corpus::{Finding, SymptomStatus, Vocab};
use coad_core::dialogue::{DialogueConfig, DialogueSession, Inquiry, SessionState, StopMode};
use coad_core::model::CoadModel;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use store::{Lookup, SessionStore, Slot};

pub const DEFAULT_IDLE: Duration = Duration::from_secs(30 * 60);

pub struct AppState {
    pub model: CoadModel<f32>,
    pub vocab: Vocab,
    pub store: SessionStore,
}

impl AppState {
    pub fn new(model: CoadModel<f32>, vocab: Vocab, idle: Duration) -> Self {
        Self {
            model,
            vocab,
            store: SessionStore::new(idle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl From<Lookup> for ApiError {
    fn from(l: Lookup) -> Self {
        match l {
            Lookup::Unknown => {
                Self::new(StatusCode::NOT_FOUND, "unknown_session", "no such session")
            }
            Lookup::Expired => Self::new(
                StatusCode::GONE,
                "session_expired",
                "the session expired after inactivity",
            ),
        }
    }
}

fn internal(e: coad_core::CoadError) -> ApiError {
    log::error!("{e}");
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedSymptom {
    pub symptom: String,
    pub status: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub explicit: Vec<ReportedSymptom>,
    #[serde(default)]
    pub mode: StopMode,
    #[serde(default = "default_turns")]
    pub max_turns: usize,
}

fn default_turns() -> usize {
    DialogueConfig::default().max_turns
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Answer {
    /// 1 yes, 2 no, 0 unsure.
    pub status: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub symptom: String,
    pub status: u8,
    pub explicit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDisease {
    pub disease: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisView {
    pub disease: String,
    /// Every disease, most probable first.
    pub ranking: Vec<RankedDisease>,
    /// Indexed like `diseases` in [`VocabView`].
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inquiring,
    Diagnosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: Uuid,
    pub state: Phase,
    pub mode: StopMode,
    pub max_turns: usize,
    pub turns: usize,
    pub transcript: Vec<TranscriptEntry>,
    /// The symptom awaiting an answer.
    pub inquiry: Option<String>,
    pub diagnosis: Option<DiagnosisView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabView {
    pub symptoms: Vec<String>,
    pub diseases: Vec<String>,
}

fn status_from(code: u8) -> Result<SymptomStatus, ApiError> {
    SymptomStatus::from_code(code).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_status",
            format!("status {code} is not 0 (unsure), 1 (yes) or 2 (no)"),
        )
    })
}

/// Asks the model for its next move unless an answer is outstanding or
/// the session is over.
fn advance(slot: &mut Slot, model: &CoadModel<f32>) -> Result<(), ApiError> {
    if slot.diagnosis.is_none()
        && slot.session.state() == SessionState::Ready
        && slot.session.next_inquiry(model).map_err(internal)? == Inquiry::End
    {
        slot.diagnosis = Some(slot.session.diagnose(model).map_err(internal)?);
    }
    Ok(())
}

fn view(id: Uuid, slot: &Slot, vocab: &Vocab) -> SessionView {
    let s = &slot.session;
    let n_explicit = s.explicit().len();
    let transcript = s
        .transcript()
        .iter()
        .enumerate()
        .map(|(i, f)| TranscriptEntry {
            symptom: vocab.symptom_name(f.symptom).to_string(),
            status: f.status.code(),
            explicit: i < n_explicit,
        })
        .collect();
    let inquiry = match s.state() {
        SessionState::Pending(sym) => Some(vocab.symptom_name(sym).to_string()),
        _ => None,
    };
    let diagnosis = slot.diagnosis.as_ref().map(|d| DiagnosisView {
        disease: vocab.disease_name(d.disease).to_string(),
        ranking: d
            .top(d.probabilities.len())
            .into_iter()
            .map(|(id, p)| RankedDisease {
                disease: vocab.disease_name(id).to_string(),
                probability: p,
            })
            .collect(),
        probabilities: d.probabilities.clone(),
    });
    SessionView {
        id,
        state: if diagnosis.is_some() {
            Phase::Diagnosed
        } else {
            Phase::Inquiring
        },
        mode: s.config().mode,
        max_turns: s.config().max_turns,
        turns: s.turns(),
        transcript,
        inquiry,
        diagnosis,
    }
}

async fn create(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    let mut explicit = Vec::with_capacity(req.explicit.len());
    for r in &req.explicit {
        let id = app.vocab.symptom_id(&r.symptom).ok_or_else(|| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unknown_symptom",
                format!("unknown symptom {:?}", r.symptom),
            )
        })?;
        explicit.push(Finding::new(id, status_from(r.status)?));
    }
    let max_len = app.model.config().max_len;
    if explicit.len() + req.max_turns > max_len {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_session",
            format!(
                "{} symptoms plus {} turns exceed the model's {max_len} positions",
                explicit.len(),
                req.max_turns
            ),
        ));
    }
    let config = DialogueConfig {
        max_turns: req.max_turns,
        mode: req.mode,
    };
    let session = DialogueSession::new(explicit, config).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_session",
            e.to_string(),
        )
    })?;
    let id = app.store.insert(session, None);
    let v = app.store.with(id, |slot| {
        advance(slot, &app.model)?;
        Ok::<_, ApiError>(view(id, slot, &app.vocab))
    })??;
    Ok((StatusCode::CREATED, Json(v)))
}

fn parse_id(raw: &str) -> Result<Uuid, ApiError> {
    Uuid::parse_str(raw).map_err(|_| ApiError::from(Lookup::Unknown))
}

async fn show(
    State(app): State<Arc<AppState>>,
    Path(raw): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let id = parse_id(&raw)?;
    let v = app.store.with(id, |slot| view(id, slot, &app.vocab))?;
    Ok(Json(v))
}

async fn answer(
    State(app): State<Arc<AppState>>,
    Path(raw): Path<String>,
    body: Result<Json<Answer>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let id = parse_id(&raw)?;
    let Json(req) = body?;
    let status = status_from(req.status)?;
    let v = app.store.with(id, |slot| {
        if slot.diagnosis.is_some() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "session_finished",
                "the session already ended with a diagnosis",
            ));
        }
        if !matches!(slot.session.state(), SessionState::Pending(_)) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "no_pending_inquiry",
                "there is no inquiry to answer",
            ));
        }
        slot.session.answer(status).map_err(internal)?;
        advance(slot, &app.model)?;
        Ok(view(id, slot, &app.vocab))
    })??;
    Ok(Json(v))
}

async fn vocab(State(app): State<Arc<AppState>>) -> Json<VocabView> {
    Json(VocabView {
        symptoms: app.vocab.symptoms().to_vec(),
        diseases: app.vocab.diseases().to_vec(),
    })
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(show))
        .route("/v1/sessions/{id}/answer", post(answer))
        .route("/v1/vocab", get(vocab))
        .route("/v1/healthz", get(healthz))
        .with_state(state)
}

/// Serves until the listener fails, sweeping idle sessions in the
/// background.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let sweeper = state.clone();
    let period = (sweeper.store.idle() / 4).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.store.purge_expired();
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state)).await
}
