use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use coad_core::corpus::{generate_synthetic, Corpus, PatientRecord, SymptomId, SyntheticConfig};
use coad_core::dialogue::{run_episode, DialogueConfig, SimulatedPatient, StopMode};
use coad_core::model::CoadModel;
use coad_core::training::{train_as, TrainConfig};
use coad_service::{router, AppState, SessionView};
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

fn setup(idle: Duration) -> (Corpus, Arc<AppState>) {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_train: 80,
        n_test: 12,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        hidden: 16,
        ff: 32,
        steps: 60,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let model: CoadModel<f32> = train_as::<f32>(&corpus, &cfg, None).unwrap().model;
    let state = Arc::new(AppState::new(model, corpus.vocab.clone(), idle));
    (corpus, state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn create_body(corpus: &Corpus, record: &PatientRecord, cfg: DialogueConfig) -> Value {
    let explicit: Vec<Value> = record
        .explicit
        .iter()
        .map(
            |f| json!({"symptom": corpus.vocab.symptom_name(f.symptom), "status": f.status.code()}),
        )
        .collect();
    json!({"explicit": explicit, "mode": cfg.mode, "max_turns": cfg.max_turns})
}

/// Plays `record` through the API, answering as the simulated patient.
async fn play(
    app: &Router,
    corpus: &Corpus,
    record: &PatientRecord,
    cfg: DialogueConfig,
) -> SessionView {
    let (status, v) = call(
        app,
        "POST",
        "/v1/sessions",
        Some(create_body(corpus, record, cfg)),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    let mut view: SessionView = serde_json::from_value(v).unwrap();
    let patient = SimulatedPatient::new(record);
    while let Some(name) = view.inquiry.clone() {
        let sym = corpus.vocab.symptom_id(&name).unwrap();
        let body = json!({"status": patient.answer(sym).code()});
        let (status, v) = call(
            app,
            "POST",
            &format!("/v1/sessions/{}/answer", view.id),
            Some(body),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        view = serde_json::from_value(v).unwrap();
    }
    view
}

fn assert_matches_library(
    corpus: &Corpus,
    state: &AppState,
    record: &PatientRecord,
    cfg: DialogueConfig,
    view: &SessionView,
) {
    let episode = run_episode(&state.model, record, cfg).unwrap();
    let asked: Vec<(SymptomId, u8)> = view
        .transcript
        .iter()
        .filter(|e| !e.explicit)
        .map(|e| (corpus.vocab.symptom_id(&e.symptom).unwrap(), e.status))
        .collect();
    let want: Vec<(SymptomId, u8)> = episode
        .inquired
        .iter()
        .map(|f| (f.symptom, f.status.code()))
        .collect();
    assert_eq!(asked, want);
    assert_eq!(view.turns, episode.turns());
    let d = view.diagnosis.as_ref().expect("diagnosed");
    assert_eq!(
        d.disease,
        corpus.vocab.disease_name(episode.diagnosis.disease)
    );
    assert_eq!(d.probabilities, episode.diagnosis.probabilities);
}

#[tokio::test]
async fn scripted_sessions_match_the_library_episode() {
    let (corpus, state) = setup(Duration::from_secs(60));
    let app = router(state.clone());
    for mode in [StopMode::Limited, StopMode::Fixed] {
        for record in &corpus.test {
            let cfg = DialogueConfig { max_turns: 6, mode };
            let view = play(&app, &corpus, record, cfg).await;
            assert_matches_library(&corpus, &state, record, cfg, &view);
            let (status, again) =
                call(&app, "GET", &format!("/v1/sessions/{}", view.id), None).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(serde_json::from_value::<SessionView>(again).unwrap(), view);
        }
    }
}

fn shared() -> &'static (Corpus, Arc<AppState>) {
    static SHARED: OnceLock<(Corpus, Arc<AppState>)> = OnceLock::new();
    SHARED.get_or_init(|| setup(Duration::from_secs(600)))
}

/// Drives one session per record, answering in the order given by
/// `schedule` (indices wrap; finished sessions are skipped).
async fn interleave(
    app: &Router,
    corpus: &Corpus,
    records: &[PatientRecord],
    cfg: DialogueConfig,
    schedule: &[usize],
) -> Vec<SessionView> {
    let mut views = Vec::new();
    for r in records {
        let (status, v) = call(
            app,
            "POST",
            "/v1/sessions",
            Some(create_body(corpus, r, cfg)),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
        views.push(serde_json::from_value::<SessionView>(v).unwrap());
    }
    let mut steps = schedule
        .iter()
        .copied()
        .chain(0..)
        .map(|i| i % records.len());
    while views.iter().any(|v| v.inquiry.is_some()) {
        let i = steps.next().unwrap();
        let Some(name) = views[i].inquiry.clone() else {
            continue;
        };
        let sym = corpus.vocab.symptom_id(&name).unwrap();
        let body = json!({"status": SimulatedPatient::new(&records[i]).answer(sym).code()});
        let (status, v) = call(
            app,
            "POST",
            &format!("/v1/sessions/{}/answer", views[i].id),
            Some(body),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        views[i] = serde_json::from_value(v).unwrap();
    }
    views
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn interleaved_sessions_keep_their_own_state(
        picks in proptest::collection::vec(0usize..6, 0..40),
        fixed in any::<bool>(),
    ) {
        let (corpus, state) = shared();
        let app = router(state.clone());
        let cfg = DialogueConfig {
            max_turns: 5,
            mode: if fixed { StopMode::Fixed } else { StopMode::Limited },
        };
        let records = &corpus.test[..6];
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let views = rt.block_on(interleave(&app, corpus, records, cfg, &picks));
        for (view, record) in views.iter().zip(records) {
            assert_matches_library(corpus, state, record, cfg, view);
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_sessions_match_the_library() {
    let (corpus, state) = shared();
    let app = router(state.clone());
    let cfg = DialogueConfig::default();
    let records = &corpus.test[..8];
    let mut tasks = Vec::new();
    for record in records {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            play(&app, corpus, record, cfg).await
        }));
    }
    for (task, record) in tasks.into_iter().zip(records) {
        let view = task.await.unwrap();
        assert_matches_library(corpus, state, record, cfg, &view);
    }
}

#[tokio::test]
async fn errors_carry_codes() {
    let (corpus, state) = setup(Duration::from_secs(60));
    let app = router(state);
    let sym = corpus.vocab.symptom_name(SymptomId(0)).to_string();
    let code = |v: &Value| v["code"].as_str().unwrap_or_default().to_string();

    let (s, v) = call(
        &app,
        "POST",
        "/v1/sessions",
        Some(json!({"explicit": [{"symptom": "hiccups?", "status": 1}]})),
    )
    .await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, "unknown_symptom")
    );
    let (s, v) = call(
        &app,
        "POST",
        "/v1/sessions",
        Some(json!({"explicit": [{"symptom": sym, "status": 7}]})),
    )
    .await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_status")
    );
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(json!({"explicit": []}))).await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_session")
    );
    let (s, v) = call(
        &app,
        "POST",
        "/v1/sessions",
        Some(json!({"explicit": [{"symptom": sym, "status": 1}], "max_turns": 100_000})),
    )
    .await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_session")
    );
    let (s, v) = call(
        &app,
        "POST",
        "/v1/sessions",
        Some(json!({"explicit": "no"})),
    )
    .await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::BAD_REQUEST, "bad_request")
    );

    let missing = uuid::Uuid::nil();
    let (s, v) = call(
        &app,
        "POST",
        &format!("/v1/sessions/{missing}/answer"),
        Some(json!({"status": 1})),
    )
    .await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::NOT_FOUND, "unknown_session")
    );
    let (s, v) = call(&app, "GET", "/v1/sessions/not-a-uuid", None).await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::NOT_FOUND, "unknown_session")
    );

    // Finish a session with a zero budget, then try to answer it.
    let body = json!({"explicit": [{"symptom": sym, "status": 1}], "max_turns": 0});
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED);
    let view: SessionView = serde_json::from_value(v).unwrap();
    assert!(view.inquiry.is_none() && view.diagnosis.is_some());
    let uri = format!("/v1/sessions/{}/answer", view.id);
    let (s, v) = call(&app, "POST", &uri, Some(json!({"status": 1}))).await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::CONFLICT, "session_finished")
    );

    let body =
        json!({"explicit": [{"symptom": sym, "status": 1}], "mode": "fixed", "max_turns": 3});
    let (_, v) = call(&app, "POST", "/v1/sessions", Some(body)).await;
    let view: SessionView = serde_json::from_value(v).unwrap();
    let uri = format!("/v1/sessions/{}/answer", view.id);
    let (s, v) = call(&app, "POST", &uri, Some(json!({"status": 3}))).await;
    assert_eq!(
        (s, code(&v).as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_status")
    );
    // The rejected answer left the inquiry pending.
    let (s, v) = call(&app, "POST", &uri, Some(json!({"status": 2}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["turns"], 1);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (corpus, state) = setup(Duration::from_millis(50));
    let app = router(state);
    let record = &corpus.test[0];
    let body = create_body(
        &corpus,
        record,
        DialogueConfig {
            max_turns: 5,
            mode: StopMode::Fixed,
        },
    );
    let (_, v) = call(&app, "POST", "/v1/sessions", Some(body)).await;
    let id = v["id"].as_str().unwrap().to_string();
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (s, v) = call(
        &app,
        "POST",
        &format!("/v1/sessions/{id}/answer"),
        Some(json!({"status": 1})),
    )
    .await;
    assert_eq!(
        (s, v["code"].as_str().unwrap()),
        (StatusCode::GONE, "session_expired")
    );
    let (s, _) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::GONE);
}

#[tokio::test]
async fn vocab_and_health() {
    let (corpus, state) = setup(Duration::from_secs(60));
    let app = router(state);
    let (s, v) = call(&app, "GET", "/v1/vocab", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        v["symptoms"].as_array().unwrap().len(),
        corpus.vocab.n_symptoms()
    );
    assert_eq!(
        v["diseases"].as_array().unwrap().len(),
        corpus.vocab.n_diseases()
    );
    let (s, v) = call(&app, "GET", "/v1/healthz", None).await;
    assert_eq!((s, v), (StatusCode::OK, json!({"status": "ok"})));
}
