use std::sync::Arc;

use autocomplete_core::agents::PolicySpec;
use autocomplete_core::corpus::SentenceRecord;
use autocomplete_core::lm::build_lm;
use autocomplete_core::mdp::EnvConfig;
use autocomplete_core::study::analysis::StudyAnalysis;
use autocomplete_core::study::{replay, BatchAck, Condition, EventIn, Key, Session, SessionLog, StudyService};
use autocomplete_server::{router, AppState, ErrorBody, EventBatch, NextPrompt, Suggestion};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

const PROMPTS: [&str; 5] = ["call me later", "see you soon", "how are you", "call you now", "see you at home"];

fn app() -> Router {
    let recs: Vec<SentenceRecord> = PROMPTS.iter().map(|t| SentenceRecord::from_text(t)).collect();
    let lm = Arc::new(build_lm(&recs).unwrap());
    let service = StudyService::new(lm, EnvConfig::default(), PolicySpec::Threshold(0.0));
    router(Arc::new(AppState::new(service, PROMPTS.iter().map(|s| s.to_string()).collect())))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn ok<T: DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn err(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, ErrorBody) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

/// Type every prompt through the HTTP API with fixed synthetic timing,
/// accepting every correct suggestion.
async fn scripted_session(app: &Router, id: &str) -> usize {
    let mut seq = 0;
    let mut clock = 0.0;
    let mut accepted = 0;
    loop {
        let next: NextPrompt = ok(app, "GET", &format!("/sessions/{id}/next"), None).await;
        let Some(view) = next.prompt else { break };
        let mut typed = view.typed.clone();
        let mut events = Vec::new();
        while typed != view.text {
            let s: Suggestion =
                ok(app, "POST", &format!("/sessions/{id}/suggest"), Some(json!({"instance": view.instance, "context": typed})))
                    .await;
            if view.condition == Condition::WithoutSuggestions {
                assert!(s.suggestion.is_none());
            }
            clock += 150.0 + if s.suggestion.is_some() { 25.0 } else { 0.0 };
            let rest = &view.text[typed.len()..];
            let correct = s.suggestion.as_ref().is_some_and(|g| {
                rest.starts_with(&g.insertion) && !rest[g.insertion.len()..].starts_with(char::is_alphanumeric)
            });
            let key = if correct { Key::Accept } else { Key::Char(rest.chars().next().unwrap()) };
            events.push(EventIn {
                seq,
                timestamp_ms: clock,
                instance: view.instance,
                key,
                context: typed.clone(),
                suggestion_shown: s.suggestion.as_ref().map(|g| g.candidate.clone()),
            });
            seq += 1;
            match key {
                Key::Accept => {
                    accepted += 1;
                    typed.push_str(&s.suggestion.unwrap().insertion);
                }
                Key::Char(c) => typed.push(c),
                _ => unreachable!(),
            }
        }
        let batch = json!(EventBatch { events: events.clone() });
        let ack: BatchAck = ok(app, "POST", &format!("/sessions/{id}/events"), Some(batch.clone())).await;
        assert_eq!(ack.recorded, events.len());
        // Retried batches are idempotent.
        let again: BatchAck = ok(app, "POST", &format!("/sessions/{id}/events"), Some(batch)).await;
        assert_eq!((again.recorded, again.duplicates), (0, events.len()));
    }
    accepted
}

#[tokio::test]
async fn health_and_unknown_session() {
    let app = app();
    let v: Value = ok(&app, "GET", "/health", None).await;
    assert_eq!(v["status"], "ok");
    let (status, body) = err(&app, "GET", "/sessions/s99999/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body.error, "not_found");
}

#[tokio::test]
async fn scripted_round_trip_reconstructs_text_and_analysis() {
    let app = app();
    let session: Session = ok(&app, "POST", "/sessions", Some(json!({"participant": "p1", "seed": 3}))).await;
    assert_eq!(session.instances.len(), 2 * PROMPTS.len());
    let accepted = scripted_session(&app, &session.id).await;
    assert!(accepted > 0);

    let done: Session = ok(&app, "GET", &format!("/sessions/{}", session.id), None).await;
    assert_eq!(format!("{:?}", done.status), "Complete");
    let log: SessionLog = ok(&app, "GET", &format!("/sessions/{}/log", session.id), None).await;
    for (i, text) in replay(&log).iter().enumerate() {
        assert_eq!(text, log.prompt_text(i));
    }
    let analysis: StudyAnalysis = ok(&app, "GET", &format!("/analysis?session={}", session.id), None).await;
    assert_eq!(analysis.sessions, 1);
    assert!(analysis.paired_samples > 0);
    if let Some(load) = &analysis.load {
        assert!((load.mean_load_ms - 25.0).abs() < 1e-9, "{load:?}");
    }

    // The session is complete: suggestions are refused.
    let (status, body) = err(&app, "POST", &format!("/sessions/{}/suggest", session.id), Some(json!({"instance": 0, "context": ""}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body.error, "session");
}

#[tokio::test]
async fn event_errors_map_to_statuses() {
    let app = app();
    let s: Session = ok(&app, "POST", "/sessions", Some(json!({"participant": "p2", "prompts": ["call me later"], "seed": 1}))).await;
    let with = s.instances.iter().find(|i| i.condition == Condition::WithSuggestions).unwrap().index;
    let uri = format!("/sessions/{}/events", s.id);
    let accept_without = json!({"events": [{"seq": 0, "timestamp_ms": 1.0, "instance": with, "key": {"kind": "accept"}, "context": "", "suggestion_shown": null}]});
    let (status, body) = err(&app, "POST", &uri, Some(accept_without)).await;
    assert_eq!((status, body.error.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "contract"));

    let first = json!({"events": [{"seq": 0, "timestamp_ms": 10.0, "instance": with, "key": {"kind": "char", "char": "c"}, "context": "", "suggestion_shown": null}]});
    let _: BatchAck = ok(&app, "POST", &uri, Some(first)).await;
    let late = json!({"events": [{"seq": 1, "timestamp_ms": 5.0, "instance": with, "key": {"kind": "char", "char": "a"}, "context": "c", "suggestion_shown": null}]});
    let (status, body) = err(&app, "POST", &uri, Some(late)).await;
    assert_eq!((status, body.error.as_str()), (StatusCode::CONFLICT, "ordering"));

    let (status, _) = err(&app, "POST", "/sessions", Some(json!({"participant": "p3", "prompts": [], "seed": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, body) = err(&app, "POST", "/sessions", Some(json!({"participant": "p3", "policy": "ppo"}))).await;
    assert_eq!((status, body.error.as_str()), (StatusCode::BAD_REQUEST, "config"));
}

#[tokio::test]
async fn analysis_without_sessions_reports_estimation_gap() {
    let app = app();
    let a: StudyAnalysis = ok(&app, "GET", "/analysis", None).await;
    assert_eq!(a.sessions, 0);
    assert!(a.load.is_none() && a.load_error.is_some());
    assert!(a.fatigue.all.is_empty());
}
