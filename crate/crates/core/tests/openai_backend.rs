mod common;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use parking_lot::Mutex;
use serde_json::{json, Value};
use troupe_core::backend::{
    AdminData, ApiEndpoint, FinishReason, OpenAiBackend, OpenAiSettings, Sleeper,
};
use troupe_core::config::PromptFormat;
use troupe_core::prompter::{PromptData, PromptTurn, Role};
use troupe_core::{Backend, BackendError, Context, Job, ModelConfig};

#[derive(Default)]
struct Mock {
    replies: Mutex<VecDeque<(u16, String)>>,
    requests: Mutex<Vec<(HeaderMap, Value)>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    delay_ms: u64,
}

async fn handle(
    State(mock): State<Arc<Mock>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, String) {
    mock.requests.lock().push((headers, body));
    let now = mock.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    mock.peak.fetch_max(now, Ordering::SeqCst);
    if mock.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(mock.delay_ms)).await;
    }
    mock.in_flight.fetch_sub(1, Ordering::SeqCst);
    let (status, body) = mock
        .replies
        .lock()
        .pop_front()
        .unwrap_or((200, ok_body("default")));
    (StatusCode::from_u16(status).unwrap(), body)
}

async fn serve(mock: Arc<Mock>) -> String {
    let app = Router::new()
        .route("/v1/chat/completions", post(handle))
        .route("/v1/completions", post(handle))
        .with_state(mock);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

fn ok_body(text: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    })
    .to_string()
}

fn mock_with(replies: Vec<(u16, String)>) -> Arc<Mock> {
    Arc::new(Mock {
        replies: Mutex::new(replies.into()),
        ..Default::default()
    })
}

fn job() -> Job {
    let prompt = PromptData {
        system_prompt: "You are Anders.".into(),
        turns: vec![PromptTurn::new(Role::User, "Hello")],
        format: PromptFormat::Chatml,
    };
    let admin = AdminData {
        job_id: "job-1".into(),
        chat_id: "chat-1".into(),
        speaker_name: "Anders".into(),
        created_at: common::start_time(),
        attempt: 1,
    };
    Job::new(Context::new("c"), ModelConfig::default(), prompt, admin).unwrap()
}

/// Records requested delays instead of waiting.
#[derive(Default)]
struct FakeSleeper(Mutex<Vec<Duration>>);

#[async_trait]
impl Sleeper for FakeSleeper {
    async fn sleep(&self, duration: Duration) {
        self.0.lock().push(duration);
    }
}

fn backend(url: String, sleeper: Arc<FakeSleeper>) -> OpenAiBackend {
    let mut settings = OpenAiSettings::new(url);
    settings.api_key = Some("sk-test".into());
    OpenAiBackend::new(settings).unwrap().with_sleeper(sleeper)
}

#[tokio::test]
async fn sends_chat_messages_with_bearer_auth() {
    let mock = mock_with(vec![(200, ok_body("Morning."))]);
    let url = serve(mock.clone()).await;
    let result = backend(url, Default::default())
        .complete(&job())
        .await
        .unwrap();
    assert_eq!(result.text, "Morning.");
    assert_eq!(result.finish_reason, FinishReason::Stop);
    assert_eq!(
        (result.usage.prompt_tokens, result.usage.completion_tokens),
        (11, 3)
    );
    assert_eq!(result.attempts, 1);
    let requests = mock.requests.lock();
    let (headers, body) = &requests[0];
    assert_eq!(headers["authorization"], "Bearer sk-test");
    assert_eq!(body["model"], "teknium/OpenHermes-2.5-Mistral-7B");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["max_tokens"], 512);
    assert_eq!(body["stop"], json!(["<|im_end|>"]));
    assert_eq!(
        body["messages"],
        json!([
            {"role": "system", "content": "You are Anders."},
            {"role": "user", "content": "Hello"}
        ])
    );
}

#[tokio::test]
async fn completions_endpoint_sends_the_rendered_prompt() {
    let mock = mock_with(vec![(
        200,
        json!({"choices": [{"text": "Hi", "finish_reason": "stop"}]}).to_string(),
    )]);
    let url = serve(mock.clone()).await;
    let mut settings = OpenAiSettings::new(url);
    settings.endpoint = ApiEndpoint::Completions;
    let job = job();
    let result = OpenAiBackend::new(settings)
        .unwrap()
        .complete(&job)
        .await
        .unwrap();
    assert_eq!(result.text, "Hi");
    let requests = mock.requests.lock();
    assert_eq!(requests[0].1["prompt"], job.rendered_prompt.as_str());
    assert!(requests[0].0.get("authorization").is_none());
    // no usage block, so it is estimated
    assert!(result.usage.prompt_tokens > 0);
}

#[tokio::test]
async fn server_errors_are_retried_with_backoff() {
    let mock = mock_with(vec![
        (503, "busy".into()),
        (500, "oops".into()),
        (200, ok_body("third time")),
    ]);
    let url = serve(mock.clone()).await;
    let sleeper = Arc::new(FakeSleeper::default());
    let result = backend(url, sleeper.clone())
        .complete(&job())
        .await
        .unwrap();
    assert_eq!(result.text, "third time");
    assert_eq!(result.attempts, 3);
    assert_eq!(
        *sleeper.0.lock(),
        vec![Duration::from_millis(500), Duration::from_millis(1000)]
    );
}

#[tokio::test]
async fn gives_up_after_three_server_errors() {
    let mock = mock_with(vec![
        (502, "a".into()),
        (502, "b".into()),
        (502, "c".into()),
        (200, ok_body("late")),
    ]);
    let url = serve(mock.clone()).await;
    let err = backend(url, Default::default())
        .complete(&job())
        .await
        .unwrap_err();
    assert!(
        matches!(err, BackendError::Unavailable { attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(mock.requests.lock().len(), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let body = json!({"error": {"message": "bad model"}}).to_string();
    let mock = mock_with(vec![(400, body), (200, ok_body("never"))]);
    let url = serve(mock.clone()).await;
    let err = backend(url, Default::default())
        .complete(&job())
        .await
        .unwrap_err();
    assert_eq!(
        err,
        BackendError::Config("HTTP 400 Bad Request: bad model".into())
    );
    assert_eq!(mock.requests.lock().len(), 1);
}

#[tokio::test]
async fn malformed_body_is_a_protocol_error() {
    let mock = mock_with(vec![(200, "{\"choices\": 3}".into())]);
    let url = serve(mock.clone()).await;
    let err = backend(url.clone(), Default::default())
        .complete(&job())
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err:?}");

    let mock = mock_with(vec![(200, json!({"choices": []}).to_string())]);
    let url = serve(mock).await;
    let err = backend(url, Default::default())
        .complete(&job())
        .await
        .unwrap_err();
    assert_eq!(
        err,
        BackendError::Protocol("response has no choices".into())
    );
}

#[tokio::test]
async fn truncated_replies_report_the_limit() {
    let body = json!({
        "choices": [{"message": {"content": "and then"}, "finish_reason": "length"}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 7}
    });
    let mock = mock_with(vec![(200, body.to_string())]);
    let url = serve(mock).await;
    let result = backend(url, Default::default())
        .complete(&job())
        .await
        .unwrap();
    assert_eq!(result.finish_reason, FinishReason::Length);
    assert_eq!(result.usage.completion_tokens, 512);
}

#[tokio::test]
async fn unreachable_host_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let sleeper = Arc::new(FakeSleeper::default());
    let err = backend(format!("http://127.0.0.1:{port}/v1"), sleeper.clone())
        .complete(&job())
        .await
        .unwrap_err();
    assert!(
        matches!(err, BackendError::Unavailable { attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(sleeper.0.lock().len(), 2);
}

#[tokio::test]
async fn concurrency_is_capped() {
    let mock = Arc::new(Mock {
        delay_ms: 40,
        ..Default::default()
    });
    let url = serve(mock.clone()).await;
    let mut settings = OpenAiSettings::new(url);
    settings.max_concurrency = 2;
    let backend = Arc::new(OpenAiBackend::new(settings).unwrap());
    let job = job();
    let calls = (0..6).map(|_| backend.complete(&job));
    let results = futures::future::join_all(calls).await;
    assert!(results.iter().all(|r| r.is_ok()));
    assert_eq!(mock.peak.load(Ordering::SeqCst), 2);
}

#[test]
fn api_key_never_appears_in_debug_output() {
    let mut settings = OpenAiSettings::new("http://localhost");
    settings.api_key = Some("sk-secret".into());
    let shown = format!("{:?}", OpenAiBackend::new(settings).unwrap());
    assert!(!shown.contains("sk-secret"));
}
