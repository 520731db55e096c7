mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;
use strategy_distill::policy::{
    ConnectOptions, FinishReason, GenerationRequest, PolicyError, PolicyHandle, PolicyRole, RetryPolicy, TextPolicy,
    Transport,
};

use common::{completion, serve};

fn http(endpoint: &str, auth_env: Option<&str>, parallelism: usize) -> PolicyHandle {
    PolicyHandle {
        name: "remote".into(),
        role: PolicyRole::Agentic,
        transport: Transport::Http {
            endpoint: endpoint.into(),
            model: "m-7b".into(),
            auth_env: auth_env.map(str::to_string),
            max_output_tokens: 32_768,
            parallelism,
        },
    }
}

fn fast_retry() -> ConnectOptions {
    ConnectOptions {
        retry: RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(10),
        },
        ..ConnectOptions::default()
    }
}

fn connect(handle: &PolicyHandle, options: &ConnectOptions) -> Arc<dyn TextPolicy> {
    handle.connect(options).unwrap()
}

#[test]
fn request_body_carries_openai_fields() {
    let server = serve(|_, _| (200, completion("<answer>3</answer>", "stop")));
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    let request = GenerationRequest::new("What is 1+2?", 512)
        .with_stop(["</code>"])
        .with_seed(9)
        .with_temperature(0.6)
        .for_problem("p1");
    let out = policy.generate(&request).unwrap();
    assert_eq!(out.text, "<answer>3</answer>");
    assert_eq!(out.finish, FinishReason::EndOfMessage);

    let received = server.received.lock().unwrap();
    let body = &received[0].body;
    assert_eq!(body["model"], "m-7b");
    assert_eq!(body["messages"], json!([{"role": "user", "content": "What is 1+2?"}]));
    assert_eq!(body["max_tokens"], 512);
    assert_eq!(body["stop"], json!(["</code>"]));
    assert_eq!(body["seed"], 9);
    assert_eq!(body["temperature"], 0.6);
    // routing fields stay local
    assert!(body.get("problem_id").is_none());
    assert!(body.get("continue_final_message").is_none());
    assert!(received[0].header("authorization").is_none());
}

#[test]
fn resumed_request_continues_assistant_message() {
    let server = serve(|_, _| (200, completion("<answer>5</answer>", "stop")));
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    let mut request = GenerationRequest::new("Q", 100);
    request.assistant_prefix = "<code>print(5)</code><executor>5\n</executor>".into();
    policy.generate(&request).unwrap();
    let body = server.received.lock().unwrap()[0].body.clone();
    assert_eq!(body["messages"][1]["role"], "assistant");
    assert_eq!(body["messages"][1]["content"], request.assistant_prefix);
    assert_eq!(body["continue_final_message"], true);
    assert_eq!(body["add_generation_prompt"], false);
}

#[test]
fn stop_sequences_are_cut_and_reported() {
    // a server that ignores `stop` and returns text past it
    let server = serve(|_, _| (200, completion("<code>print(1)</code><executor>fake</executor>", "stop")));
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    let out = policy
        .generate(&GenerationRequest::new("Q", 100).with_stop(["</code>"]))
        .unwrap();
    assert_eq!(out.text, "<code>print(1)");
    assert_eq!(out.finish, FinishReason::Stop("</code>".into()));

    // a server that honours it: stop string absent, finish inferred
    let server = serve(|_, _| {
        let mut v = completion("<think>t</think><code>print(1)", "stop");
        v["choices"][0]["stop_reason"] = json!("</code>");
        (200, v)
    });
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    let out = policy
        .generate(&GenerationRequest::new("Q", 100).with_stop(["</code>"]))
        .unwrap();
    assert_eq!(out.finish, FinishReason::Stop("</code>".into()));

    let server = serve(|_, _| (200, completion("<think>long", "length")));
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    assert_eq!(policy.generate(&GenerationRequest::new("Q", 2)).unwrap().finish, FinishReason::Length);
}

#[test]
fn transient_failures_are_retried() {
    let server = serve(|i, _| {
        if i < 2 {
            (503, json!({"error": "busy"}))
        } else {
            (200, completion("<answer>1</answer>", "stop"))
        }
    });
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    let out = policy.generate(&GenerationRequest::new("Q", 10)).unwrap();
    assert_eq!(out.text, "<answer>1</answer>");
    assert_eq!(server.received.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_three_attempts_with_exponential_backoff() {
    let server = serve(|_, _| (500, json!({"error": "down"})));
    // default policy: 3 attempts, waits of 1 s then 2 s
    let policy = connect(&http(&server.endpoint, None, 4), &ConnectOptions::default());
    let started = Instant::now();
    let err = policy.generate(&GenerationRequest::new("Q", 10)).unwrap_err();
    let elapsed = started.elapsed();
    assert!(matches!(err, PolicyError::Transport { attempts: 3, .. }), "{err}");
    assert_eq!(server.received.lock().unwrap().len(), 3);
    assert!(elapsed >= Duration::from_secs(3), "{elapsed:?}");
    assert!(elapsed < Duration::from_secs(6), "{elapsed:?}");

    let retry = RetryPolicy::default();
    assert_eq!(
        (1..=3).map(|a| retry.backoff(a)).collect::<Vec<_>>(),
        [1, 2, 4].map(Duration::from_secs)
    );
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(|_, _| (400, json!({"error": "bad"})));
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    assert!(matches!(
        policy.generate(&GenerationRequest::new("Q", 10)),
        Err(PolicyError::Transport { attempts: 1, .. })
    ));
    assert_eq!(server.received.lock().unwrap().len(), 1);
}

#[test]
fn bearer_token_comes_from_the_named_variable() {
    let server = serve(|_, req| match req.header("authorization") {
        Some("Bearer s3cret") => (200, completion("<answer>1</answer>", "stop")),
        _ => (401, json!({"error": "unauthorized"})),
    });
    std::env::set_var("SDISTILL_HTTP_TEST_KEY", "s3cret");
    let handle = http(&server.endpoint, Some("SDISTILL_HTTP_TEST_KEY"), 4);
    let policy = connect(&handle, &fast_retry());
    assert_eq!(policy.generate(&GenerationRequest::new("Q", 10)).unwrap().text, "<answer>1</answer>");
    assert!(!serde_json::to_string(&handle).unwrap().contains("s3cret"));

    std::env::set_var("SDISTILL_HTTP_TEST_WRONG", "nope");
    let wrong = connect(&http(&server.endpoint, Some("SDISTILL_HTTP_TEST_WRONG"), 4), &fast_retry());
    let before = server.received.lock().unwrap().len();
    assert!(matches!(wrong.generate(&GenerationRequest::new("Q", 10)), Err(PolicyError::Auth(_))));
    assert_eq!(server.received.lock().unwrap().len(), before + 1, "401 is final");

    let unset = connect(&http(&server.endpoint, Some("SDISTILL_HTTP_TEST_UNSET"), 4), &fast_retry());
    assert!(matches!(unset.generate(&GenerationRequest::new("Q", 10)), Err(PolicyError::Auth(_))));
}

#[test]
fn invalid_requests_fail_before_sending() {
    let server = serve(|_, _| (200, completion("x", "stop")));
    let policy = connect(&http(&server.endpoint, None, 4), &fast_retry());
    assert!(matches!(policy.generate(&GenerationRequest::new("Q", 0)), Err(PolicyError::Budget(0))));
    assert!(server.received.lock().unwrap().is_empty());
}

#[test]
fn concurrency_is_capped_per_handle() {
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (l, p) = (live.clone(), peak.clone());
    let server = serve(move |_, _| {
        let now = l.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(80));
        l.fetch_sub(1, Ordering::SeqCst);
        (200, completion("<answer>1</answer>", "stop"))
    });
    let policy = connect(&http(&server.endpoint, None, 2), &fast_retry());
    thread::scope(|s| {
        for _ in 0..6 {
            let policy = policy.clone();
            s.spawn(move || policy.generate(&GenerationRequest::new("Q", 10)).unwrap());
        }
    });
    assert_eq!(server.received.lock().unwrap().len(), 6);
    assert!(peak.load(Ordering::SeqCst) <= 2, "peak {}", peak.load(Ordering::SeqCst));
}
