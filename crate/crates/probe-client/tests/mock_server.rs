use std::sync::atomic::AtomicUsize;
use std::time::{Duration, Instant};

use pppo::harness::probe::{Arm, Shortfall};
use pppo_probe::mock::{MockConfig, MockModel, MockServer, MockStats, Scripted};
use pppo_probe::*;

fn endpoint(server: &MockServer) -> EndpointConfig {
    EndpointConfig {
        base_url: server.base_url(),
        model: "mock".into(),
        api_key_env: None,
        backoff_initial_ms: 5,
        backoff_max_ms: 50,
        timeout_secs: 10.0,
        ..EndpointConfig::default()
    }
}

fn count(c: &AtomicUsize) -> usize {
    MockStats::get(c)
}

fn problems(n: usize) -> Vec<Problem> {
    (0..n)
        .map(|i| {
            let (a, b) = (i as i64 % 7 + 2, i as i64 % 5 + 1);
            Problem { id: Some(format!("p{i}")), question: format!("Compute {a} + {b}."), answer: (a + b).to_string() }
        })
        .collect()
}

#[tokio::test]
async fn two_rate_limits_then_success() {
    let server = MockServer::start(MockConfig {
        script: vec![Scripted::Status(429), Scripted::Status(429)],
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let client = Client::new(EndpointConfig { max_retries: 3, ..endpoint(&server) }).unwrap();
    let r = client.complete("r0", "Compute 2 + 3.", "", "5", 1).await.unwrap();
    assert_eq!(r.attempts, 3);
    assert_eq!(r.retried_statuses, vec![429, 429]);
    assert_eq!(count(&server.stats.requests), 3);
    server.shutdown().await;
}

#[tokio::test]
async fn retries_run_out() {
    let server = MockServer::start(MockConfig { script: vec![Scripted::Status(503); 5], ..MockConfig::default() })
        .await
        .unwrap();
    let client = Client::new(EndpointConfig { max_retries: 2, ..endpoint(&server) }).unwrap();
    let err = client.complete("r0", "Compute 2 + 3.", "", "5", 1).await.unwrap_err();
    assert!(matches!(err, Error::RetriesExhausted { attempts: 3, .. }), "{err}");
    assert_eq!(count(&server.stats.requests), 3);
    server.shutdown().await;
}

#[tokio::test]
async fn backoff_waits_and_honours_retry_after() {
    let server = MockServer::start(MockConfig {
        script: vec![Scripted::Status(500), Scripted::StatusRetryAfter(429, 0.2)],
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let client =
        Client::new(EndpointConfig { backoff_initial_ms: 40, backoff_max_ms: 1000, ..endpoint(&server) }).unwrap();
    let t0 = Instant::now();
    let r = client.complete("r0", "Compute 2 + 3.", "", "5", 1).await.unwrap();
    assert_eq!(r.attempts, 3);
    // 40 ms of exponential backoff, then the server's 200 ms.
    assert!(t0.elapsed() >= Duration::from_millis(240), "{:?}", t0.elapsed());
    server.shutdown().await;
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let server =
        MockServer::start(MockConfig { script: vec![Scripted::Status(401)], ..MockConfig::default() }).await.unwrap();
    let client = Client::new(endpoint(&server)).unwrap();
    let err = client.complete("r0", "Compute 2 + 3.", "", "5", 1).await.unwrap_err();
    assert!(matches!(err, Error::Status { status: 401, .. }), "{err}");
    assert_eq!(count(&server.stats.requests), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn malformed_bodies_are_errors() {
    let server =
        MockServer::start(MockConfig { script: vec![Scripted::Garbage], ..MockConfig::default() }).await.unwrap();
    let client = Client::new(endpoint(&server)).unwrap();
    let err = client.complete("r0", "Compute 2 + 3.", "", "5", 1).await.unwrap_err();
    assert!(matches!(err, Error::Malformed(_)), "{err}");
    server.shutdown().await;
}

#[tokio::test]
async fn in_flight_requests_stay_within_the_bound() {
    let server =
        MockServer::start(MockConfig { latency: Duration::from_millis(30), ..MockConfig::default() }).await.unwrap();
    let client = Client::new(EndpointConfig { max_concurrent: 3, ..endpoint(&server) }).unwrap();
    let mut set = tokio::task::JoinSet::new();
    for i in 0..24u64 {
        let c = client.clone();
        set.spawn(async move { c.complete(&format!("r{i}"), "Compute 1 + 1.", "", "2", i).await });
    }
    while let Some(r) = set.join_next().await {
        r.unwrap().unwrap();
    }
    assert_eq!(count(&server.stats.requests), 24);
    assert_eq!(count(&server.stats.max_in_flight), 3);
    server.shutdown().await;
}

#[tokio::test]
async fn echo_verdicts_are_stable() {
    let server =
        MockServer::start(MockConfig { model: MockModel::Echo { answer: "42".into() }, ..MockConfig::default() })
            .await
            .unwrap();
    let client = Client::new(endpoint(&server)).unwrap();
    for _ in 0..3 {
        let hit = client.complete("a", "What is six times seven?", "", "42", 9).await.unwrap();
        assert_eq!(
            (hit.verdict, hit.injection, hit.extracted.as_deref()),
            (Verdict::Correct, Injection::None, Some("42"))
        );
        let miss = client.complete("b", "What is six times seven?", "", "41", 9).await.unwrap();
        assert_eq!(miss.verdict, Verdict::Incorrect);
    }
    server.shutdown().await;
}

#[tokio::test]
async fn rejected_prefill_falls_back_to_the_template() {
    let server = MockServer::start(MockConfig { prefill: false, ..MockConfig::default() }).await.unwrap();
    let client = Client::new(endpoint(&server)).unwrap();
    let r = client.complete("r", "Compute 2 + 3.", "First I line", "5", 4).await.unwrap();
    assert_eq!(r.injection, Injection::Template);
    assert_eq!(r.attempts, 1);
    assert!(r.continuation.starts_with(" up the operands"));
    let again = client.complete("s", "Compute 2 + 3.", "First I line", "5", 4).await.unwrap();
    assert_eq!(again.injection, Injection::Template);
    assert_eq!(count(&server.stats.template_requests), 2);
    assert_eq!(count(&server.stats.prefill_requests), 0);
    server.shutdown().await;
}

#[tokio::test]
async fn missing_chat_route_falls_back_to_completions() {
    let server = MockServer::start(MockConfig { chat_route: false, ..MockConfig::default() }).await.unwrap();
    let client = Client::new(endpoint(&server)).unwrap();
    let r = client.complete("r", "Compute 2 + 3.", "First I", "5", 4).await.unwrap();
    assert_eq!((r.api, r.injection), (Api::Completions, Injection::Raw));
    assert!(r.tokens.is_some());
    assert_eq!(count(&server.stats.completion_requests), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn probe_shows_lock_in_and_recounts() {
    let server = MockServer::start(MockConfig {
        model: MockModel::Arithmetic { accuracy: 0.5, lock_in: 0.9 },
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let client = Client::new(EndpointConfig { max_concurrent: 16, ..endpoint(&server) }).unwrap();
    let cfg = RemoteProbeConfig {
        n_correct: 2,
        n_incorrect: 2,
        g: 4,
        attempts_per_output: 16,
        ..RemoteProbeConfig::default()
    };
    let report = run_remote_probe(&client, &problems(6), &cfg).await.unwrap();
    assert_eq!(report.problems_used, 6);
    for (arm, stats) in [
        (Arm::Baseline, &report.baseline),
        (Arm::CorrectPrefix, &report.correct_prefix),
        (Arm::IncorrectPrefix, &report.incorrect_prefix),
    ] {
        assert_eq!(&report.recount(arm), stats);
        assert_eq!(stats.prefixes, 12);
        assert_eq!(stats.samples, 48);
    }
    let total: usize =
        [&report.baseline, &report.correct_prefix, &report.incorrect_prefix].iter().map(|s| s.correct).sum();
    let from_records =
        report.records.iter().filter(|r| !r.request_id.contains("/collect/") && r.verdict.is_correct()).count();
    assert_eq!(total, from_records);
    assert!(report.correct_prefix.accuracy > report.baseline.accuracy);
    assert!(report.baseline.accuracy > report.incorrect_prefix.accuracy);
    assert_eq!(report.prefixes_in_tokens, 24);
    assert!(report.injection_counts[&Injection::Prefill] > 0);

    // Same seeds, same report, apart from timing.
    let again = run_remote_probe(&client, &problems(6), &cfg).await.unwrap();
    let strip = |mut r: RemoteProbeReport| {
        r.records.iter_mut().for_each(|x| x.latency_ms = 0.0);
        r
    };
    assert_eq!(strip(again), strip(report));
    server.shutdown().await;
}

#[tokio::test]
async fn perfect_endpoint_and_shortfalls() {
    let server = MockServer::start(MockConfig {
        model: MockModel::Arithmetic { accuracy: 1.0, lock_in: 1.0 },
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let client = Client::new(endpoint(&server)).unwrap();
    let only_correct = RemoteProbeConfig { n_correct: 2, n_incorrect: 0, g: 3, ..RemoteProbeConfig::default() };
    let r = run_remote_probe(&client, &problems(3), &only_correct).await.unwrap();
    assert_eq!(r.correct_prefix.accuracy, 1.0);

    let both = RemoteProbeConfig {
        n_correct: 1,
        n_incorrect: 1,
        g: 2,
        attempts_per_output: 2,
        ..RemoteProbeConfig::default()
    };
    let err = run_remote_probe(&client, &problems(2), &both).await.unwrap_err();
    assert!(matches!(err, Error::Shortfall { incorrect: 0, .. }), "{err}");
    let skip = RemoteProbeConfig { shortfall: Shortfall::Skip, ..both };
    let r = run_remote_probe(&client, &problems(2), &skip).await.unwrap();
    assert_eq!((r.problems_used, r.skipped_problems.len()), (0, 2));
    server.shutdown().await;
}
