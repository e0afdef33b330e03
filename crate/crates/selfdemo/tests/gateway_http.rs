//! HTTP gateway behavior against a local fault-injecting stub server:
//! retry classification, bounded batch concurrency, and cache interplay.

mod common;

use std::time::Duration;

use selfdemo::gateway::{
    complete_many, BatchRequest, CachedGateway, ChatMessage, EndpointConfig, Gateway,
    GatewayError, GenerationParams, HttpGateway,
};

use common::{StubReply, StubServer};

fn endpoint(base_url: &str, max_retries: u32, max_in_flight: usize) -> EndpointConfig {
    EndpointConfig {
        base_url: base_url.to_string(),
        model_name: "stub-model".into(),
        api_key_env: None,
        request_timeout: Duration::from_secs(10),
        max_in_flight,
        max_retries,
        backoff_base: Duration::from_millis(1),
    }
}

fn user(text: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(text)]
}

#[test]
fn transient_500s_are_retried_until_success() {
    let server = StubServer::start(|ordinal, _| {
        if ordinal < 2 {
            StubReply::Status(500)
        } else {
            StubReply::Ok("recovered".into())
        }
    });
    let gw = HttpGateway::new(endpoint(server.base_url(), 3, 1)).unwrap();
    let completion = gw.complete(&user("hello"), &GenerationParams::default(), 0).unwrap();
    assert_eq!(completion.text, "recovered");
    assert_eq!(server.hits(), 3, "two failures plus one success");
}

#[test]
fn unauthorized_is_a_protocol_error_without_retries() {
    let server = StubServer::start(|_, _| StubReply::Status(401));
    let gw = HttpGateway::new(endpoint(server.base_url(), 5, 1)).unwrap();
    match gw.complete(&user("hello"), &GenerationParams::default(), 0) {
        Err(GatewayError::Protocol { status: 401, .. }) => {}
        other => panic!("expected 401 protocol error, got {other:?}"),
    }
    assert_eq!(server.hits(), 1, "non-retryable status must not be retried");
}

#[test]
fn exhausted_retries_surface_as_transport_error() {
    let server = StubServer::start(|_, _| StubReply::Status(500));
    let gw = HttpGateway::new(endpoint(server.base_url(), 2, 1)).unwrap();
    match gw.complete(&user("hello"), &GenerationParams::default(), 0) {
        Err(GatewayError::Transport { attempts: 3, .. }) => {}
        other => panic!("expected transport error after 3 attempts, got {other:?}"),
    }
    assert_eq!(server.hits(), 3);
}

#[test]
fn rate_limit_429_is_retryable() {
    let server = StubServer::start(|ordinal, _| {
        if ordinal == 0 {
            StubReply::Status(429)
        } else {
            StubReply::Ok("after backoff".into())
        }
    });
    let gw = HttpGateway::new(endpoint(server.base_url(), 2, 1)).unwrap();
    let completion = gw.complete(&user("x"), &GenerationParams::default(), 0).unwrap();
    assert_eq!(completion.text, "after backoff");
    assert_eq!(server.hits(), 2);
}

#[test]
fn batch_concurrency_stays_under_max_in_flight() {
    let server = StubServer::start_with_delay(
        |_, _| StubReply::Ok("ok".into()),
        Duration::from_millis(15),
    );
    let gw = HttpGateway::new(endpoint(server.base_url(), 0, 4)).unwrap();
    let batch: Vec<BatchRequest> = (0..40)
        .map(|i| BatchRequest {
            messages: user(&format!("item {i}")),
            params: GenerationParams::default(),
            sample_index: 0,
        })
        .collect();
    let results = complete_many(&gw, &batch);
    assert!(results.iter().all(|r| r.is_ok()));
    assert_eq!(server.hits(), 40);
    let peak = server.peak_concurrency();
    assert!(peak <= 4, "observed peak concurrency {peak} > 4");
    assert!(peak >= 2, "expected some parallelism, saw {peak}");
}

#[test]
fn in_flight_cap_holds_across_shared_batches() {
    // Two batches running on separate threads share one gateway; the cap
    // is per endpoint, not per batch.
    let server = StubServer::start_with_delay(
        |_, _| StubReply::Ok("ok".into()),
        Duration::from_millis(15),
    );
    let gw = std::sync::Arc::new(HttpGateway::new(endpoint(server.base_url(), 0, 3)).unwrap());
    std::thread::scope(|scope| {
        for t in 0..2 {
            let gw = gw.clone();
            scope.spawn(move || {
                let batch: Vec<BatchRequest> = (0..12)
                    .map(|i| BatchRequest {
                        messages: user(&format!("thread {t} item {i}")),
                        params: GenerationParams::default(),
                        sample_index: 0,
                    })
                    .collect();
                let results = complete_many(&gw, &batch);
                assert!(results.iter().all(|r| r.is_ok()));
            });
        }
    });
    assert_eq!(server.hits(), 24);
    let peak = server.peak_concurrency();
    assert!(peak <= 3, "observed peak concurrency {peak} > 3 across batches");
}

#[test]
fn mixed_batch_isolates_failures_per_position() {
    let server = StubServer::start(|_, body| {
        if body.contains("FAIL") {
            StubReply::Status(400)
        } else {
            StubReply::Ok("fine".into())
        }
    });
    let gw = HttpGateway::new(endpoint(server.base_url(), 0, 3)).unwrap();
    let batch: Vec<BatchRequest> = (0..10)
        .map(|i| BatchRequest {
            messages: user(&if i % 3 == 0 { format!("FAIL {i}") } else { format!("ok {i}") }),
            params: GenerationParams::default(),
            sample_index: 0,
        })
        .collect();
    let results = complete_many(&gw, &batch);
    for (i, result) in results.iter().enumerate() {
        if i % 3 == 0 {
            assert!(
                matches!(result, Err(GatewayError::Protocol { status: 400, .. })),
                "position {i}: {result:?}"
            );
        } else {
            assert_eq!(result.as_ref().unwrap().text, "fine", "position {i}");
        }
    }
}

#[test]
fn slow_endpoint_times_out_after_retries() {
    let server = StubServer::start_with_delay(
        |_, _| StubReply::Ok("too late".into()),
        Duration::from_millis(600),
    );
    let mut config = endpoint(server.base_url(), 1, 1);
    config.request_timeout = Duration::from_millis(150);
    let gw = HttpGateway::new(config).unwrap();
    match gw.complete(&user("hello"), &GenerationParams::default(), 0) {
        Err(GatewayError::Timeout { attempts: 2 }) => {}
        other => panic!("expected timeout after 2 attempts, got {other:?}"),
    }
}

#[test]
fn cache_hit_skips_the_network() {
    let server = StubServer::start(|ordinal, _| StubReply::Ok(format!("reply {ordinal}")));
    let dir = tempfile::tempdir().unwrap();
    let gw = CachedGateway::new(
        HttpGateway::new(endpoint(server.base_url(), 0, 1)).unwrap(),
        dir.path().join("cache"),
    )
    .unwrap();
    let params = GenerationParams::default();
    let first = gw.complete(&user("cached?"), &params, 0).unwrap();
    let second = gw.complete(&user("cached?"), &params, 0).unwrap();
    assert_eq!(first, second);
    assert_eq!(server.hits(), 1, "second call must be served from the cache");

    // A different sample index is a different cache key, hence a new call.
    let third = gw.complete(&user("cached?"), &params, 1).unwrap();
    assert_eq!(server.hits(), 2);
    assert_eq!(third.text, "reply 1");
}

#[test]
fn fingerprints_are_stable_across_gateway_instances() {
    let server = StubServer::start(|_, _| StubReply::Ok("ok".into()));
    let params = GenerationParams::default();
    let a = HttpGateway::new(endpoint(server.base_url(), 0, 1))
        .unwrap()
        .complete(&user("same request"), &params, 0)
        .unwrap();
    let b = HttpGateway::new(endpoint(server.base_url(), 0, 1))
        .unwrap()
        .complete(&user("same request"), &params, 0)
        .unwrap();
    assert_eq!(a.request_fingerprint, b.request_fingerprint);
    assert!(!a.request_fingerprint.is_empty());
}
