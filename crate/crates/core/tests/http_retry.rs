//! Gateway transport behavior against a real local HTTP server: retries
//! with backoff on 5xx, success on recovery, hard provider errors on 4xx.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chaff_core::gateway::{Gateway, GatewayError, ModelSpec, Price, ProviderKind, RetryPolicy};

const OK_BODY: &str = r#"{"choices":[{"message":{"content":"recovered"},"finish_reason":"stop"}],"usage":{"prompt_tokens":5,"completion_tokens":2}}"#;

/// Serve `total` requests; the first `failures` get a 500, the rest 200.
fn serve(listener: TcpListener, failures: usize, total: usize) -> Arc<AtomicUsize> {
    let counter = Arc::new(AtomicUsize::new(0));
    let seen = counter.clone();
    std::thread::spawn(move || {
        for _ in 0..total {
            let Ok((mut stream, _)) = listener.accept() else {
                break;
            };
            let mut buf = [0u8; 8192];
            // Read once; requests here are small enough for a single read.
            let _ = stream.read(&mut buf);
            let n = seen.fetch_add(1, Ordering::SeqCst);
            let response = if n < failures {
                "HTTP/1.1 500 Internal Server Error\r\ncontent-length: 9\r\nconnection: close\r\n\r\ntry later".to_string()
            } else {
                format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    OK_BODY.len(),
                    OK_BODY
                )
            };
            let _ = stream.write_all(response.as_bytes());
        }
    });
    counter
}

fn local_spec(port: u16) -> ModelSpec {
    ModelSpec {
        name: "local".into(),
        provider: ProviderKind::LocalHttp,
        model: "test-model".into(),
        temperature: 0.0,
        max_output_tokens: 64,
        seed: Some(1),
        base_url: Some(format!("http://127.0.0.1:{port}")),
        price: Price::default(),
        script: None,
    }
}

fn fast_retry_gateway(max_attempts: u32) -> Gateway {
    Gateway::builder()
        .retry(RetryPolicy {
            max_attempts,
            base_delay: Duration::from_millis(5),
        })
        .build()
        .unwrap()
}

#[test]
fn recovers_after_transient_server_errors() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let counter = serve(listener, 2, 3);

    let gw = fast_retry_gateway(3);
    let exchange = gw.complete(&local_spec(port), "sys", "user").unwrap();
    assert_eq!(exchange.response_text, "recovered");
    assert_eq!(exchange.tokens_in, 5);
    assert_eq!(counter.load(Ordering::SeqCst), 3);
}

#[test]
fn transport_error_surfaces_after_max_attempts() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let counter = serve(listener, 10, 10);

    let gw = fast_retry_gateway(2);
    let err = gw.complete(&local_spec(port), "sys", "user").unwrap_err();
    match err {
        GatewayError::Transport { attempts, .. } => assert_eq!(attempts, 2),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(counter.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_do_not_retry() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let counter = Arc::new(AtomicUsize::new(0));
    let seen = counter.clone();
    std::thread::spawn(move || {
        let Ok((mut stream, _)) = listener.accept() else {
            return;
        };
        let mut buf = [0u8; 8192];
        let _ = stream.read(&mut buf);
        seen.fetch_add(1, Ordering::SeqCst);
        let _ = stream.write_all(
            b"HTTP/1.1 400 Bad Request\r\ncontent-length: 11\r\nconnection: close\r\n\r\nbad request",
        );
    });

    let gw = fast_retry_gateway(3);
    let err = gw.complete(&local_spec(port), "sys", "user").unwrap_err();
    match err {
        GatewayError::Provider { status, .. } => assert_eq!(status, 400),
        other => panic!("expected provider error, got {other:?}"),
    }
    assert_eq!(counter.load(Ordering::SeqCst), 1);
}
