use std::time::Duration;

use artgesture_client::{Client, ClientError};
use artgesture_core::api::{ApiError, ErrorBody, ErrorKind, JobStatus};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpListener;

/// Serve each canned `(status line, body)` once, in order, and return the
/// request heads that were received.
async fn canned(responses: Vec<(&'static str, String)>) -> (String, tokio::task::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let handle = tokio::spawn(async move {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut sock, _) = listener.accept().await.unwrap();
            let mut buf = vec![0u8; 8192];
            let n = sock.read(&mut buf).await.unwrap();
            let head = String::from_utf8_lossy(&buf[..n]).lines().next().unwrap_or_default().to_string();
            seen.push(head);
            let reply = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            sock.write_all(reply.as_bytes()).await.unwrap();
            sock.shutdown().await.ok();
        }
        seen
    });
    (url, handle)
}

fn job(status: &str, epochs: usize) -> String {
    let progress: Vec<_> = (1..=epochs)
        .map(|e| {
            serde_json::json!({"seed": 0, "record": {
                "epoch": e, "train_loss": 1.0, "val_macro_f1": 0.5, "lr": 0.001, "lr_backbone": 0.0001, "train_accuracy": 0.5
            }})
        })
        .collect();
    serde_json::json!({"id": "j1", "status": status, "progress": progress, "result": null, "error": null}).to_string()
}

#[tokio::test]
async fn decodes_error_bodies() {
    let body = serde_json::to_string(&ErrorBody { error: ApiError::new(ErrorKind::InvalidData, "bad box") }).unwrap();
    let (url, server) = canned(vec![("422 Unprocessable Entity", body), ("502 Bad Gateway", "upstream down".into())]).await;
    let c = Client::new(url);

    match c.health().await.unwrap_err() {
        ClientError::Api { status, error } => {
            assert_eq!(status, 422);
            assert_eq!(error, ApiError::new(ErrorKind::InvalidData, "bad box"));
        }
        other => panic!("{other}"),
    }
    let e = c.health().await.unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Internal);
    assert!(e.to_string().contains("upstream down"));
    assert_eq!(server.await.unwrap(), vec!["GET /health HTTP/1.1", "GET /health HTTP/1.1"]);
}

#[tokio::test]
async fn waits_until_the_job_finishes() {
    let (url, server) = canned(vec![
        ("200 OK", job("running", 1)),
        ("200 OK", job("running", 2)),
        ("200 OK", job("succeeded", 3)),
        ("200 OK", job("cancelled", 3)),
    ])
    .await;
    let c = Client::new(url);
    let mut seen = Vec::new();
    let info = c.wait_job("j1", Duration::from_millis(1), |i| seen.push(i.progress.len())).await.unwrap();
    assert_eq!(info.status, JobStatus::Succeeded);
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(c.cancel_job("j1").await.unwrap().status, JobStatus::Cancelled);
    let heads = server.await.unwrap();
    assert_eq!(heads[0], "GET /v1/jobs/j1 HTTP/1.1");
    assert_eq!(heads[3], "DELETE /v1/jobs/j1 HTTP/1.1");
}

#[tokio::test]
async fn unreachable_server_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").await.unwrap().local_addr().unwrap().port();
    let e = Client::new(format!("http://127.0.0.1:{port}")).health().await.unwrap_err();
    assert!(matches!(e, ClientError::Transport(_)), "{e}");
    assert_eq!(e.kind(), ErrorKind::Internal);
}
