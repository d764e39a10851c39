//! Drives the HTTP API in process: upload a recipe dataset, queue a job,
//! poll its progress and fetch the report. Pass `--listen` to serve on
//! port 8080 instead.
//!
//! cargo run --release --example service [--listen]

use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cvs::service::{router, serve, AppState, ServiceOptions};

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let body = body.map_or(Body::empty(), |v| Body::from(v.to_string()));
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    serde_json::from_slice(&bytes).unwrap_or(Value::Null)
}

#[tokio::main]
async fn main() -> cvs::Result<()> {
    let opts = ServiceOptions { workers: 1, data_dir: None };
    if std::env::args().any(|a| a == "--listen") {
        return serve(([127, 0, 0, 1], 8080).into(), opts).await;
    }
    let app = router(AppState::new(opts)?);

    let ds = call(&app, "POST", "/datasets", Some(json!({"recipe": "eq7", "n": 1000, "seed": 1}))).await;
    println!("dataset {} with {} rows", ds["id"], ds["rows"]);
    let job = json!({"dataset_id": ds["id"], "condition": ["v1"], "k": 5, "config": {"max_epochs": 600, "seed": 1}});
    let id = call(&app, "POST", "/jobs", Some(job)).await["id"].as_str().unwrap().to_string();
    loop {
        let view = call(&app, "GET", &format!("/jobs/{id}"), None).await;
        println!("{id}: {} epoch {} loss {}", view["state"], view["progress"]["epoch"], view["progress"]["loss"]);
        match view["state"].as_str() {
            Some("done") => break,
            Some("failed") => {
                println!("failed: {}", view["error"]);
                return Ok(());
            }
            _ => tokio::time::sleep(Duration::from_millis(500)).await,
        }
    }
    let report = call(&app, "GET", &format!("/jobs/{id}/report"), None).await;
    println!("top-5: {}", report["top_k"]);
    Ok(())
}
