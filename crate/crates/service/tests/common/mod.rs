#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use closet_core::demo::write_demo_dataset;
use closet_core::synth::StyleClusterSpec;
use closet_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use tempfile::TempDir;
use tower::ServiceExt;

pub struct Fixture {
    pub dir: TempDir,
    pub config: ServiceConfig,
    pub state: Arc<AppState>,
}

pub fn config_for(dir: &TempDir) -> ServiceConfig {
    let (files, _) = write_demo_dataset(dir.path(), &StyleClusterSpec::default()).unwrap();
    ServiceConfig {
        catalog: Some(files.catalog),
        embeddings: Some(files.embeddings),
        text_embeddings: Some(files.text_embeddings),
        ..Default::default()
    }
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = config_for(&dir);
    let state = AppState::load(&config).unwrap();
    Fixture { dir, config, state }
}

impl Fixture {
    pub fn app(&self) -> Router {
        router(Arc::clone(&self.state))
    }
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn json(app: &Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, serde_json::Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}
