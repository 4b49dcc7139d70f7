// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::sync::Arc;

use addictfree_core::clock::VirtualClock;
use addictfree_service::api::router;
use addictfree_service::app::App;
use addictfree_service::config::{ServiceConfig, StoreSync};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Utc};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const OPERATOR: &str = "operator-secret";

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub clock: Arc<VirtualClock>,
    pub app: Arc<App>,
    pub router: Router,
}

pub fn t(s: &str) -> DateTime<Utc> {
    DateTime::parse_from_rfc3339(s).unwrap().to_utc()
}

pub fn config(dir: &std::path::Path) -> ServiceConfig {
    ServiceConfig {
        store_path: dir.join("store.log"),
        store_sync: StoreSync::Never,
        operator_token: OPERATOR.into(),
        ..ServiceConfig::default()
    }
}

impl Harness {
    pub fn new(start: &str) -> Self {
        Self::with_config(start, |_| {})
    }

    pub fn with_config(start: &str, tweak: impl FnOnce(&mut ServiceConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        tweak(&mut cfg);
        let clock = Arc::new(VirtualClock::new(t(start)));
        let app = Arc::new(App::open(cfg, clock.clone()).unwrap());
        let router = router(app.clone());
        Self { dir, clock, app, router }
    }

    /// Drops the app and opens a fresh one over the same store.
    pub fn reopen(self) -> Self {
        let Harness { dir, clock, app, .. } = self;
        let cfg = app.config().clone();
        app.shutdown().unwrap();
        drop(app);
        let app = Arc::new(App::open(cfg, clock.clone()).unwrap());
        let router = router(app.clone());
        Self { dir, clock, app, router }
    }

    pub fn set(&self, at: &str) {
        self.clock.set(t(at));
    }

    pub async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(tok) = token {
            req = req.header("authorization", format!("Bearer {tok}"));
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn get(&self, path: &str, token: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, Some(token), Some(body)).await
    }

    /// Creates a user through the API and returns its token.
    pub async fn user(&self, body: Value) -> String {
        let (status, v) = self.post("/v1/users", OPERATOR, body).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["token"].as_str().unwrap().to_owned()
    }
}
