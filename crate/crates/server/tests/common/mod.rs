#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Duration, FixedOffset, TimeZone, Utc};
use emistudy_core::compiler::{compile, parse_workbook, CompileOutput};
use emistudy_core::content::MemoryBlobStore;
use emistudy_core::StudyArm;
use emistudy_server::clock::ManualClock;
use emistudy_server::config::{Config, SeedPolicy};
use emistudy_server::store::SqliteStore;
use emistudy_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use uuid::Uuid;

pub const RESEARCHER: &str = "researcher-secret-0123456789";

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/study")
}

pub fn compiled_fixture() -> CompileOutput {
    compile(&parse_workbook(&fixture_dir()).expect("fixture parses")).expect("fixture compiles")
}

pub fn start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 4, 1, 8, 0, 0).unwrap()
}

pub struct Harness {
    pub state: AppState,
    pub app: Router,
    pub clock: Arc<ManualClock>,
    pub blobs: Arc<MemoryBlobStore>,
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("non-JSON body ({e}): {}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub struct Enrolled {
    pub user_id: String,
    pub token: String,
    pub arm: StudyArm,
}

impl Harness {
    pub fn new() -> Harness {
        Harness::with_config(Config {
            seed_policy: SeedPolicy::Fixed(20210401),
            researcher_token: Some(RESEARCHER.into()),
            ..Config::default()
        })
    }

    pub fn with_config(config: Config) -> Harness {
        let clock = Arc::new(ManualClock::new(start()));
        let blobs = Arc::new(MemoryBlobStore::new());
        let store = Arc::new(SqliteStore::in_memory().unwrap());
        let state = AppState::new(config, store, blobs.clone(), clock.clone()).unwrap();
        Harness { app: router(state.clone()), state, clock, blobs }
    }

    pub fn now(&self) -> DateTime<Utc> {
        use emistudy_server::clock::Clock;
        self.clock.now()
    }

    pub async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> Reply {
        self.call_with(method, uri, token, body, &[]).await
    }

    pub async fn call_with(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>, headers: &[(&str, &str)]) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let req = match body {
            Some(v) => req.header("content-type", "application/json").body(Body::from(serde_json::to_vec(&v).unwrap())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, bytes }
    }

    pub async fn get(&self, uri: &str, token: Option<&str>) -> Reply {
        self.call(Method::GET, uri, token, None).await
    }

    pub async fn post(&self, uri: &str, token: Option<&str>, body: Value) -> Reply {
        self.call(Method::POST, uri, token, Some(body)).await
    }

    pub async fn enroll(&self, center: &str) -> Enrolled {
        let r = self.post("/v1/users/anonymous", None, json!({ "center_id": center })).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
        let v = r.json();
        Enrolled {
            user_id: v["user_id"].as_str().unwrap().into(),
            token: v["token"].as_str().unwrap().into(),
            arm: serde_json::from_value(v["arm"].clone()).unwrap(),
        }
    }

    /// Enrolls at `center` until a user lands in `arm`.
    pub async fn enroll_in(&self, center: &str, arm: StudyArm) -> Enrolled {
        for _ in 0..64 {
            let e = self.enroll(center).await;
            if e.arm == arm {
                return e;
            }
        }
        panic!("no {arm} assignment in 64 enrollments");
    }

    pub async fn seed(&self, output: &CompileOutput) {
        for artifact in output.artifacts() {
            let r = self.post("/v1/admin/artifacts", Some(RESEARCHER), serde_json::to_value(&artifact).unwrap()).await;
            assert!(r.status.is_success(), "seeding {}: {} {}", artifact.id(), r.status, String::from_utf8_lossy(&r.bytes));
        }
    }

    pub async fn seeded() -> Harness {
        let h = Harness::new();
        h.seed(&compiled_fixture()).await;
        h
    }
}

pub fn at(t: DateTime<Utc>, offset_hours: i32) -> DateTime<FixedOffset> {
    t.with_timezone(&FixedOffset::east_opt(offset_hours * 3600).unwrap())
}

pub fn envelope(user_id: &str, client_time: DateTime<FixedOffset>, loudness: f64) -> Value {
    json!({
        "submission_id": Uuid::new_v4(),
        "user_id": user_id,
        "schema_id": "daily-diary",
        "schema_version": 1,
        "answers": { "loudness": loudness, "distress": 20, "slept_well": true },
        "client_time": client_time,
        "language": "en",
    })
}

pub fn sound_session(client_time: DateTime<FixedOffset>, seconds: f64) -> Value {
    json!({
        "dedup_id": Uuid::new_v4(),
        "module": "shades_of_noise",
        "kind": "sound_session",
        "payload": { "sound_id": "pink-noise", "duration_seconds": seconds },
        "client_time": client_time,
    })
}

pub fn quiz_completed(client_time: DateTime<FixedOffset>, quiz: &str, score: f64) -> Value {
    json!({
        "dedup_id": Uuid::new_v4(),
        "module": "tinedu",
        "kind": "quiz_completed",
        "payload": { "quiz_id": quiz, "score": score },
        "client_time": client_time,
    })
}

pub fn hours(n: i64) -> Duration {
    Duration::hours(n)
}

pub async fn publish(h: &Harness, id: &str, kind: &str, version: u32, files: &[(&str, &[u8])]) -> Reply {
    use base64::Engine as _;
    let files: Vec<Value> = files
        .iter()
        .map(|(path, bytes)| json!({ "path": path, "content_base64": base64::engine::general_purpose::STANDARD.encode(bytes) }))
        .collect();
    h.post("/v1/admin/bundles", Some(RESEARCHER), json!({ "id": id, "kind": kind, "version": version, "files": files })).await
}
