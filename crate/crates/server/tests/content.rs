mod common;

use std::collections::BTreeSet;

use axum::http::{Method, StatusCode};
use common::*;
use emistudy_core::schema::Artifact;
use emistudy_core::{Digest, StudyArm};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest as _, Sha256};

fn noise(len: usize, seed: u64) -> Vec<u8> {
    let mut bytes = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
    bytes
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

async fn publish_study_content(h: &Harness) -> Vec<u8> {
    let audio = noise(48_000, 1);
    assert_eq!(publish(h, "about", "about_page", 1, &[("index.html", b"<h1>About</h1>")]).await.status, StatusCode::CREATED);
    assert_eq!(publish(h, "pink-noise", "sound_asset", 1, &[("pink.wav", &audio), ("meta.json", br#"{"title":"Pink"}"#)]).await.status, StatusCode::CREATED);
    for ch in ["ch1", "ch2"] {
        let html = format!("<h1>{ch}</h1>");
        let r = publish(h, &format!("{ch}-s1"), "tinedu_chapter", 1, &[("index.html", html.as_bytes()), ("figure.png", &noise(300, 2))]).await;
        assert_eq!(r.status, StatusCode::CREATED);
    }
    audio
}

fn manifest_ids(v: &Value) -> BTreeSet<String> {
    v["bundles"].as_array().unwrap().iter().map(|b| b["id"].as_str().unwrap().to_owned()).collect()
}

#[tokio::test]
async fn manifests_follow_the_arm_lattice() {
    let h = Harness::seeded().await;
    publish_study_content(&h).await;
    let mut manifests = std::collections::BTreeMap::new();
    for arm in StudyArm::ALL {
        let u = h.enroll_in("C1", arm).await;
        let r = h.get("/v1/content/manifest", Some(&u.token)).await;
        assert_eq!(r.status, StatusCode::OK);
        manifests.insert(arm, manifest_ids(&r.json()));
    }
    let want = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    assert_eq!(manifests[&StudyArm::Arm1], want(&["about"]));
    assert_eq!(manifests[&StudyArm::Arm2], want(&["about", "pink-noise"]));
    assert_eq!(manifests[&StudyArm::Arm3], want(&["about", "ch1-s1", "ch2-s1"]));
    assert_eq!(manifests[&StudyArm::Arm4], want(&["about", "ch1-s1", "ch2-s1", "pink-noise"]));
}

#[tokio::test]
async fn ranged_fetches_reassemble_to_the_digest() {
    let h = Harness::seeded().await;
    let audio = publish_study_content(&h).await;
    let user = h.enroll_in("C1", StudyArm::Arm2).await;
    let hash = sha(&audio);
    let uri = format!("/v1/content/{hash}");

    let full = h.get(&uri, Some(&user.token)).await;
    assert_eq!(full.status, StatusCode::OK);
    assert_eq!(sha(&full.bytes), hash);
    assert_eq!(full.headers["accept-ranges"], "bytes");
    assert_eq!(full.headers["content-type"], "audio/wav");
    assert_eq!(full.headers["etag"], format!("\"{hash}\""));

    let head = h.call_with(Method::GET, &uri, Some(&user.token), None, &[("range", "bytes=0-99")]).await;
    assert_eq!(head.status, StatusCode::PARTIAL_CONTENT);
    assert_eq!(head.headers["content-range"], format!("bytes 0-99/{}", audio.len()));
    let tail = h.call_with(Method::GET, &uri, Some(&user.token), None, &[("range", "bytes=100-")]).await;
    assert_eq!(tail.status, StatusCode::PARTIAL_CONTENT);
    let mut joined = head.bytes.clone();
    joined.extend_from_slice(&tail.bytes);
    assert_eq!(sha(&joined), hash);

    let suffix = h.call_with(Method::GET, &uri, Some(&user.token), None, &[("range", "bytes=-10")]).await;
    assert_eq!(suffix.bytes, audio[audio.len() - 10..]);
    let beyond = h.call_with(Method::GET, &uri, Some(&user.token), None, &[("range", "bytes=999999-")]).await;
    assert_eq!(beyond.status, StatusCode::RANGE_NOT_SATISFIABLE);
    assert_eq!(beyond.headers["content-range"], format!("bytes */{}", audio.len()));
    let cached = h.call_with(Method::GET, &uri, Some(&user.token), None, &[("if-none-match", &format!("\"{hash}\""))]).await;
    assert_eq!(cached.status, StatusCode::NOT_MODIFIED);
}

#[tokio::test]
async fn hidden_unknown_and_corrupt_assets() {
    let h = Harness::seeded().await;
    let audio = publish_study_content(&h).await;
    let arm1 = h.enroll_in("C1", StudyArm::Arm1).await;
    let arm2 = h.enroll_in("C1", StudyArm::Arm2).await;
    let uri = format!("/v1/content/{}", sha(&audio));
    assert_eq!(h.get(&uri, Some(&arm1.token)).await.status, StatusCode::NOT_FOUND);
    assert_eq!(h.get(&uri, None).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(h.get(&format!("/v1/content/{}", "ab".repeat(32)), Some(&arm2.token)).await.status, StatusCode::NOT_FOUND);
    assert_eq!(h.get("/v1/content/xyz", Some(&arm2.token)).await.status, StatusCode::BAD_REQUEST);

    let digest: Digest = sha(&audio).parse().unwrap();
    let mut flipped = audio.clone();
    flipped[12345] ^= 0x01;
    h.blobs.overwrite_raw(&digest, flipped);
    let r = h.get(&uri, Some(&arm2.token)).await;
    assert_eq!(r.status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(r.json()["error"], "corrupt_asset");
    let ranged = h.call_with(Method::GET, &uri, Some(&arm2.token), None, &[("range", "bytes=0-9")]).await;
    assert_eq!(ranged.status, StatusCode::INTERNAL_SERVER_ERROR);
}

#[tokio::test]
async fn bundle_publishing_rules() {
    let h = Harness::new();
    assert_eq!(publish(&h, "x", "about_page", 1, &[("../escape.html", b"x")]).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(publish(&h, "x", "about_page", 1, &[]).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let quiz = serde_json::to_vec(&compiled_fixture().quizzes[0]).unwrap();
    assert_eq!(publish(&h, "x", "tinedu_chapter", 1, &[("quiz.json", &quiz)]).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(publish(&h, "s", "sound_asset", 1, &[("a.wav", b"1"), ("b.wav", b"2")]).await.status, StatusCode::UNPROCESSABLE_ENTITY);

    let first = publish(&h, "x", "about_page", 1, &[("a.html", b"a"), ("b.css", b"b")]).await;
    assert_eq!(first.status, StatusCode::CREATED);
    let again = publish(&h, "x", "about_page", 1, &[("b.css", b"b"), ("a.html", b"a")]).await;
    assert_eq!(again.status, StatusCode::OK);
    assert_eq!(again.json()["status"], "unchanged");
    assert_eq!(again.json()["digest"], first.json()["digest"]);
    assert_eq!(publish(&h, "x", "about_page", 1, &[("a.html", b"changed")]).await.status, StatusCode::CONFLICT);
    let participant = h.enroll("C1").await;
    assert_eq!(h.call(Method::POST, "/v1/admin/bundles", Some(&participant.token), Some(json!({}))).await.status, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn about_is_public_stable_and_versioned() {
    let h = Harness::new();
    let a = h.get("/v1/about", None).await;
    let b = h.get("/v1/about", None).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.bytes, b.bytes);
    let v = a.json();
    assert!(!v["text"].as_str().unwrap().is_empty());
    let builtin = v["version"].as_str().unwrap().to_owned();

    publish(&h, "about", "about_page", 1, &[("index.html", b"<p>v1</p>")]).await;
    let v1 = h.get("/v1/about", None).await.json();
    assert_ne!(v1["version"], builtin);
    publish(&h, "about", "about_page", 2, &[("index.html", b"<p>v2</p>")]).await;
    let v2 = h.get("/v1/about", None).await.json();
    assert_ne!(v2["version"], v1["version"]);
    assert_eq!(v2["bundles"].as_array().unwrap().len(), 1);
    assert_eq!(v2["bundles"][0]["version"], 2);
}

#[tokio::test]
async fn catalog_and_chapter_unlocks() {
    let h = Harness::seeded().await;
    publish_study_content(&h).await;
    let catalog = json!({
        "sounds": [{ "sound_id": "pink", "name": { "en": "Pink noise" }, "bundle_id": "pink-noise", "duration_seconds": 1.0, "category": "noise" }],
        "chapters": [
            { "chapter_id": "ch1", "sections": [{ "section_id": "s1", "bundle_id": "ch1-s1" }], "quiz_id": "quiz-ch1", "prerequisites": [] },
            { "chapter_id": "ch2", "sections": [{ "section_id": "s1", "bundle_id": "ch2-s1" }], "quiz_id": "quiz-ch2", "prerequisites": ["ch1"] }
        ]
    });
    assert_eq!(h.call(Method::PUT, "/v1/admin/catalog", Some(RESEARCHER), Some(catalog.clone())).await.status, StatusCode::OK);
    let mut cyclic = catalog.clone();
    cyclic["chapters"][0]["prerequisites"] = json!(["ch2"]);
    assert_eq!(h.call(Method::PUT, "/v1/admin/catalog", Some(RESEARCHER), Some(cyclic)).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let mut dangling = catalog.clone();
    dangling["chapters"][0]["quiz_id"] = json!("quiz-missing");
    assert_eq!(h.call(Method::PUT, "/v1/admin/catalog", Some(RESEARCHER), Some(dangling)).await.status, StatusCode::UNPROCESSABLE_ENTITY);

    let user = h.enroll_in("C1", StudyArm::Arm3).await;
    let states = |v: Value| v["chapter_states"].clone();
    let m = h.get("/v1/content/manifest", Some(&user.token)).await.json();
    assert_eq!(states(m.clone()), json!({ "ch1": "available", "ch2": "locked" }));
    assert!(m["sounds"].as_array().is_none_or(|s| s.is_empty()));
    let t = at(h.now(), 0);
    let step = json!({ "dedup_id": uuid::Uuid::new_v4(), "module": "tinedu", "kind": "education_step_completed",
        "payload": { "chapter_id": "ch1", "section_id": "s1" }, "client_time": t });
    h.post("/v1/actions", Some(&user.token), step).await;
    // sections alone do not complete a chapter
    assert_eq!(states(h.get("/v1/content/manifest", Some(&user.token)).await.json()), json!({ "ch1": "available", "ch2": "locked" }));
    h.post("/v1/actions", Some(&user.token), quiz_completed(t, "quiz-ch1", 0.5)).await;
    assert_eq!(states(h.get("/v1/content/manifest", Some(&user.token)).await.json()), json!({ "ch1": "completed", "ch2": "available" }));
    let fb = h.get("/v1/feedback", Some(&user.token)).await.json();
    assert_eq!(fb["metrics"]["chapters_completed"], 1.0);
}

#[tokio::test]
async fn artifact_seeding_is_idempotent_and_versioned() {
    let h = Harness::new();
    let out = compiled_fixture();
    h.seed(&out).await;
    for artifact in out.artifacts() {
        let r = h.post("/v1/admin/artifacts", Some(RESEARCHER), serde_json::to_value(&artifact).unwrap()).await;
        assert_eq!(r.status, StatusCode::OK);
        assert_eq!(r.json()["status"], "unchanged");
    }
    let mut edited = out.questionnaire.clone();
    edited.questions[0].label.insert("en", "Edited label");
    let edited = edited.seal();
    let r = h.post("/v1/admin/artifacts", Some(RESEARCHER), serde_json::to_value(Artifact::Questionnaire(edited.clone())).unwrap()).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let mut tampered = serde_json::to_value(Artifact::Questionnaire(edited)).unwrap();
    tampered["version"] = json!(2);
    let r = h.post("/v1/admin/artifacts", Some(RESEARCHER), tampered).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["findings"].as_array().unwrap().iter().any(|f| f["code"] == "digest_mismatch"));
    assert_eq!(h.post("/v1/admin/artifacts", None, json!({})).await.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn adherence_stats_for_researchers_only() {
    let h = Harness::seeded().await;
    let a = h.enroll_in("C1", StudyArm::Arm4).await;
    let b = h.enroll_in("C2", StudyArm::Arm2).await;
    let t = at(h.now(), 0);
    for _ in 0..3 {
        h.post("/v1/actions", Some(&a.token), sound_session(t, 30.0)).await;
    }
    h.post("/v1/actions", Some(&a.token), quiz_completed(t, "quiz-ch1", 1.0)).await;
    h.post("/v1/actions", Some(&b.token), sound_session(t, 30.0)).await;
    h.post("/v1/submissions", Some(&b.token), envelope(&b.user_id, t, 1.0)).await;

    assert_eq!(h.get("/v1/stats/adherence", None).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(h.get("/v1/stats/adherence", Some(&a.token)).await.status, StatusCode::FORBIDDEN);
    let all = h.get("/v1/stats/adherence", Some(RESEARCHER)).await.json();
    assert_eq!((all["total_actions"].as_u64(), all["distinct_users"].as_u64(), all["max_actions_per_user"].as_u64()), (Some(5), Some(2), Some(4)));
    let sound = h.get("/v1/stats/adherence?module=shades_of_noise&center=C1", Some(RESEARCHER)).await.json();
    assert_eq!(sound["total_actions"], 3);
    let csv = h.get("/v1/stats/adherence?format=csv", Some(RESEARCHER)).await;
    assert_eq!(csv.headers["content-type"], "text/csv; charset=utf-8");
    let text = String::from_utf8(csv.bytes).unwrap();
    let mut rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.remove(0), "user_id,actions");
    let mut expected = vec![format!("{},4", a.user_id), format!("{},1", b.user_id)];
    expected.sort();
    assert_eq!(rows, expected);
    assert_eq!(h.get("/v1/stats/adherence?from=2021-05-01&to=2021-04-01", Some(RESEARCHER)).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.get("/v1/stats/adherence?module=bogus", Some(RESEARCHER)).await.status, StatusCode::BAD_REQUEST);
}
