use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use divas_core::io::{read_fmap, read_vgrid};
use divas_service::{router, AppState};

fn app() -> Router {
    router(Arc::new(AppState::with_shipped_scenes()))
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::POST, uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

async fn small_session(app: &Router) -> Value {
    let (status, body) = post_json(
        app,
        "/sessions",
        json!({"scene": "sphere-on-plane", "mode": "fibonacci", "N": 12, "K_top": 5, "grid_res": 32, "image_size": 48}),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body
}

/// Pixels of a view's depth map with and without a surface.
async fn surface_pixels(app: &Router, sid: &str, view: u64) -> (Vec<(u32, u32)>, Vec<(u32, u32)>) {
    let (s, bytes) = send(app, Method::GET, &format!("/sessions/{sid}/views/{view}/depth"), None).await;
    assert_eq!(s, StatusCode::OK);
    let map = read_fmap(bytes.as_slice()).unwrap();
    assert_eq!(map.channels, 5);
    let n = map.channel(3).unwrap();
    let (mut hit, mut miss) = (Vec::new(), Vec::new());
    for y in 0..map.height {
        for x in 0..map.width {
            if n.get(x, y) > 0.0 {
                hit.push((x, y));
            } else {
                miss.push((x, y));
            }
        }
    }
    (hit, miss)
}

/// Anchor with the most surface pixels, and a surface pixel nearest its center.
async fn best_anchor(app: &Router, sid: &str, session: &Value) -> (u64, Vec<(u32, u32)>) {
    let mut best = (0, Vec::new());
    for a in session["anchors"].as_array().unwrap() {
        let id = a["id"].as_u64().unwrap();
        let (hit, _) = surface_pixels(app, sid, id).await;
        if hit.len() > best.1.len() {
            best = (id, hit);
        }
    }
    let mut hits = best.1;
    hits.sort_by_key(|(x, y)| (*x as i64 - 24).pow(2) + (*y as i64 - 24).pow(2));
    (best.0, hits)
}

async fn wait_events(app: &Router, sid: &str, pred: impl Fn(&[Value]) -> bool) -> Vec<Value> {
    let start = Instant::now();
    loop {
        let (s, body) = get_json(app, &format!("/sessions/{sid}/events?timeout_ms=500")).await;
        assert_eq!(s, StatusCode::OK);
        let events = body["events"].as_array().unwrap().clone();
        if pred(&events) {
            return events;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "timed out waiting for events: {events:?}");
    }
}

#[tokio::test]
async fn lists_shipped_scenes() {
    let app = app();
    let (s, body) = get_json(&app, "/scenes").await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = body.as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for n in ["sphere-on-plane", "occluder", "rod-lattice", "two-object"] {
        assert!(names.contains(&n), "{names:?}");
    }
}

#[tokio::test]
async fn fibonacci_session_returns_five_anchors_with_thumbnails() {
    let app = app();
    let session = small_session(&app).await;
    let anchors = session["anchors"].as_array().unwrap();
    assert_eq!(anchors.len(), 5);
    for a in anchors {
        let url = a["thumbnail_url"].as_str().unwrap();
        let (s, bytes) = send(&app, Method::GET, url, None).await;
        assert_eq!(s, StatusCode::OK);
        assert!(bytes.starts_with(PNG_MAGIC));
        assert!(a["camera"]["fx"].is_f64() && a["camera"]["world_from_camera"].is_array(), "{a}");
    }
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let app = app();
    let (s, _) = post_json(&app, "/sessions", json!({"scene": "nope"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&app, "/sessions/zzz/events").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = send(&app, Method::GET, "/sessions/zzz/grid", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let session = small_session(&app).await;
    let sid = session["session_id"].as_str().unwrap();
    for uri in [
        format!("/sessions/{sid}/views/999/image"),
        format!("/sessions/{sid}/views/abc/depth"),
        format!("/sessions/{sid}/overlay/999"),
    ] {
        let (s, _) = send(&app, Method::GET, &uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
    let (s, _) = post_json(&app, &format!("/sessions/{sid}/prompts"), json!({"anchor_id": 999, "px": 1, "py": 1})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn infeasible_plan_is_rejected() {
    let app = app();
    let (s, body) = post_json(&app, "/sessions", json!({"scene": "sphere-on-plane", "N": 3, "K_top": 5, "grid_res": 16, "image_size": 16})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
}

#[tokio::test]
async fn prompt_without_surface_is_422() {
    let app = app();
    let session = small_session(&app).await;
    let sid = session["session_id"].as_str().unwrap();
    let mut found = false;
    for a in session["anchors"].as_array().unwrap() {
        let id = a["id"].as_u64().unwrap();
        let (_, miss) = surface_pixels(&app, sid, id).await;
        if let Some((x, y)) = miss.first() {
            let (s, body) = post_json(&app, &format!("/sessions/{sid}/prompts"), json!({"anchor_id": id, "px": x, "py": y})).await;
            assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
            found = true;
            break;
        }
    }
    assert!(found, "some anchor should see empty background");
    let anchor = session["anchors"][0]["id"].as_u64().unwrap();
    let (s, _) = post_json(&app, &format!("/sessions/{sid}/prompts"), json!({"anchor_id": anchor, "px": 4000, "py": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn overlay_and_grid_need_a_fusion() {
    let app = app();
    let session = small_session(&app).await;
    let sid = session["session_id"].as_str().unwrap();
    let anchor = session["anchors"][0]["id"].as_u64().unwrap();
    let (s, _) = send(&app, Method::GET, &format!("/sessions/{sid}/overlay/{anchor}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = send(&app, Method::GET, &format!("/sessions/{sid}/grid"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, body) = post_json(&app, &format!("/sessions/{sid}/fuse"), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, json!({"fired": false, "version": 0}));
}

#[tokio::test]
async fn three_prompts_fire_fusion_and_overlay_tracks_version() {
    let app = app();
    let session = small_session(&app).await;
    let sid = session["session_id"].as_str().unwrap().to_string();
    let (anchor, hits) = best_anchor(&app, &sid, &session).await;
    let mut centroids = Vec::new();
    for (x, y) in hits.iter().step_by(7).take(3) {
        let (s, body) = post_json(&app, &format!("/sessions/{sid}/prompts"), json!({"anchor_id": anchor, "px": x, "py": y, "zoom": 0.6})).await;
        assert_eq!(s, StatusCode::CREATED, "{body}");
        let url = body["image_url"].as_str().unwrap();
        let (s, bytes) = send(&app, Method::GET, url, None).await;
        assert_eq!(s, StatusCode::OK);
        assert!(bytes.starts_with(PNG_MAGIC));
        centroids.push(body["centroid_id"].as_u64().unwrap());
    }

    // The third cached mask makes the barrier due; the session fuses on its own.
    let events = wait_events(&app, &sid, |ev| ev.iter().any(|e| e["kind"] == "fusion-complete")).await;
    let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (0..seqs.len() as u64).collect::<Vec<_>>(), "gap-free and ordered");
    let fusion_at = events.iter().position(|e| e["kind"] == "fusion-complete").unwrap();
    for c in &centroids {
        let ready = events
            .iter()
            .position(|e| e["kind"] == "mask-ready" && e["view_id"].as_u64() == Some(*c))
            .expect("mask-ready for every centroid");
        assert!(ready < fusion_at, "mask-ready precedes fusion-complete");
    }
    assert_eq!(events[fusion_at]["version"], 1);

    let view = centroids[0];
    let (s, png_now) = send(&app, Method::GET, &format!("/sessions/{sid}/overlay/{view}?version=1"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(png_now.starts_with(PNG_MAGIC));
    let (s, png_plain) = send(&app, Method::GET, &format!("/sessions/{sid}/overlay/{view}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(png_now, png_plain);
    let (s, _) = send(&app, Method::GET, &format!("/sessions/{sid}/overlay/{view}?version=0"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, bytes) = send(&app, Method::GET, &format!("/sessions/{sid}/grid"), None).await;
    assert_eq!(s, StatusCode::OK);
    let grid = read_vgrid(bytes.as_slice()).unwrap();
    assert_eq!(grid.grid.resolution, 32);
    assert!(grid.probs.iter().any(|p| *p >= 0.5));

    // Nothing new: an explicit fuse does not fire, a forced one does not either.
    let (_, body) = post_json(&app, &format!("/sessions/{sid}/fuse"), json!({})).await;
    assert_eq!(body, json!({"fired": false, "version": 1}));

    // One more prompt closing the group; forced fusion bumps the version and
    // the old overlay version becomes stale.
    let (x, y) = hits[1];
    let (s, _) = post_json(&app, &format!("/sessions/{sid}/prompts"), json!({"anchor_id": anchor, "px": x, "py": y, "last": true})).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, body) = post_json(&app, &format!("/sessions/{sid}/fuse"), json!({"force": true})).await;
    let version = body["version"].as_u64().unwrap();
    assert!(version >= 2, "{body}");
    let (s, _) = send(&app, Method::GET, &format!("/sessions/{sid}/overlay/{view}?version=1"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn event_cursor_resumes_without_gaps() {
    let app = app();
    let session = small_session(&app).await;
    let sid = session["session_id"].as_str().unwrap().to_string();
    let (anchor, hits) = best_anchor(&app, &sid, &session).await;
    for (x, y) in hits.iter().take(2) {
        post_json(&app, &format!("/sessions/{sid}/prompts"), json!({"anchor_id": anchor, "px": x, "py": y})).await;
    }
    let mut seen = Vec::new();
    let mut cursor: Option<u64> = None;
    let start = Instant::now();
    while seen.len() < 4 && start.elapsed() < Duration::from_secs(30) {
        let uri = match cursor {
            Some(c) => format!("/sessions/{sid}/events?after={c}&timeout_ms=300"),
            None => format!("/sessions/{sid}/events?timeout_ms=300"),
        };
        let (_, body) = get_json(&app, &uri).await;
        for e in body["events"].as_array().unwrap() {
            seen.push(e["seq"].as_u64().unwrap());
        }
        cursor = body["cursor"].as_u64().or(cursor);
    }
    // Two prompt-accepted events plus two mask-ready events.
    assert!(seen.len() >= 4, "{seen:?}");
    assert_eq!(seen, (0..seen.len() as u64).collect::<Vec<_>>());
}

#[tokio::test]
async fn long_poll_times_out_empty() {
    let app = app();
    let session = small_session(&app).await;
    let sid = session["session_id"].as_str().unwrap();
    let start = Instant::now();
    let (s, body) = get_json(&app, &format!("/sessions/{sid}/events?timeout_ms=200")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["events"], json!([]));
    assert!(start.elapsed() >= Duration::from_millis(190));
}

#[tokio::test]
async fn manual_mode_exposes_pool_and_adds_anchors() {
    let app = app();
    let (s, session) = post_json(&app, "/sessions", json!({"scene": "two-object", "mode": "manual", "N": 20, "grid_res": 16, "image_size": 32})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(session["anchors"], json!([]));
    assert_eq!(session["pool_size"], 20);
    let sid = session["session_id"].as_str().unwrap();
    let (_, pool) = get_json(&app, &format!("/sessions/{sid}/pool")).await;
    assert_eq!(pool.as_array().unwrap().len(), 20);
    let (s, bytes) = send(&app, Method::GET, &format!("/sessions/{sid}/pool/7/image"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(bytes.starts_with(PNG_MAGIC));
    let (s, anchor) = post_json(&app, &format!("/sessions/{sid}/anchors"), json!({"pool_index": 7})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(anchor["pool_index"], 7);
    let (_, anchors) = get_json(&app, &format!("/sessions/{sid}/anchors")).await;
    assert_eq!(anchors.as_array().unwrap().len(), 1);
    let (s, _) = post_json(&app, &format!("/sessions/{sid}/anchors"), json!({"pool_index": 20})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_are_independent() {
    let app = app();
    let (a, b) = tokio::join!(small_session(&app), small_session(&app));
    let (ida, idb) = (a["session_id"].as_str().unwrap(), b["session_id"].as_str().unwrap());
    assert_ne!(ida, idb);
    let (s, _) = send(&app, Method::DELETE, &format!("/sessions/{ida}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = get_json(&app, &format!("/sessions/{ida}/events")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&app, &format!("/sessions/{idb}/events")).await;
    assert_eq!(s, StatusCode::OK);
}
