//! The review HTTP API, driven in-process through the router.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use forge_cli::{pairwise_service, report_from_store, server, single_service};
use forge_core::record::TaskRecord;
use forge_core::review::{ReviewConfig, ReviewService};
use forge_core::util::read_jsonl;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn retained() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden/retained.jsonl")
}

fn records() -> Vec<TaskRecord> {
    read_jsonl(&retained()).unwrap()
}

fn single(sample_size: usize, store: Option<&Path>) -> Arc<ReviewService> {
    let config = ReviewConfig {
        sample_size,
        seed: 3,
        store: store.map(Path::to_path_buf),
        ..ReviewConfig::default()
    };
    Arc::new(single_service(&retained(), config).unwrap())
}

struct Reply {
    status: StatusCode,
    content_type: String,
    body: String,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply {
        status,
        content_type,
        body: String::from_utf8(bytes.to_vec()).unwrap(),
    }
}

async fn next(app: &Router, annotator: &str) -> Value {
    let r = call(
        app,
        "GET",
        &format!("/api/queue/next?annotator={annotator}"),
        None,
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    r.json()
}

/// A judgment for a served card; `bad` marks it unclear and hallucinated.
fn judgment(card: &Value, annotator: &str, bad: bool) -> Value {
    let na = card["input_empty"].as_bool().unwrap();
    let input = if na { Value::Null } else { json!(false) };
    json!({
        "record_id": card["record_id"],
        "cl_p": !bad,
        "ha_i": input,
        "ha_o": bad,
        "fl_i": if na { Value::Null } else { json!(true) },
        "fl_o": true,
        "annotator": annotator,
    })
}

#[tokio::test]
async fn each_sampled_record_is_served_once() {
    let app = server::router(single(10, None), None);
    let mut seen = BTreeSet::new();
    for left in (0..10).rev() {
        let item = next(&app, "ann").await;
        assert_eq!(item["mode"], "single");
        assert_eq!(item["done"], false);
        assert_eq!(item["remaining"], left + 1);
        assert!(item.get("pair").is_none());
        let card = &item["record"];
        // an unjudged item is re-served unchanged
        assert_eq!(next(&app, "ann").await["record"], *card);
        assert!(seen.insert(card["record_id"].as_str().unwrap().to_string()));
        let r = call(
            &app,
            "POST",
            "/api/judgment",
            Some(judgment(card, "ann", false)),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.body);
        assert!(!r.json()["timestamp"].as_str().unwrap().is_empty());
    }
    let done = next(&app, "ann").await;
    assert_eq!(done["done"], true);
    assert_eq!(done["record"], Value::Null);
    assert_eq!(done["remaining"], 0);
    assert_eq!(seen.len(), 10);
}

#[tokio::test]
async fn annotators_have_independent_queues() {
    let service = single(30, None);
    let app = server::router(service.clone(), None);
    let a = next(&app, "a").await["record"].clone();
    let r = call(
        &app,
        "POST",
        "/api/judgment",
        Some(judgment(&a, "a", false)),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    // b's queue still holds every record, a's judgment included
    let mut b_ids = BTreeSet::new();
    loop {
        let item = next(&app, "b").await;
        if item["done"] == true {
            break;
        }
        let card = item["record"].clone();
        b_ids.insert(card["record_id"].as_str().unwrap().to_string());
        call(
            &app,
            "POST",
            "/api/judgment",
            Some(judgment(&card, "b", false)),
        )
        .await;
    }
    assert_eq!(b_ids.len(), 30);
    assert!(b_ids.contains(a["record_id"].as_str().unwrap()));
    assert_eq!(service.queue_ids("a").len(), 30);
    assert_ne!(service.queue_ids("a"), service.queue_ids("b"));
}

#[tokio::test]
async fn judgment_errors_map_to_status_codes() {
    let app = server::router(single(10, None), None);
    let card = next(&app, "ann").await["record"].clone();
    let good = judgment(&card, "ann", false);

    // input metrics must be n/a exactly when the input is empty
    let mut flipped = good.clone();
    flipped["ha_i"] = if card["input_empty"] == true {
        json!(false)
    } else {
        Value::Null
    };
    assert_eq!(
        call(&app, "POST", "/api/judgment", Some(flipped))
            .await
            .status,
        StatusCode::BAD_REQUEST
    );

    let mut unknown = good.clone();
    unknown["record_id"] = json!("rec-nope");
    assert_eq!(
        call(&app, "POST", "/api/judgment", Some(unknown))
            .await
            .status,
        StatusCode::NOT_FOUND
    );

    let other = records()
        .into_iter()
        .find(|r| r.id != card["record_id"])
        .unwrap();
    let mut unserved = good.clone();
    unserved["record_id"] = json!(other.id);
    let (ha, fl) = if other.task().has_input() {
        (json!(false), json!(true))
    } else {
        (Value::Null, Value::Null)
    };
    unserved["ha_i"] = ha;
    unserved["fl_i"] = fl;
    assert_eq!(
        call(&app, "POST", "/api/judgment", Some(unserved))
            .await
            .status,
        StatusCode::CONFLICT
    );

    let mut stranger = good.clone();
    stranger["annotator"] = json!("stranger");
    assert_eq!(
        call(&app, "POST", "/api/judgment", Some(stranger))
            .await
            .status,
        StatusCode::CONFLICT
    );

    assert_eq!(
        call(&app, "POST", "/api/judgment", Some(good.clone()))
            .await
            .status,
        StatusCode::OK
    );
    let again = call(&app, "POST", "/api/judgment", Some(good)).await;
    assert_eq!(again.status, StatusCode::CONFLICT);
    assert!(again.json()["error"]
        .as_str()
        .unwrap()
        .contains("already judged"));

    let malformed = call(
        &app,
        "POST",
        "/api/judgment",
        Some(json!({ "record_id": 5 })),
    )
    .await;
    assert_eq!(malformed.status, StatusCode::BAD_REQUEST);
    assert!(malformed.json()["error"].is_string());

    let missing = call(&app, "GET", "/api/queue/next", None).await;
    assert_eq!(missing.status, StatusCode::BAD_REQUEST);

    let wrong_mode = call(&app, "POST", "/api/pairwise", Some(json!({
        "left_id": "x", "right_id": "y", "document_id": "d", "verdict": "tie", "annotator": "ann"
    }))).await;
    assert_eq!(wrong_mode.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn report_and_negatives_follow_judgments() {
    let dir = tempfile::tempdir().unwrap();
    let service = single(12, Some(dir.path()));
    let app = server::router(service.clone(), None);
    let (mut bad_ids, mut cards) = (BTreeSet::new(), Vec::new());
    for i in 0..12 {
        let card = next(&app, "ann").await["record"].clone();
        let bad = i % 4 == 0;
        if bad {
            bad_ids.insert(card["record_id"].as_str().unwrap().to_string());
        }
        let r = call(
            &app,
            "POST",
            "/api/judgment",
            Some(judgment(&card, "ann", bad)),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK);
        cards.push(card);
    }
    let with_input = cards.iter().filter(|c| c["input_empty"] == false).count();

    let report = call(&app, "GET", "/api/report", None).await;
    assert_eq!(report.status, StatusCode::OK);
    let report = report.json();
    let pooled = &report["pooled"];
    assert_eq!(pooled["judgments"], 12);
    assert_eq!(
        pooled["cl_p"]["percent"].as_f64().unwrap(),
        100.0 * 9.0 / 12.0
    );
    assert_eq!(
        pooled["ha_o"]["percent"].as_f64().unwrap(),
        100.0 * 3.0 / 12.0
    );
    assert_eq!(pooled["fl_o"]["percent"].as_f64().unwrap(), 100.0);
    assert_eq!(pooled["ha_i"]["applicable"], with_input);
    assert_eq!(pooled["ha_i"]["percent"].as_f64().unwrap_or(0.0), 0.0);
    assert_eq!(report["per_annotator"]["ann"], *pooled);

    let neg = call(&app, "GET", "/api/export/negatives", None).await;
    assert_eq!(neg.status, StatusCode::OK);
    assert_eq!(neg.content_type, "application/x-ndjson");
    let ids: BTreeSet<String> = neg
        .body
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["record"]["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids, bad_ids);

    // the store on disk rebuilds the same report, and a restart resumes
    let from_disk = serde_json::to_value(report_from_store(dir.path()).unwrap()).unwrap();
    assert_eq!(from_disk, report);
    let restarted = server::router(single(12, Some(dir.path())), None);
    assert_eq!(next(&restarted, "ann").await["done"], true);
}

fn pair_datasets(dir: &Path) -> (PathBuf, PathBuf) {
    let a = records();
    let b: Vec<TaskRecord> = a
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.id = format!("b-{}", r.id);
            r
        })
        .collect();
    let (pa, pb) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    std::fs::write(&pa, forge_core::util::to_jsonl(&a).unwrap()).unwrap();
    std::fs::write(&pb, forge_core::util::to_jsonl(&b).unwrap()).unwrap();
    (pa, pb)
}

#[tokio::test]
async fn pairwise_sides_are_blind_and_randomized() {
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = pair_datasets(dir.path());
    let config = ReviewConfig {
        sample_size: 20,
        seed: 5,
        store: Some(dir.path().to_path_buf()),
        ..ReviewConfig::default()
    };
    let service = Arc::new(pairwise_service(("forge", &pa), ("baseline", &pb), config).unwrap());
    let app = server::router(service.clone(), None);
    let mut forge_left = 0;
    let mut wins: HashMap<&str, usize> = HashMap::new();
    for i in 0..20 {
        let item = next(&app, "ann").await;
        assert_eq!(item["mode"], "pairwise");
        assert_eq!(item["record"], Value::Null);
        let text = item.to_string();
        assert!(
            !text.contains("forge") && !text.contains("baseline"),
            "system names leaked"
        );
        let [l, r] = [&item["pair"][0], &item["pair"][1]];
        assert_eq!(l["document_id"], r["document_id"]);
        assert_ne!(l["record_id"], r["record_id"]);
        let left_is_forge = !l["record_id"].as_str().unwrap().starts_with("b-");
        forge_left += left_is_forge as usize;

        let body = |left: &Value, right: &Value, verdict: &str| {
            json!({
                "left_id": left["record_id"], "right_id": right["record_id"],
                "document_id": left["document_id"], "verdict": verdict, "annotator": "ann",
            })
        };
        // sides must match the served orientation
        let swapped = call(&app, "POST", "/api/pairwise", Some(body(r, l, "tie"))).await;
        assert_eq!(swapped.status, StatusCode::CONFLICT);
        let mut wrong_doc = body(l, r, "tie");
        wrong_doc["document_id"] = json!("elsewhere");
        assert_eq!(
            call(&app, "POST", "/api/pairwise", Some(wrong_doc))
                .await
                .status,
            StatusCode::BAD_REQUEST
        );

        // forge wins the first 12 comparisons, ties 6, loses 2
        let forge_verdict = if i < 12 {
            "win"
        } else if i < 18 {
            "tie"
        } else {
            "lose"
        };
        *wins.entry(forge_verdict).or_default() += 1;
        let verdict = match (forge_verdict, left_is_forge) {
            ("tie", _) => "tie",
            ("win", true) | ("lose", false) => "left_win",
            _ => "right_win",
        };
        let ok = call(&app, "POST", "/api/pairwise", Some(body(l, r, verdict))).await;
        assert_eq!(ok.status, StatusCode::OK, "{}", ok.body);
        assert!(ok.json().get("left_system").is_none());
    }
    assert!(
        (3..=17).contains(&forge_left),
        "sides never vary: {forge_left}"
    );
    assert_eq!(next(&app, "ann").await["done"], true);

    let report = call(&app, "GET", "/api/report", None).await.json();
    let forge = report["pairwise"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["subject"] == "forge")
        .unwrap()
        .clone();
    assert_eq!(forge["judged"], 20);
    let rounded: Vec<f64> = forge["rounded"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(rounded, vec![60.0, 30.0, 10.0]);
    let baseline = report["pairwise"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["subject"] == "baseline")
        .unwrap()
        .clone();
    let rounded: Vec<f64> = baseline["rounded"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(rounded, vec![10.0, 30.0, 60.0]);

    // system names are kept server-side in the store
    let stored = std::fs::read_to_string(dir.path().join("pairwise.jsonl")).unwrap();
    assert_eq!(stored.lines().count(), 20);
    assert!(stored.contains("\"left_system\""));
    assert_eq!(
        serde_json::to_value(report_from_store(dir.path()).unwrap()).unwrap(),
        report
    );
}

#[tokio::test]
async fn pairwise_needs_shared_documents_and_distinct_names() {
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = pair_datasets(dir.path());
    assert!(pairwise_service(("x", &pa), ("x", &pb), ReviewConfig::default()).is_err());
    let mut other: Vec<TaskRecord> = records();
    for r in &mut other {
        r.document.id = format!("other/{}", r.document.id);
    }
    let po = dir.path().join("other.jsonl");
    std::fs::write(&po, forge_core::util::to_jsonl(&other).unwrap()).unwrap();
    assert!(pairwise_service(("a", &pa), ("o", &po), ReviewConfig::default()).is_err());
}

#[tokio::test]
async fn root_serves_a_page() {
    let app = server::router(single(5, None), None);
    let r = call(&app, "GET", "/", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert!(r.content_type.starts_with("text/html"));

    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<p>board</p>").unwrap();
    let app = server::router(single(5, None), Some(ui.path().to_path_buf()));
    assert_eq!(call(&app, "GET", "/", None).await.body, "<p>board</p>");
    assert_eq!(
        call(&app, "GET", "/api/report", None).await.status,
        StatusCode::OK
    );
}
