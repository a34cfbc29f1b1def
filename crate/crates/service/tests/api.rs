mod common;

use std::collections::HashSet;

use axum::http::StatusCode;
use closet_core::catalog::write_catalog_files;
use closet_core::Category;
use closet_service::{router, AppState, ServiceConfig};
use common::{fixture, json, send};
use serde_json::{json, Value};

#[tokio::test]
async fn items_paginate_in_file_order() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<_> = (0..25)
        .map(|i| (format!("it{i:02}"), if i < 20 { Category::Tops } else { Category::Shoes }, format!("img/{i}.png")))
        .collect();
    let vecs = closet_core::synth::gaussian_vectors(25, 8, 1);
    let (c, e) = (dir.path().join("c.jsonl"), dir.path().join("e.kkem"));
    write_catalog_files(&items, 8, &vecs, &c, &e).unwrap();
    let cfg = ServiceConfig {
        catalog: Some(c),
        embeddings: Some(e),
        page_size: 10,
        ..Default::default()
    };
    let app = router(AppState::load(&cfg).unwrap());

    let mut seen = Vec::new();
    for (page, want) in [(0, 10), (1, 10), (2, 5), (3, 0)] {
        let (s, body) = json(&app, "GET", &format!("/items?page={page}"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(body["total"], 25);
        assert_eq!(body["pages"], 3);
        assert_eq!(body["page_size"], 10);
        let ids: Vec<String> = body["items"].as_array().unwrap().iter().map(|i| i["id"].as_str().unwrap().to_owned()).collect();
        assert_eq!(ids.len(), want, "page {page}");
        seen.extend(ids);
    }
    assert_eq!(seen, items.iter().map(|i| i.0.clone()).collect::<Vec<_>>());

    let (s, body) = json(&app, "GET", "/items?category=shoes", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["total"], 5);
    assert_eq!(body["items"][0], json!({"id": "it20", "category": "shoes", "image_ref": "img/20.png"}));

    let (s, body) = json(&app, "GET", "/items?category=hats", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["items"], json!([]));
    assert_eq!(body["pages"], 0);

    let (s, body) = json(&app, "GET", "/items?category=capes", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("capes"));
    let (s, _) = json(&app, "GET", "/items?page=minus", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

fn entries(body: &Value) -> &Vec<Value> {
    body["entries"].as_array().unwrap()
}

#[tokio::test]
async fn similar_search_returns_tiered_results() {
    let f = fixture();
    let app = f.app();
    let (s, body) = json(&app, "POST", "/search/similar", Some(json!({"ref_id": "s03-tops-0"}))).await;
    assert_eq!(s, StatusCode::OK);
    let es = entries(&body);
    assert_eq!(es.len(), 12);
    assert_eq!(body["n"], 12);
    for (i, e) in es.iter().enumerate() {
        let want = match i {
            0..6 => "ACCURATE",
            6..9 => "APPROXIMATE",
            _ => "HEURISTIC",
        };
        assert_eq!(e["tier"], want, "{i}");
        assert_eq!(e["category"], "tops");
        assert_ne!(e["id"], "s03-tops-0");
    }
    let ids: HashSet<&str> = es.iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 12);
    assert!(es[..6].iter().enumerate().all(|(i, e)| e["rank"] == i + 1));

    let (s, body) = json(&app, "POST", "/search/similar", Some(json!({"ref_id": "s03-tops-0", "n": 20}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(entries(&body).len(), 20);

    let (s, _) = json(&app, "POST", "/search/similar", Some(json!({"ref_id": "nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json(&app, "POST", "/search/similar", Some(json!({"ref_id": "s03-tops-0", "n": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = json(&app, "POST", "/search/similar", Some(json!({"ref_id": "s03-tops-0", "n": 500}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "category has 120 items");
    let (s, _) = json(&app, "POST", "/search/similar", Some(json!({"id": "s03-tops-0"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn feedback_search_accepts_keys_and_vectors() {
    let f = fixture();
    let app = f.app();
    let (s, keys) = json(&app, "GET", "/feedback/keys", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(keys["keys"].as_array().unwrap().contains(&json!("colorful-top")));

    let req = json!({"ref_id": "s01-bottoms-0", "text_key": "colorful-top"});
    let (s, body) = json(&app, "POST", "/search/feedback", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(entries(&body).len(), 12);
    assert!(entries(&body).iter().all(|e| e["id"] != "s01-bottoms-0"));
    let (a, b) = (send(&app, "POST", "/search/feedback", Some(req.clone())).await, send(&app, "POST", "/search/feedback", Some(req)).await);
    assert_eq!(a, b);

    let v: Vec<f32> = f.state.texts["colorful-top"].clone();
    let (s, by_vec) = json(&app, "POST", "/search/feedback", Some(json!({"ref_id": "s01-bottoms-0", "text_embedding": v}))).await;
    assert_eq!(s, StatusCode::OK);
    let ids = |b: &Value| entries(b).iter().map(|e| e["id"].clone()).collect::<Vec<_>>();
    assert_eq!(ids(&by_vec)[..6], ids(&body)[..6], "accurate prefix does not depend on the seed");

    let bad = json!({"ref_id": "s01-bottoms-0", "text_embedding": [0.5, 0.5]});
    assert_eq!(json(&app, "POST", "/search/feedback", Some(bad)).await.0, StatusCode::BAD_REQUEST);
    let unknown = json!({"ref_id": "s01-bottoms-0", "text_key": "glittery"});
    assert_eq!(json(&app, "POST", "/search/feedback", Some(unknown)).await.0, StatusCode::NOT_FOUND);
    let both = json!({"ref_id": "s01-bottoms-0", "text_key": "colorful-top", "text_embedding": [0.0]});
    assert_eq!(json(&app, "POST", "/search/feedback", Some(both)).await.0, StatusCode::BAD_REQUEST);
    let neither = json!({"ref_id": "s01-bottoms-0"});
    assert_eq!(json(&app, "POST", "/search/feedback", Some(neither)).await.0, StatusCode::BAD_REQUEST);
    let missing = json!({"ref_id": "zzz", "text_key": "colorful-top"});
    assert_eq!(json(&app, "POST", "/search/feedback", Some(missing)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn recommendations_follow_the_setting() {
    let f = fixture();
    let app = f.app();
    let tone = json!({"ref_id": "s05-tops-0", "targets": ["bottoms", "shoes", "bags"], "setting": "TONE_SUR_TONE"});
    let (s, a) = json(&app, "POST", "/recommend", Some(tone.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let mut with_seed = tone.clone();
    with_seed["seed"] = json!(77);
    let (_, b) = json(&app, "POST", "/recommend", Some(with_seed)).await;
    assert_eq!(a["outfit"], b["outfit"], "tone sur tone ignores the seed");
    assert_eq!(a["outfit"].as_object().unwrap().len(), 3);
    for slot in a["slots"].as_array().unwrap() {
        let c = slot["category"].as_str().unwrap();
        assert_eq!(slot["item"]["category"], c);
        assert_eq!(a["outfit"][c], slot["item"]["id"]);
        let alts = slot["alternates"].as_array().unwrap();
        assert!(alts.len() <= 8 && !alts.is_empty());
        assert!(alts.iter().all(|x| x["category"] == c && x["id"] != slot["item"]["id"]));
    }

    let mix = |seed: u64| json!({"ref_id": "s05-tops-0", "targets": ["bottoms", "shoes", "bags"], "setting": "MIX_AND_MATCH", "seed": seed});
    let (_, m1) = json(&app, "POST", "/recommend", Some(mix(1))).await;
    let (_, m1b) = json(&app, "POST", "/recommend", Some(mix(1))).await;
    assert_eq!(m1, m1b);
    let mut differs = 0;
    for seed in 2..12 {
        let (_, m) = json(&app, "POST", "/recommend", Some(mix(seed))).await;
        assert_eq!(m["seed"], seed);
        differs += usize::from(m["outfit"] != m1["outfit"]);
    }
    assert!(differs >= 8, "{differs}");

    let (_, default_setting) = json(&app, "POST", "/recommend", Some(json!({"ref_id": "s05-tops-0", "targets": ["shoes"]}))).await;
    assert_eq!(default_setting["setting"], "TONE_SUR_TONE");

    let r = |v: Value| async { json(&app, "POST", "/recommend", Some(v)).await.0 };
    assert_eq!(r(json!({"ref_id": "s05-tops-0", "targets": ["tops"]})).await, StatusCode::BAD_REQUEST);
    assert_eq!(r(json!({"ref_id": "s05-tops-0", "targets": []})).await, StatusCode::BAD_REQUEST);
    assert_eq!(r(json!({"ref_id": "s05-tops-0", "targets": ["capes"]})).await, StatusCode::BAD_REQUEST);
    assert_eq!(r(json!({"ref_id": "ghost", "targets": ["shoes"]})).await, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn tryon_stub_is_deterministic() {
    let f = fixture();
    let app = f.app();
    let (s, persons) = json(&app, "GET", "/persons", None).await;
    assert_eq!(s, StatusCode::OK);
    let person = persons["persons"][0]["id"].as_str().unwrap().to_owned();
    let (s, pimg) = send(&app, "GET", persons["persons"][0]["image_ref"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(pimg.starts_with(b"\x89PNG"));

    let req = json!({"person_id": person, "garment_id": "s02-tops-1"});
    let (s, body) = json(&app, "POST", "/tryon", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["stub"], true);
    let uri = body["image_ref"].as_str().unwrap().to_owned();
    let (s, img1) = send(&app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, img2) = send(&app, "GET", &uri, None).await;
    assert_eq!(img1, img2);
    let decoded = image::load_from_memory(&img1).unwrap();
    assert_eq!(image::load_from_memory(&pimg).unwrap().width(), decoded.width());
    assert_ne!(img1, pimg, "garment pasted");

    let (_, other) = json(&app, "POST", "/tryon", Some(json!({"person_id": person, "garment_id": "s02-shoes-1"}))).await;
    let (_, img3) = send(&app, "GET", other["image_ref"].as_str().unwrap(), None).await;
    assert_ne!(img1, img3);

    let (s, _) = json(&app, "POST", "/tryon", Some(json!({"person_id": person, "garment_id": "nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json(&app, "POST", "/tryon", Some(json!({"person_id": "nobody", "garment_id": "s02-tops-1"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = send(&app, "GET", "/tryon/image?person_id=nobody&garment_id=s02-tops-1", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, img) = send(&app, "GET", "/items/s02-tops-1/image", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(img.starts_with(b"\x89PNG"));
}

#[tokio::test]
async fn repeated_requests_are_byte_identical() {
    let f = fixture();
    let app = f.app();
    let calls: Vec<(&str, &str, Option<Value>)> = vec![
        ("GET", "/items?category=shoes&page=1", None),
        ("POST", "/search/similar", Some(json!({"ref_id": "s07-hats-0", "n": 16}))),
        ("POST", "/search/feedback", Some(json!({"ref_id": "s07-hats-0", "text_key": "more-formal"}))),
        ("POST", "/recommend", Some(json!({"ref_id": "s07-hats-0", "targets": ["tops", "shoes"], "setting": "MIX_AND_MATCH"}))),
        ("POST", "/tryon", Some(json!({"person_id": "model-1", "garment_id": "s07-hats-0"}))),
    ];
    for (method, uri, body) in calls {
        let (s, first) = send(&app, method, uri, body.clone()).await;
        assert_eq!(s, StatusCode::OK, "{uri}");
        for _ in 0..20 {
            assert_eq!(send(&app, method, uri, body.clone()).await.1, first, "{uri}");
        }
    }
}
