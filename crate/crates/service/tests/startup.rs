mod common;

use std::process::Command;

use closet_core::IndexKind;
use closet_service::{AppState, ServiceConfig, StartupError};
use common::config_for;

#[test]
fn index_cache_is_written_then_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("index.kkix");
    let cfg = ServiceConfig {
        index_cache: Some(cache.clone()),
        ..config_for(&dir)
    };
    let first = AppState::load(&cfg).unwrap();
    let bytes = std::fs::read(&cache).unwrap();
    assert_eq!(bytes, first.index.save());
    let second = AppState::load(&cfg).unwrap();
    assert!(second.index == first.index);

    // A different kind rebuilds and overwrites the cache.
    let mut flat = cfg.clone();
    flat.index.kind = IndexKind::Flat;
    assert_eq!(AppState::load(&flat).unwrap().index.kind(), IndexKind::Flat);
    assert_ne!(std::fs::read(&cache).unwrap(), bytes);

    // Garbage in the cache is replaced, not fatal.
    std::fs::write(&cache, b"junk").unwrap();
    assert_eq!(AppState::load(&cfg).unwrap().index.kind(), IndexKind::Hnsw);
}

#[test]
fn bad_inputs_fail_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_for(&dir);
    let missing = ServiceConfig {
        embeddings: Some(dir.path().join("absent.kkem")),
        ..cfg.clone()
    };
    assert!(matches!(AppState::load(&missing), Err(StartupError::Catalog(_))));
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model").unwrap();
    let bad_model = ServiceConfig {
        transformer: Some(junk.clone()),
        ..cfg.clone()
    };
    assert!(matches!(AppState::load(&bad_model), Err(StartupError::Transformer { .. })));
    let bad_comb = ServiceConfig {
        combiner: Some(junk),
        ..cfg.clone()
    };
    assert!(matches!(AppState::load(&bad_comb), Err(StartupError::Combiner { .. })));
    let small = ServiceConfig { page_size: 2, ..cfg };
    assert!(matches!(AppState::load(&small), Err(StartupError::Config(_))));
}

#[test]
fn binary_exits_nonzero_on_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kk.toml");
    std::fs::write(&path, "catalog = \"nothing.jsonl\"\nembeddings = \"nothing.kkem\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_closet-service"))
        .env("KK_CONFIG", &path)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("startup failed") && err.contains("nothing.jsonl"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_closet-service"))
        .args(["--catalog", "x", "--embeddings", "y", "--index-kind", "btree"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
