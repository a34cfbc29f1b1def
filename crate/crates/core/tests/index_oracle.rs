use std::sync::Arc;

use closet_core::index::{recall_against_oracle, IndexError, SearchParams};
use closet_core::synth::{gaussian_store, gaussian_vectors};
use closet_core::{EmbeddingStore, IndexConfig, IndexKind, VectorIndex};
use proptest::prelude::*;

/// Naive exact ranking in f64: (id, score) sorted by score desc, id asc.
fn naive(store: &EmbeddingStore, q: &[f32], k: usize) -> Vec<(String, f64)> {
    let qn = q.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = (0..store.len())
        .map(|r| {
            let s = store.row(r).iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / qn;
            (store.id(r).to_owned(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn store_with_duplicates(vecs: Vec<Vec<f32>>, dups: usize) -> EmbeddingStore {
    let dim = vecs[0].len();
    let mut rows: Vec<(String, Vec<f32>)> = vecs.into_iter().enumerate().map(|(i, v)| (format!("i{i:04}"), v)).collect();
    for j in 0..dups.min(rows.len()) {
        let v = rows[j].1.clone();
        rows.push((format!("dup{j:03}"), v));
    }
    EmbeddingStore::from_vectors(dim, rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flat_matches_a_naive_scan(n in 2usize..120, dim in 1usize..12, dups in 0usize..6, seed in any::<u64>(), kf in 0.0f64..1.0) {
        let store = Arc::new(store_with_duplicates(gaussian_vectors(n, dim, seed), dups));
        let index = VectorIndex::flat(Arc::clone(&store)).unwrap();
        let k = 1 + ((store.len() - 1) as f64 * kf) as usize;
        for q in gaussian_vectors(3, dim, seed ^ 0x5eed) {
            let got = index.query(&q, k).unwrap();
            let want = naive(&store, &q, k);
            prop_assert_eq!(got.hits.len(), k);
            for (h, (id, s)) in got.hits.iter().zip(&want) {
                prop_assert!((h.score as f64 - s).abs() < 1e-5, "{} vs {}", h.score, s);
                // Ids may only differ where scores tie within float noise.
                if &h.id != id {
                    prop_assert!((h.score as f64 - s).abs() < 1e-6);
                }
            }
            prop_assert!(got.hits.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id)));
        }
    }

    #[test]
    fn every_kind_orders_its_hits(seed in any::<u64>(), kind_i in 0usize..4) {
        let store = Arc::new(gaussian_store(400, 8, seed));
        let cfg = IndexConfig { ivf_nlist: 8, ivf_nprobe: 4, forest_n_trees: 4, seed, ..IndexConfig::with_kind(IndexKind::ALL[kind_i]) };
        let index = VectorIndex::build(Arc::clone(&store), cfg).unwrap();
        let q = &gaussian_vectors(1, 8, seed.wrapping_add(1))[0];
        let hits = index.query(q, 20).unwrap().hits;
        let mut ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), hits.len());
        prop_assert!(hits.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id)));
    }
}

#[test]
fn duplicate_vectors_tie_break_by_id() {
    let v = vec![0.3, -0.2, 0.9];
    let store = Arc::new(
        EmbeddingStore::from_vectors(3, [("b".to_owned(), v.clone()), ("a".to_owned(), v.clone()), ("c".to_owned(), vec![1.0, 0.0, 0.0])])
            .unwrap(),
    );
    for kind in IndexKind::ALL {
        let cfg = IndexConfig { ivf_nlist: 1, ivf_nprobe: 1, ..IndexConfig::with_kind(kind) };
        let index = VectorIndex::build(Arc::clone(&store), cfg).unwrap();
        assert_eq!(index.query(&v, 2).unwrap().ids(), ["a", "b"], "{kind}");
    }
}

#[test]
fn persistence_round_trips_for_every_kind() {
    let store = Arc::new(gaussian_store(3000, 16, 21));
    let other = Arc::new(gaussian_store(3000, 16, 22));
    let queries = gaussian_vectors(25, 16, 23);
    for kind in IndexKind::ALL {
        let cfg = IndexConfig { ivf_nlist: 32, ..IndexConfig::with_kind(kind) };
        let index = VectorIndex::build(Arc::clone(&store), cfg).unwrap();
        let bytes = index.save();
        let back = VectorIndex::load(&bytes, Arc::clone(&store)).unwrap();
        assert!(back == index, "{kind}");
        for q in &queries {
            assert_eq!(back.query(q, 10).unwrap().hits, index.query(q, 10).unwrap().hits);
        }
        assert!(matches!(VectorIndex::load(&bytes, Arc::clone(&other)), Err(IndexError::HashMismatch)), "{kind}");
        assert!(VectorIndex::load(&bytes[..bytes.len() / 2], Arc::clone(&store)).is_err());
    }
}

#[test]
fn concurrent_queries_agree_with_serial_ones() {
    let store = Arc::new(gaussian_store(5000, 16, 31));
    let index = Arc::new(VectorIndex::build(Arc::clone(&store), IndexConfig::default()).unwrap());
    let queries = gaussian_vectors(64, 16, 32);
    let serial: Vec<_> = queries.iter().map(|q| index.query(q, 10).unwrap().hits).collect();
    std::thread::scope(|s| {
        for t in 0..8 {
            let (index, queries, serial) = (&index, &queries, &serial);
            s.spawn(move || {
                for (i, q) in queries.iter().enumerate().skip(t % 4) {
                    assert_eq!(&index.query(q, 10).unwrap().hits, &serial[i]);
                }
            });
        }
    });
}

#[test]
fn small_store_recall_and_search_overrides() {
    let store = Arc::new(gaussian_store(2000, 16, 41));
    let flat = VectorIndex::flat(Arc::clone(&store)).unwrap();
    let queries = gaussian_vectors(50, 16, 42);
    let hnsw = VectorIndex::build(Arc::clone(&store), IndexConfig::default()).unwrap();
    assert!(recall_against_oracle(&hnsw, &flat, &queries, 10).unwrap() >= 0.95);
    let ivf = VectorIndex::build(Arc::clone(&store), IndexConfig { ivf_nlist: 16, ..IndexConfig::with_kind(IndexKind::Ivf) }).unwrap();
    let all = SearchParams { ivf_nprobe: Some(16), ..Default::default() };
    assert_eq!(closet_core::index::recall_with(&ivf, &flat, &queries, 10, all).unwrap(), 1.0);
}
