//! Query timing, index sweeps and the recall/latency/memory table.

use std::sync::Arc;
use std::time::Instant;

use closet_core::index::{recall_against_oracle, IndexError};
use closet_core::synth::{gaussian_store, gaussian_vectors};
use closet_core::{EmbeddingStore, IndexConfig, IndexKind, VectorIndex};
use serde::Serialize;

pub const WARMUP_QUERIES: usize = 100;

/// Seed offsets so stores, queries and warm-up queries never share a stream.
const QUERY_STREAM: u64 = 0x51_7e55;
const WARMUP_STREAM: u64 = 0x3a_2b1c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub mean_us: f64,
    pub p99_us: f64,
}

/// Runs the warm-up queries, then times each measured query separately.
pub fn time_queries(index: &VectorIndex, queries: &[Vec<f32>], warmup: &[Vec<f32>], k: usize) -> Result<Timing, IndexError> {
    for q in warmup {
        std::hint::black_box(index.query(q, k)?);
    }
    let mut us = Vec::with_capacity(queries.len());
    for q in queries {
        let t = Instant::now();
        std::hint::black_box(index.query(q, k)?);
        us.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(summarize(&mut us))
}

fn summarize(us: &mut [f64]) -> Timing {
    if us.is_empty() {
        return Timing { mean_us: 0.0, p99_us: 0.0 };
    }
    us.sort_by(f64::total_cmp);
    let mean_us = us.iter().sum::<f64>() / us.len() as f64;
    let rank = ((0.99 * us.len() as f64).ceil() as usize).clamp(1, us.len());
    Timing { mean_us, p99_us: us[rank - 1] }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub dim: usize,
    pub k: usize,
    pub queries: Vec<Vec<f32>>,
    pub warmup: Vec<Vec<f32>>,
}

impl Workload {
    pub fn new(dim: usize, k: usize, n_queries: usize, seed: u64) -> Self {
        Self {
            dim,
            k,
            queries: gaussian_vectors(n_queries, dim, seed ^ QUERY_STREAM),
            warmup: gaussian_vectors(WARMUP_QUERIES, dim, seed ^ WARMUP_STREAM),
        }
    }
}

/// Store of `size` Gaussian unit vectors for a given seed.
pub fn bench_store(size: usize, dim: usize, seed: u64) -> Arc<EmbeddingStore> {
    Arc::new(gaussian_store(size, dim, seed.wrapping_add(size as u64)))
}

pub fn build(store: &Arc<EmbeddingStore>, kind: IndexKind, seed: u64) -> Result<(VectorIndex, f64), IndexError> {
    let t = Instant::now();
    let cfg = IndexConfig {
        seed,
        ..IndexConfig::with_kind(kind)
    };
    let index = VectorIndex::build(Arc::clone(store), cfg)?;
    Ok((index, t.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub size: usize,
    pub kind: IndexKind,
    pub mean_us: f64,
    pub p99_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub kind: IndexKind,
    pub mean_us: f64,
    pub recall: f64,
    pub bytes: usize,
}

/// Everything measured for one store size: timings, recall and footprint
/// of every kind. Sweeps and tables are projections of this.
#[derive(Debug, Clone)]
pub struct SizeReport {
    pub size: usize,
    pub rows: Vec<KindReport>,
}

#[derive(Debug, Clone)]
pub struct KindReport {
    pub kind: IndexKind,
    pub timing: Timing,
    pub recall: f64,
    pub bytes: usize,
    pub build_secs: f64,
}

impl SizeReport {
    pub fn get(&self, kind: IndexKind) -> Option<&KindReport> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn sweep_rows(&self) -> Vec<SweepRow> {
        self.rows
            .iter()
            .map(|r| SweepRow {
                size: self.size,
                kind: r.kind,
                mean_us: r.timing.mean_us,
                p99_us: r.timing.p99_us,
            })
            .collect()
    }

    pub fn table_rows(&self) -> Vec<TableRow> {
        self.rows
            .iter()
            .map(|r| TableRow {
                kind: r.kind,
                mean_us: r.timing.mean_us,
                recall: r.recall,
                bytes: r.bytes,
            })
            .collect()
    }
}

/// Builds every kind over one store of `size` vectors and measures it.
/// `on_index` sees each built index, e.g. for extra measurements.
pub fn measure_size(
    size: usize,
    work: &Workload,
    kinds: &[IndexKind],
    seed: u64,
    mut on_index: impl FnMut(&VectorIndex, &VectorIndex) -> Result<(), IndexError>,
) -> Result<SizeReport, IndexError> {
    let store = bench_store(size, work.dim, seed);
    let oracle = VectorIndex::flat(Arc::clone(&store))?;
    let mut rows = Vec::new();
    for &kind in kinds {
        let (index, build_secs) = build(&store, kind, seed)?;
        tracing::info!(size, %kind, build_secs, "index built");
        let timing = time_queries(&index, &work.queries, &work.warmup, work.k)?;
        let recall = recall_against_oracle(&index, &oracle, &work.queries, work.k)?;
        on_index(&index, &oracle)?;
        rows.push(KindReport {
            kind,
            timing,
            recall,
            bytes: index.memory_footprint().total(),
            build_secs,
        });
    }
    Ok(SizeReport { size, rows })
}

pub fn write_csv<W: std::io::Write, R: Serialize>(out: W, rows: &[R]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_uses_nearest_rank() {
        let mut v: Vec<f64> = (1..=200).map(f64::from).collect();
        let t = summarize(&mut v);
        assert_eq!(t.p99_us, 198.0);
        assert_eq!(t.mean_us, 100.5);
        let mut one = vec![7.0];
        assert_eq!(summarize(&mut one), Timing { mean_us: 7.0, p99_us: 7.0 });
    }

    #[test]
    fn small_sweep_has_one_row_per_size_and_kind() {
        let work = Workload::new(8, 10, 20, 1);
        let mut rows = Vec::new();
        for size in [500, 1500] {
            rows.extend(measure_size(size, &work, &IndexKind::ALL, 1, |_, _| Ok(())).unwrap().sweep_rows());
        }
        assert_eq!(rows.len(), 8);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("size,kind,mean_us,p99_us\n500,FLAT,"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn table_non_timing_columns_reproduce() {
        let work = Workload::new(8, 10, 30, 2);
        let a = measure_size(2000, &work, &IndexKind::ALL, 2, |_, _| Ok(())).unwrap().table_rows();
        let b = measure_size(2000, &work, &IndexKind::ALL, 2, |_, _| Ok(())).unwrap().table_rows();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.kind, x.recall, x.bytes), (y.kind, y.recall, y.bytes));
        }
        assert_eq!(a[0].recall, 1.0);
        let mut buf = Vec::new();
        write_csv(&mut buf, &a).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("kind,mean_us,recall,bytes\n"));
    }
}
