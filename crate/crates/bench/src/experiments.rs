//! The synthetic training tasks, packaged with their pass thresholds.

use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::Context;
use closet_core::combiner::{train_combiner, CombinerParams, CombinerTrainConfig};
use closet_core::retrieval::feedback_search;
use closet_core::synth::{cluster_hit_rate, feedback_task, style_cluster_task, FeedbackSpec, StyleClusterSpec};
use closet_core::transformer::{train, TrainConfig, TransformerConfig, TransformerParams};
use closet_core::VectorIndex;

pub const LOSS_RATIO_MAX: f64 = 0.5;
pub const CLUSTER_HIT_MIN: f64 = 0.7;
pub const FEEDBACK_TOP10_MIN: f64 = 0.8;
pub const OUT_SLOT_COUNTS: [usize; 3] = [1, 2, 9];


#[derive(Debug, Clone)]
pub struct OutfitTaskReport {
    pub initial_loss: f64,
    pub loss_trace: Vec<f64>,
    pub ratio: f64,
    /// (OUT slot count, hit rate before training, after training).
    pub hits: Vec<(usize, f64, f64)>,
    pub params: TransformerParams,
}

impl OutfitTaskReport {
    pub fn passed(&self) -> bool {
        self.ratio < LOSS_RATIO_MAX && self.hits.iter().all(|h| h.2 >= CLUSTER_HIT_MIN)
    }
}

/// Trains the desk-scale transformer on the style-cluster task (50 epochs)
/// and measures held-out cluster hits for 1, 2 and 9 OUT slots.
pub fn outfit_task(seed: u64) -> anyhow::Result<OutfitTaskReport> {
    let spec = StyleClusterSpec {
        seed,
        ..Default::default()
    };
    let task = style_cluster_task(&spec);
    let init = TransformerParams::init(TransformerConfig::desk(spec.dim), seed)?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let (params, report) = train(&init, &task.catalog, &task.train_outfits, &cfg)?;
    let index = VectorIndex::flat(Arc::clone(task.catalog.store()))?;
    let mut hits = Vec::new();
    for n_out in OUT_SLOT_COUNTS {
        let rate = |p: &TransformerParams| cluster_hit_rate(&task, p, &index, n_out, seed).map_err(|e| anyhow::anyhow!(e));
        let (before, after) = (rate(&init)?, rate(&params)?);
        hits.push((n_out, before, after));
    }
    Ok(OutfitTaskReport {
        initial_loss: report.initial_loss,
        ratio: report.loss_ratio().context("no epochs ran")?,
        loss_trace: report.loss_trace,
        hits,
        params,
    })
}

#[derive(Debug, Clone)]
pub struct CombinerTaskReport {
    pub loss_trace: Vec<f64>,
    pub ratio: f64,
    /// Held-out queries whose target is in the top 10.
    pub top10: f64,
    pub params: CombinerParams,
}

impl CombinerTaskReport {
    pub fn passed(&self) -> bool {
        self.ratio < LOSS_RATIO_MAX && self.top10 >= FEEDBACK_TOP10_MIN
    }
}

/// Trains the combiner on `target = normalize(ref + text)` triples and
/// checks held-out feedback retrieval.
pub fn combiner_task(seed: u64) -> anyhow::Result<CombinerTaskReport> {
    let spec = FeedbackSpec {
        seed,
        ..Default::default()
    };
    let task = feedback_task(&spec);
    let init = CombinerParams::init_default(spec.dim, seed);
    let cfg = CombinerTrainConfig {
        seed,
        ..Default::default()
    };
    let (params, trace) = train_combiner(&init, &task.train, &cfg)?;
    let first = *trace.first().context("no epochs ran")?;
    let ratio = trace[trace.len() - 1] / first;
    let index = VectorIndex::flat(Arc::clone(task.catalog.store()))?;
    let mut found = 0;
    for q in &task.held_out {
        let top = feedback_search(&task.catalog, &index, &q.reference_id, &q.text, 10, &params)?;
        found += usize::from(top.iter().any(|h| h.id == q.target_id));
    }
    Ok(CombinerTaskReport {
        loss_trace: trace,
        ratio,
        top10: found as f64 / task.held_out.len().max(1) as f64,
        params,
    })
}

fn trace_line(trace: &[f64]) -> String {
    trace.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(" ")
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Human-readable report of both tasks. Contains no timings, so the text is
/// a pure function of the seeds.
pub fn render(outfit: &OutfitTaskReport, comb: &CombinerTaskReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "outfit transformer (style clusters, 50 epochs)");
    let _ = writeln!(s, "  initial loss {:.4}", outfit.initial_loss);
    let _ = writeln!(s, "  epoch losses {}", trace_line(&outfit.loss_trace));
    let _ = writeln!(
        s,
        "  {} final/initial loss ratio {:.4} (< {LOSS_RATIO_MAX})",
        verdict(outfit.ratio < LOSS_RATIO_MAX),
        outfit.ratio
    );
    for (n, before, after) in &outfit.hits {
        let _ = writeln!(
            s,
            "  {} {n} OUT slot(s): cluster hit rate {after:.3} (untrained {before:.3}, >= {CLUSTER_HIT_MIN})",
            verdict(*after >= CLUSTER_HIT_MIN)
        );
    }
    let _ = writeln!(s, "combiner (additive feedback triples)");
    let _ = writeln!(s, "  epoch losses {}", trace_line(&comb.loss_trace));
    let _ = writeln!(
        s,
        "  {} last/first loss ratio {:.4} (< {LOSS_RATIO_MAX})",
        verdict(comb.ratio < LOSS_RATIO_MAX),
        comb.ratio
    );
    let _ = writeln!(
        s,
        "  {} held-out target in top 10: {:.3} (>= {FEEDBACK_TOP10_MIN})",
        verdict(comb.top10 >= FEEDBACK_TOP10_MIN),
        comb.top10
    );
    s
}
