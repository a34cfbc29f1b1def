//! Outfit datasets and the training loop.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nce_loss_with_grad, split_training_roles, PlacedItem, TransformerError, TransformerParams};
use crate::catalog::{Catalog, Category};
use crate::optim::{AdamW, StepLr};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutfitItemRef {
    pub id: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outfit {
    pub outfit_id: String,
    pub items: Vec<OutfitItemRef>,
}

/// Parses line-delimited outfit records. Outfits with two items of one
/// category are rejected: the sequence has one slot per category.
pub fn parse_outfits(text: &str) -> Result<Vec<Outfit>, TransformerError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let o: Outfit = serde_json::from_str(line).map_err(|e| TransformerError::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let mut seen = [false; Category::COUNT];
        for it in &o.items {
            if std::mem::replace(&mut seen[it.category.index()], true) {
                return Err(TransformerError::MalformedRecord {
                    line: i + 1,
                    reason: format!("outfit {} repeats category {}", o.outfit_id, it.category),
                });
            }
        }
        out.push(o);
    }
    Ok(out)
}

pub fn load_outfits(path: &Path) -> Result<Vec<Outfit>, TransformerError> {
    parse_outfits(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.3,
            step_size: 20,
            gamma: 0.5,
            epochs: 50,
            batch: 16,
            negatives: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the small synthetic tasks. The desk-scale model sees a
    /// few hundred outfits, so it needs a larger step than the default.
    pub fn desk() -> Self {
        Self { lr: 2e-3, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean loss of the untrained parameters over one pass of the data.
    pub initial_loss: f64,
    /// Mean loss per epoch (mean over every prediction of the epoch).
    pub loss_trace: Vec<f64>,
    /// Outfits dropped because they have fewer than two items.
    pub skipped_outfits: usize,
}

impl TrainReport {
    /// Last epoch's mean loss over the untrained loss.
    pub fn loss_ratio(&self) -> Option<f64> {
        let last = *self.loss_trace.last()?;
        (self.initial_loss > 0.0).then(|| last / self.initial_loss)
    }
}

/// One OUT slot of a training sample: slot index, positive, negatives.
type SlotJob = (usize, Vec<f64>, Vec<Vec<f64>>);

fn f64_row(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Trains on `outfits`, whose items are resolved against `catalog`.
/// Negatives for a positive are drawn uniformly from the other catalog items
/// of its category.
pub fn train(
    params: &TransformerParams,
    catalog: &Catalog,
    outfits: &[Outfit],
    cfg: &TrainConfig,
) -> Result<(TransformerParams, TrainReport), TransformerError> {
    let seq_len = params.config().seq_len;
    if catalog.dim() != params.config().dim {
        return Err(TransformerError::ShapeMismatch(format!(
            "catalog dim {} vs model dim {}",
            catalog.dim(),
            params.config().dim
        )));
    }
    let mut report = TrainReport::default();
    let mut placed: Vec<Vec<PlacedItem>> = Vec::new();
    for o in outfits {
        let items = o
            .items
            .iter()
            .map(|r| {
                let item = catalog.get(&r.id).ok_or_else(|| TransformerError::UnknownItem(r.id.clone()))?;
                Ok(PlacedItem {
                    category: item.category,
                    id: item.id.clone(),
                    embedding: catalog.embedding(item).to_vec(),
                })
            })
            .collect::<Result<Vec<_>, TransformerError>>()?;
        if items.len() < 2 {
            tracing::warn!(outfit = %o.outfit_id, "skipping outfit with fewer than two items");
            report.skipped_outfits += 1;
            continue;
        }
        super::check_outfit(&items, seq_len)?;
        placed.push(items);
    }
    let usable = placed
        .iter()
        .any(|o| o.iter().any(|it| catalog.category_size(it.category) > 1));
    if !usable {
        return Err(TransformerError::InsufficientData);
    }

    let mut params = params.clone();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(params.parameter_count(), cfg.weight_decay);
    let sched = StepLr {
        base: cfg.lr,
        step_size: cfg.step_size,
        gamma: cfg.gamma,
    };
    let no_decay = params.no_decay();
    let pools: Vec<Vec<usize>> = Category::ALL
        .iter()
        .map(|&c| catalog.items_by_category(c).map(|it| it.embedding_row).collect())
        .collect();
    let store = catalog.store().clone();
    let d = params.config().dim;
    let mut order: Vec<usize> = (0..placed.len()).collect();

    let make_jobs = |chunk: &[usize], rng: &mut ChaCha8Rng| -> Result<Vec<(super::OutfitSample, Vec<SlotJob>)>, TransformerError> {
        // Roles and negatives are drawn up front so the batch size N is
        // known before any gradient is scaled.
        let mut jobs = Vec::with_capacity(chunk.len());
        for &oi in chunk {
            let s = split_training_roles(&placed[oi], seq_len, rng)?;
            let mut slots = Vec::new();
            for i in s.out_slots() {
                let slot = &s.slots[i];
                let pool = &pools[i];
                let pos_row = catalog.get(slot.item_id.as_deref().unwrap_or_default()).map(|it| it.embedding_row);
                let want = (cfg.negatives + 1).min(pool.len());
                let negs: Vec<Vec<f64>> = sample(rng, pool.len(), want)
                    .into_iter()
                    .map(|k| pool[k])
                    .filter(|&r| Some(r) != pos_row)
                    .take(cfg.negatives)
                    .map(|r| f64_row(store.row(r)))
                    .collect();
                if negs.is_empty() {
                    continue;
                }
                let pos = f64_row(slot.embedding.as_deref().expect("training OUT slot has ground truth"));
                slots.push((i, pos, negs));
            }
            jobs.push((s, slots));
        }
        Ok(jobs)
    };
    // Summed loss and predictions-count of a batch; gradients of the batch
    // mean are accumulated into `grads`.
    let run_batch = |params: &TransformerParams,
                     jobs: &[(super::OutfitSample, Vec<SlotJob>)],
                     grads: &mut [f64]|
     -> Result<(f64, usize), TransformerError> {
        let n: usize = jobs.iter().map(|j| j.1.len()).sum();
        let mut batch_loss = 0.0;
        for (s, slots) in jobs {
            if slots.is_empty() {
                continue;
            }
            let mut local: Result<f64, TransformerError> = Ok(0.0);
            params.forward_backward(s, grads, |y| {
                let preds: Vec<Vec<f64>> = slots.iter().map(|(i, _, _)| y[i * d..(i + 1) * d].to_vec()).collect();
                let pos: Vec<Vec<f64>> = slots.iter().map(|s| s.1.clone()).collect();
                let negs: Vec<Vec<Vec<f64>>> = slots.iter().map(|s| s.2.clone()).collect();
                let mut dy = vec![0.0; y.len()];
                match nce_loss_with_grad(&preds, &pos, &negs) {
                    Ok((loss, g)) => {
                        // Rescale the per-sample mean to the batch mean.
                        let w = slots.len() as f64 / n as f64;
                        for ((i, _, _), gi) in slots.iter().zip(g) {
                            for k in 0..d {
                                dy[i * d + k] = w * gi[k];
                            }
                        }
                        local = Ok(loss * slots.len() as f64);
                    }
                    Err(e) => local = Err(e),
                }
                dy
            })?;
            batch_loss += local?;
        }
        Ok((batch_loss, n))
    };

    // Untrained loss, measured with the same sampling procedure.
    {
        let (mut total, mut count) = (0.0, 0usize);
        let mut scratch = vec![0.0; params.parameter_count()];
        for chunk in order.chunks(cfg.batch.max(1)) {
            let jobs = make_jobs(chunk, &mut rng)?;
            let (l, n) = run_batch(&params, &jobs, &mut scratch)?;
            total += l;
            count += n;
        }
        report.initial_loss = total / count.max(1) as f64;
        if !report.initial_loss.is_finite() {
            return Err(TransformerError::NonFinite { epoch: 0 });
        }
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = sched.lr(epoch);
        let (mut epoch_loss, mut epoch_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let jobs = make_jobs(chunk, &mut rng)?;
            let mut grads = vec![0.0; params.parameter_count()];
            let (batch_loss, n) = run_batch(&params, &jobs, &mut grads)?;
            if n == 0 {
                continue;
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TransformerError::NonFinite { epoch });
            }
            opt.step(params.values_mut(), &grads, lr, &no_decay);
            epoch_loss += batch_loss;
            epoch_n += n;
        }
        let mean = epoch_loss / epoch_n.max(1) as f64;
        tracing::debug!(epoch, loss = mean, lr, "transformer epoch");
        report.loss_trace.push(mean);
    }
    Ok((params, report))
}
