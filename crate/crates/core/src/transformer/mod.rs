//! Outfit transformer: an encoder over category-ordered slots that predicts
//! the embeddings of missing outfit items.
//!
//! Slot `i` holds the item of category `i`. An INPUT slot carries the item's
//! embedding as-is; OUT slots (items to predict) carry a shared learnable
//! `<OUT>` token and UN slots (absent categories) a shared `<UN>` token.
//! Every slot adds its positional embedding, then a stack of pre-norm
//! encoder layers and a final layer norm produce one vector per slot.

mod model;
mod nce;
mod train;

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Category;
use crate::codec::{DecodeError, Reader, Writer};

pub use nce::{nce_loss, nce_loss_with_grad};
pub use train::{load_outfits, parse_outfits, train, Outfit, OutfitItemRef, TrainConfig, TrainReport};

pub const TRANSFORMER_MAGIC: &[u8; 4] = b"KKTF";
pub const TRANSFORMER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("outfit is empty")]
    EmptyOutfit,
    #[error("outfit has a single item; both roles need at least two")]
    SingleItem,
    #[error("category {0} appears more than once in the outfit")]
    DuplicateCategory(Category),
    #[error("reference category {0} is also a target")]
    RefInTargets(Category),
    #[error("no target categories requested")]
    NoTargets,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("prediction {0} has no negatives")]
    EmptyNegativeSet(usize),
    #[error("non-finite loss or gradient at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("no trainable outfits (need >= 2 items, each with same-category negatives)")]
    InsufficientData,
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("malformed outfit record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SlotRole {
    Input,
    Out,
    Un,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub dim: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl TransformerConfig {
    /// Small configuration used by tests and the desk-scale demo.
    pub fn desk(dim: usize) -> Self {
        Self {
            dim,
            seq_len: Category::COUNT,
            layers: 2,
            heads: 4,
            ff_dim: 4 * dim,
        }
    }

    /// 640-d, 6 layers, 8 heads, 11 slots.
    pub fn full() -> Self {
        Self {
            dim: 640,
            seq_len: 11,
            layers: 6,
            heads: 8,
            ff_dim: 4 * 640,
        }
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        let bad = |m: String| Err(TransformerError::Config(m));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 || self.seq_len < 2 {
            return bad(format!("all sizes must be positive and seq_len >= 2: {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk(32)
    }
}

/// One slot of an outfit sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub role: SlotRole,
    /// INPUT: the item placed in the slot. OUT during training: the ground truth.
    pub item_id: Option<String>,
    /// INPUT: the item embedding fed to the encoder. OUT during training: the
    /// ground-truth embedding. Unused otherwise.
    pub embedding: Option<Vec<f32>>,
}

impl Slot {
    fn un() -> Self {
        Self {
            role: SlotRole::Un,
            item_id: None,
            embedding: None,
        }
    }
}

/// A fixed-length sequence; slot `i` belongs to category index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutfitSample {
    pub slots: Vec<Slot>,
}

impl OutfitSample {
    pub fn roles(&self) -> Vec<SlotRole> {
        self.slots.iter().map(|s| s.role).collect()
    }

    pub fn out_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().enumerate().filter(|(_, s)| s.role == SlotRole::Out).map(|(i, _)| i)
    }
}

/// An item placed in an outfit: category, id and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedItem {
    pub category: Category,
    pub id: String,
    pub embedding: Vec<f32>,
}

fn check_outfit(outfit: &[PlacedItem], seq_len: usize) -> Result<(), TransformerError> {
    if outfit.is_empty() {
        return Err(TransformerError::EmptyOutfit);
    }
    let mut seen = BTreeSet::new();
    for it in outfit {
        if !seen.insert(it.category) {
            return Err(TransformerError::DuplicateCategory(it.category));
        }
        if it.category.index() >= seq_len {
            return Err(TransformerError::ShapeMismatch(format!(
                "category {} has no slot in a length-{seq_len} sequence",
                it.category
            )));
        }
    }
    Ok(())
}

/// Assigns roles from an explicit INPUT bitmask over `outfit` (bit `j` set
/// means `outfit[j]` is an input). Absent categories become UN.
pub fn split_roles_with_mask(outfit: &[PlacedItem], input_mask: u32, seq_len: usize) -> Result<OutfitSample, TransformerError> {
    check_outfit(outfit, seq_len)?;
    let mut slots = vec![Slot::un(); seq_len];
    for (j, it) in outfit.iter().enumerate() {
        let role = if input_mask >> j & 1 == 1 { SlotRole::Input } else { SlotRole::Out };
        slots[it.category.index()] = Slot {
            role,
            item_id: Some(it.id.clone()),
            embedding: Some(it.embedding.clone()),
        };
    }
    Ok(OutfitSample { slots })
}

/// Training split: a uniformly random non-empty strict subset of the outfit
/// becomes INPUT, the rest OUT.
pub fn split_training_roles<R: Rng + ?Sized>(
    outfit: &[PlacedItem],
    seq_len: usize,
    rng: &mut R,
) -> Result<OutfitSample, TransformerError> {
    check_outfit(outfit, seq_len)?;
    if outfit.len() < 2 {
        return Err(TransformerError::SingleItem);
    }
    // Masks 1..2^n - 1 are exactly the non-empty strict subsets.
    let full = (1u32 << outfit.len()) - 1;
    let mask = rng.random_range(1..full);
    split_roles_with_mask(outfit, mask, seq_len)
}

/// Inference split: the reference is the only INPUT, targets are OUT.
pub fn split_inference_roles(
    reference: &PlacedItem,
    targets: &[Category],
    seq_len: usize,
) -> Result<OutfitSample, TransformerError> {
    check_outfit(std::slice::from_ref(reference), seq_len)?;
    if targets.is_empty() {
        return Err(TransformerError::NoTargets);
    }
    let mut slots = vec![Slot::un(); seq_len];
    slots[reference.category.index()] = Slot {
        role: SlotRole::Input,
        item_id: Some(reference.id.clone()),
        embedding: Some(reference.embedding.clone()),
    };
    for &t in targets {
        if t == reference.category {
            return Err(TransformerError::RefInTargets(t));
        }
        if t.index() >= seq_len {
            return Err(TransformerError::ShapeMismatch(format!("category {t} has no slot")));
        }
        slots[t.index()] = Slot {
            role: SlotRole::Out,
            item_id: None,
            embedding: None,
        };
    }
    Ok(OutfitSample { slots })
}

/// All learnable weights, stored flat in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    config: TransformerConfig,
    values: Vec<f64>,
}

impl TransformerParams {
    /// Seeded initialization: linear weights uniform in ±1/√fan_in, norm
    /// gains 1, biases 0, tokens and positions N(0, 1/dim).
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self, TransformerError> {
        config.validate()?;
        let lay = model::Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; lay.len];
        let (d, f) = (config.dim, config.ff_dim);
        let sd = 1.0 / (d as f64).sqrt();
        for v in &mut values[lay.pos..lay.un_tok + d] {
            *v = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        let mut uniform = |vals: &mut [f64], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in vals {
                *v = rng.random_range(-a..a);
            }
        };
        for l in &lay.layers {
            for w in [l.wq, l.wk, l.wv, l.wo] {
                uniform(&mut values[w..w + d * d], d);
            }
            uniform(&mut values[l.w1..l.w1 + f * d], d);
            uniform(&mut values[l.w2..l.w2 + d * f], f);
            values[l.ln1_g..l.ln1_g + d].fill(1.0);
            values[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        values[lay.lnf_g..lay.lnf_g + d].fill(1.0);
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn layout(&self) -> model::Layout {
        model::Layout::new(&self.config)
    }

    pub fn out_token(&self) -> &[f64] {
        let o = self.layout().out_tok;
        &self.values[o..o + self.config.dim]
    }

    pub fn un_token(&self) -> &[f64] {
        let o = self.layout().un_tok;
        &self.values[o..o + self.config.dim]
    }

    pub fn positional(&self, slot: usize) -> &[f64] {
        let d = self.config.dim;
        let o = self.layout().pos + slot * d;
        &self.values[o..o + d]
    }

    fn check_sample(&self, sample: &OutfitSample) -> Result<(), TransformerError> {
        let c = &self.config;
        if sample.slots.len() != c.seq_len {
            return Err(TransformerError::ShapeMismatch(format!(
                "sample has {} slots, model expects {}",
                sample.slots.len(),
                c.seq_len
            )));
        }
        for (i, s) in sample.slots.iter().enumerate() {
            if s.role == SlotRole::Input {
                match &s.embedding {
                    Some(e) if e.len() == c.dim => {}
                    Some(e) => {
                        return Err(TransformerError::ShapeMismatch(format!(
                            "slot {i} embedding has {} values, expected {}",
                            e.len(),
                            c.dim
                        )))
                    }
                    None => return Err(TransformerError::ShapeMismatch(format!("input slot {i} has no embedding"))),
                }
            }
        }
        Ok(())
    }

    fn inputs(sample: &OutfitSample) -> Vec<Option<Vec<f64>>> {
        sample
            .slots
            .iter()
            .map(|s| match s.role {
                SlotRole::Input => s.embedding.as_ref().map(|e| e.iter().map(|&x| x as f64).collect()),
                _ => None,
            })
            .collect()
    }

    /// Forward pass from explicit f64 slot inputs.
    pub(crate) fn forward_raw(&self, roles: &[SlotRole], inputs: &[Option<Vec<f64>>]) -> Vec<f64> {
        let refs: Vec<Option<&[f64]>> = inputs.iter().map(|o| o.as_deref()).collect();
        model::forward(&self.config, &self.layout(), &self.values, roles, &refs).0
    }

    /// Encoder outputs, one `dim` vector per slot.
    pub fn encoder_forward(&self, sample: &OutfitSample) -> Result<Vec<Vec<f64>>, TransformerError> {
        self.check_sample(sample)?;
        let y = self.forward_raw(&sample.roles(), &Self::inputs(sample));
        Ok(y.chunks(self.config.dim).map(<[f64]>::to_vec).collect())
    }

    /// Forward then backward with upstream gradient `dy` (`L × dim`, flat).
    /// Returns the outputs, accumulates into `grads` and returns the
    /// gradient w.r.t. the INPUT slot embeddings.
    pub(crate) fn forward_backward<F>(
        &self,
        sample: &OutfitSample,
        grads: &mut [f64],
        upstream: F,
    ) -> Result<(Vec<f64>, Vec<f64>), TransformerError>
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        self.check_sample(sample)?;
        Ok(self.forward_backward_raw(&sample.roles(), &Self::inputs(sample), grads, upstream))
    }

    pub(crate) fn forward_backward_raw<F>(
        &self,
        roles: &[SlotRole],
        inputs: &[Option<Vec<f64>>],
        grads: &mut [f64],
        upstream: F,
    ) -> (Vec<f64>, Vec<f64>)
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        let lay = self.layout();
        let refs: Vec<Option<&[f64]>> = inputs.iter().map(|o| o.as_deref()).collect();
        let (y, cache) = model::forward(&self.config, &lay, &self.values, roles, &refs);
        let dy = upstream(&y);
        let d_in = model::backward(&self.config, &lay, &self.values, &cache, &dy, grads);
        (y, d_in)
    }

    /// Loss of one sample's OUT predictions against their ground truth, and
    /// its gradient w.r.t. every parameter. `negatives[j]` belongs to the
    /// `j`-th OUT slot in slot order.
    pub fn sample_loss_and_grad(
        &self,
        sample: &OutfitSample,
        negatives: &[Vec<Vec<f64>>],
    ) -> Result<(f64, Vec<f64>), TransformerError> {
        let d = self.config.dim;
        let outs: Vec<usize> = sample.out_slots().collect();
        if outs.len() != negatives.len() {
            return Err(TransformerError::ShapeMismatch(format!(
                "{} OUT slots, {} negative sets",
                outs.len(),
                negatives.len()
            )));
        }
        let positives = outs
            .iter()
            .map(|&i| {
                sample.slots[i]
                    .embedding
                    .as_ref()
                    .map(|e| e.iter().map(|&x| x as f64).collect::<Vec<f64>>())
                    .ok_or_else(|| TransformerError::ShapeMismatch(format!("OUT slot {i} has no ground truth")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut grads = vec![0.0; self.parameter_count()];
        let mut loss = Ok(0.0);
        self.forward_backward(sample, &mut grads, |y| {
            let preds: Vec<Vec<f64>> = outs.iter().map(|&i| y[i * d..(i + 1) * d].to_vec()).collect();
            let mut dy = vec![0.0; y.len()];
            match nce_loss_with_grad(&preds, &positives, negatives) {
                Ok((l, g)) => {
                    for (&i, gi) in outs.iter().zip(g) {
                        dy[i * d..(i + 1) * d].copy_from_slice(&gi);
                    }
                    loss = Ok(l);
                }
                Err(e) => loss = Err(e),
            }
            dy
        })?;
        Ok((loss?, grads))
    }

    /// Unit-normalized predictions for each target category of `reference`.
    pub fn recommend_embeddings(
        &self,
        reference: &PlacedItem,
        targets: &[Category],
    ) -> Result<Vec<(Category, Vec<f32>)>, TransformerError> {
        let sample = split_inference_roles(reference, targets, self.config.seq_len)?;
        let out = self.encoder_forward(&sample)?;
        let mut cats: Vec<Category> = targets.to_vec();
        cats.sort();
        cats.dedup();
        Ok(cats
            .into_iter()
            .map(|c| {
                let v = &out[c.index()];
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                (c, v.iter().map(|x| (x / n) as f32).collect())
            })
            .collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(TRANSFORMER_MAGIC);
        w.u32(TRANSFORMER_VERSION);
        for v in [c.dim, c.seq_len, c.layers, c.heads, c.ff_dim] {
            w.u32(v as u32);
        }
        for v in &self.values {
            w.f32(*v as f32);
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransformerError> {
        let mut r = Reader::new(bytes);
        r.magic(TRANSFORMER_MAGIC)?;
        r.version(TRANSFORMER_VERSION)?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = TransformerConfig {
            dim: dims[0],
            seq_len: dims[1],
            layers: dims[2],
            heads: dims[3],
            ff_dim: dims[4],
        };
        config.validate()?;
        let n = model::Layout::new(&config).len;
        if r.remaining() / 4 < n {
            return Err(DecodeError::Truncated {
                offset: r.position(),
                needed: n * 4 - r.remaining(),
            }
            .into());
        }
        let values = r.f32_vec(n)?.into_iter().map(f64::from).collect();
        r.finish()?;
        Ok(Self { config, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), TransformerError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, TransformerError> {
        Self::decode(&std::fs::read(path)?)
    }

    pub(crate) fn no_decay(&self) -> Vec<std::ops::Range<usize>> {
        self.layout().no_decay(&self.config)
    }
}
