//! Fusion of a reference image embedding and a text embedding into one query.
//!
//! ```text
//! u = normalize(img), v = normalize(txt)        (zero stays zero)
//! net = W2 · relu(W1 · [u; v] + b1) + b2
//! out = normalize(λ · net + (1 − λ) · (u + v) / 2),   λ ∈ [0, 1]
//! ```
//!
//! With λ = 0 the network is bypassed and the output is the normalized
//! average of the two inputs. Training uses a symmetric contrastive loss
//! against target image embeddings.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::optim::AdamW;

pub const COMBINER_MAGIC: &[u8; 4] = b"KKCM";
pub const COMBINER_VERSION: u32 = 1;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Error)]
pub enum CombinerError {
    #[error("expected {expected} dimensions, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("training needs at least 2 triples, got {0}")]
    InsufficientData(usize),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("combined vector is zero and cannot be normalized")]
    DegenerateOutput,
    #[error("temperature must be positive")]
    BadTemperature,
    #[error("combiner file: {0}")]
    Decode(#[from] DecodeError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    lambda: usize,
    len: usize,
}

impl Layout {
    fn new(dim: usize, hidden: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + hidden * 2 * dim;
        let w2 = b1 + hidden;
        let b2 = w2 + dim * hidden;
        let lambda = b2 + dim;
        Self {
            w1,
            b1,
            w2,
            b2,
            lambda,
            len: lambda + 1,
        }
    }
}

/// All learnable weights, in one flat buffer: `W1 (hidden × 2·dim)`, `b1`,
/// `W2 (dim × hidden)`, `b2`, `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerParams {
    dim: usize,
    hidden: usize,
    values: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    x: Vec<f64>,
    z: Vec<f64>,
    h: Vec<f64>,
    net: Vec<f64>,
    conv: Vec<f64>,
    y_norm: f64,
    out: Vec<f64>,
}

fn unit_or_zero(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| *x as f64 / n).collect()
    }
}

impl CombinerParams {
    /// Seeded uniform initialization in ±1/√fan_in; λ starts at 0.5.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let layout = Layout::new(dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.len];
        let a1 = 1.0 / ((2 * dim) as f64).sqrt();
        for v in &mut values[layout.w1..layout.w2] {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = 1.0 / (hidden as f64).sqrt();
        for v in &mut values[layout.w2..layout.lambda] {
            *v = rng.random_range(-a2..a2);
        }
        values[layout.lambda] = 0.5;
        Self { dim, hidden, values }
    }

    /// Default hidden width is four times the embedding dimension.
    pub fn init_default(dim: usize, seed: u64) -> Self {
        Self::init(dim, 4 * dim, seed)
    }

    /// λ = 0 with zero weights: output is the normalized input average.
    pub fn identity(dim: usize, hidden: usize) -> Self {
        let layout = Layout::new(dim, hidden);
        Self {
            dim,
            hidden,
            values: vec![0.0; layout.len],
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.dim, self.hidden)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn lambda(&self) -> f64 {
        self.values[self.layout().lambda]
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        let i = self.layout().lambda;
        self.values[i] = lambda.clamp(0.0, 1.0);
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

    fn check_dim(&self, v: &[f32]) -> Result<(), CombinerError> {
        if v.len() != self.dim {
            return Err(CombinerError::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, img: &[f32], txt: &[f32]) -> Result<Trace, CombinerError> {
        self.check_dim(img)?;
        self.check_dim(txt)?;
        let (d, hd) = (self.dim, self.hidden);
        let l = self.layout();
        let p = &self.values;
        let u = unit_or_zero(img);
        let v = unit_or_zero(txt);
        let x: Vec<f64> = u.iter().chain(&v).copied().collect();

        let mut z = p[l.b1..l.w2].to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &p[l.w1 + j * 2 * d..l.w1 + (j + 1) * 2 * d];
            *zj += row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        let h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let mut net = p[l.b2..l.lambda].to_vec();
        for (i, ni) in net.iter_mut().enumerate() {
            let row = &p[l.w2 + i * hd..l.w2 + (i + 1) * hd];
            *ni += row.iter().zip(&h).map(|(w, hj)| w * hj).sum::<f64>();
        }
        let conv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
        let lambda = p[l.lambda];
        let y: Vec<f64> = net.iter().zip(&conv).map(|(n, c)| lambda * n + (1.0 - lambda) * c).collect();
        let y_norm = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        if y_norm == 0.0 || !y_norm.is_finite() {
            return Err(CombinerError::DegenerateOutput);
        }
        let out = y.iter().map(|a| a / y_norm).collect();
        Ok(Trace {
            x,
            z,
            h,
            net,
            conv,
            y_norm,
            out,
        })
    }

    /// Accumulates the gradient of a loss w.r.t. parameters given `d_out`.
    fn backward(&self, t: &Trace, d_out: &[f64], grads: &mut [f64]) {
        let (d, hd) = (self.dim, self.hidden);
        let l = self.layout();
        let p = &self.values;
        let lambda = p[l.lambda];
        let proj: f64 = t.out.iter().zip(d_out).map(|(o, g)| o * g).sum();
        let dy: Vec<f64> = t.out.iter().zip(d_out).map(|(o, g)| (g - o * proj) / t.y_norm).collect();
        grads[l.lambda] += dy.iter().zip(t.net.iter().zip(&t.conv)).map(|(g, (n, c))| g * (n - c)).sum::<f64>();
        let dnet: Vec<f64> = dy.iter().map(|g| lambda * g).collect();
        let mut dh = vec![0.0; hd];
        for i in 0..d {
            grads[l.b2 + i] += dnet[i];
            let row = l.w2 + i * hd;
            for j in 0..hd {
                grads[row + j] += dnet[i] * t.h[j];
                dh[j] += p[row + j] * dnet[i];
            }
        }
        for j in 0..hd {
            if t.z[j] <= 0.0 {
                continue;
            }
            grads[l.b1 + j] += dh[j];
            let row = l.w1 + j * 2 * d;
            for (k, xk) in t.x.iter().enumerate() {
                grads[row + k] += dh[j] * xk;
            }
        }
    }

    /// Fused, unit-norm query embedding.
    pub fn combine(&self, img: &[f32], txt: &[f32]) -> Result<Vec<f32>, CombinerError> {
        Ok(self.forward(img, txt)?.out.into_iter().map(|v| v as f32).collect())
    }

    pub fn combine_f64(&self, img: &[f32], txt: &[f32]) -> Result<Vec<f64>, CombinerError> {
        Ok(self.forward(img, txt)?.out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let l = self.layout();
        let mut w = Writer::new();
        w.bytes(COMBINER_MAGIC);
        w.u32(COMBINER_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.hidden as u32);
        w.f32(self.values[l.lambda] as f32);
        for v in &self.values[..l.lambda] {
            w.f32(*v as f32);
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CombinerError> {
        let mut r = Reader::new(bytes);
        r.magic(COMBINER_MAGIC)?;
        r.version(COMBINER_VERSION)?;
        let dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        if dim == 0 || hidden == 0 {
            return Err(DecodeError::Invalid("zero dimension".into()).into());
        }
        let lambda = r.f32()? as f64;
        let l = Layout::new(dim, hidden);
        let mut values: Vec<f64> = r.f32_vec(l.lambda)?.into_iter().map(f64::from).collect();
        values.push(lambda.clamp(0.0, 1.0));
        r.finish()?;
        Ok(Self { dim, hidden, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), CombinerError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, CombinerError> {
        Self::decode(&std::fs::read(path)?)
    }

    fn no_decay(&self) -> Vec<Range<usize>> {
        let l = self.layout();
        vec![l.b1..l.w2, l.b2..l.len]
    }
}

/// Symmetric contrastive loss and its gradients w.r.t. queries and targets.
///
/// With `S = Q·Tᵀ / τ`, the loss is the mean of the row-wise and column-wise
/// cross-entropies, each taking the diagonal as the positive class.
pub fn symmetric_contrastive_loss_with_grad(
    queries: &[Vec<f64>],
    targets: &[Vec<f64>],
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>), CombinerError> {
    let b = queries.len();
    if b < 2 || targets.len() != b {
        return Err(CombinerError::BatchTooSmall(b.min(targets.len())));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(CombinerError::BadTemperature);
    }
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let s: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| targets.iter().map(|t| dot(q, t) / temperature).collect())
        .collect();

    let softmax = |xs: &[f64]| -> (Vec<f64>, f64) {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        (e.iter().map(|x| x / z).collect(), m + z.ln())
    };

    let mut loss = 0.0;
    let mut ds = vec![vec![0.0; b]; b];
    for i in 0..b {
        let (p, lse) = softmax(&s[i]);
        loss += lse - s[i][i];
        for j in 0..b {
            ds[i][j] += p[j] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|i| s[i][j]).collect();
        let (p, lse) = softmax(&col);
        loss += lse - s[j][j];
        for i in 0..b {
            ds[i][j] += p[i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    let scale = 0.5 / b as f64;
    loss *= scale;

    let d = queries[0].len();
    let mut dq = vec![vec![0.0; d]; b];
    let mut dt = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let g = ds[i][j] * scale / temperature;
            for k in 0..d {
                dq[i][k] += g * targets[j][k];
                dt[j][k] += g * queries[i][k];
            }
        }
    }
    Ok((loss, dq, dt))
}

pub fn symmetric_contrastive_loss(queries: &[Vec<f64>], targets: &[Vec<f64>], temperature: f64) -> Result<f64, CombinerError> {
    symmetric_contrastive_loss_with_grad(queries, targets, temperature).map(|r| r.0)
}

/// One (reference image, feedback text, target image) training example.
#[derive(Debug, Clone)]
pub struct Triple {
    pub reference: Vec<f32>,
    pub text: Vec<f32>,
    pub target: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinerTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for CombinerTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            batch: 32,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Loss of `params` on a batch, plus the parameter gradient.
pub fn batch_loss_and_grad(
    params: &CombinerParams,
    batch: &[&Triple],
    temperature: f64,
) -> Result<(f64, Vec<f64>), CombinerError> {
    let traces = batch
        .iter()
        .map(|t| params.forward(&t.reference, &t.text))
        .collect::<Result<Vec<_>, _>>()?;
    let queries: Vec<Vec<f64>> = traces.iter().map(|t| t.out.clone()).collect();
    let targets: Vec<Vec<f64>> = batch.iter().map(|t| unit_or_zero(&t.target)).collect();
    let (loss, dq, _) = symmetric_contrastive_loss_with_grad(&queries, &targets, temperature)?;
    let mut grads = vec![0.0; params.parameter_count()];
    for (trace, g) in traces.iter().zip(&dq) {
        params.backward(trace, g, &mut grads);
    }
    Ok((loss, grads))
}

/// Mini-batch AdamW training. Returns the trained parameters and the mean
/// batch loss of every epoch.
pub fn train_combiner(
    params: &CombinerParams,
    triples: &[Triple],
    cfg: &CombinerTrainConfig,
) -> Result<(CombinerParams, Vec<f64>), CombinerError> {
    if triples.len() < 2 {
        return Err(CombinerError::InsufficientData(triples.len()));
    }
    for t in triples {
        params.check_dim(&t.reference)?;
        params.check_dim(&t.text)?;
        params.check_dim(&t.target)?;
    }
    let mut params = params.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((params, trace));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(params.parameter_count(), cfg.weight_decay);
    let no_decay = params.no_decay();
    let lambda_idx = params.layout().lambda;
    let batch_size = cfg.batch.max(2);
    let mut order: Vec<usize> = (0..triples.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Triple> = chunk.iter().map(|&i| &triples[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&params, &batch, cfg.temperature)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(CombinerError::NonFiniteLoss { epoch, batch: bi });
            }
            opt.step(&mut params.values, &grads, cfg.lr, &no_decay);
            params.values[lambda_idx] = params.values[lambda_idx].clamp(0.0, 1.0);
            sum += loss;
            batches += 1;
        }
        trace.push(sum / batches.max(1) as f64);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_vectors;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_with_zero_text_is_normalized_image() {
        let p = CombinerParams::identity(4, 16);
        let out = p.combine(&[3.0, 0.0, 4.0, 0.0], &[0.0; 4]).unwrap();
        let expect = [0.6, 0.0, 0.8, 0.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_with_equal_inputs_is_normalized_input() {
        let mut p = CombinerParams::init(3, 12, 1);
        p.set_lambda(0.0);
        let v = [1.0, 2.0, 2.0];
        let out = p.combine(&v, &v).unwrap();
        for (a, b) in out.iter().zip([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_is_unit_norm() {
        let vs = gaussian_vectors(40, 8, 4);
        for (i, pair) in vs.chunks(2).enumerate() {
            let mut p = CombinerParams::init(8, 32, i as u64);
            p.set_lambda(i as f64 / 20.0);
            let out = p.combine(&pair[0], &pair[1]).unwrap();
            assert!((norm(&out) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn combine_rejects_wrong_dim() {
        let p = CombinerParams::identity(4, 8);
        assert!(matches!(
            p.combine(&[1.0; 4], &[1.0; 3]),
            Err(CombinerError::DimensionMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn loss_anchor_values() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let q = vec![e1.clone(), e2.clone()];
        let loss = symmetric_contrastive_loss(&q, &q, 1.0).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);

        let same = vec![e1.clone(), e1.clone()];
        let loss = symmetric_contrastive_loss(&same, &same, 0.5).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        assert!(matches!(
            symmetric_contrastive_loss(&[e1.clone()], &[e1], 1.0),
            Err(CombinerError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn loss_invariant_under_joint_permutation() {
        let qs: Vec<Vec<f64>> = gaussian_vectors(5, 6, 8).into_iter().map(|v| unit_or_zero(&v)).collect();
        let ts: Vec<Vec<f64>> = gaussian_vectors(5, 6, 9).into_iter().map(|v| unit_or_zero(&v)).collect();
        let base = symmetric_contrastive_loss(&qs, &ts, 0.1).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let qp: Vec<_> = perm.iter().map(|&i| qs[i].clone()).collect();
        let tp: Vec<_> = perm.iter().map(|&i| ts[i].clone()).collect();
        assert!((symmetric_contrastive_loss(&qp, &tp, 0.1).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let p = CombinerParams::init(4, 8, 0);
        let vs = gaussian_vectors(6, 4, 1);
        let triples: Vec<Triple> = vs
            .chunks(3)
            .map(|c| Triple {
                reference: c[0].clone(),
                text: c[1].clone(),
                target: c[2].clone(),
            })
            .collect();
        let cfg = CombinerTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, trace) = train_combiner(&p, &triples, &cfg).unwrap();
        assert_eq!(out, p);
        assert!(trace.is_empty());
        assert!(matches!(
            train_combiner(&p, &triples[..1], &cfg),
            Err(CombinerError::InsufficientData(1))
        ));
    }

    #[test]
    fn persistence_roundtrip_is_stable_after_f32_rounding() {
        let p = CombinerParams::init(5, 20, 3);
        let once = CombinerParams::decode(&p.encode()).unwrap();
        let twice = CombinerParams::decode(&once.encode()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.lambda(), 0.5);
        let bytes = p.encode();
        assert!(CombinerParams::decode(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(&bytes[..4], b"KKCM");
    }

    fn toy_triples(n: usize, dim: usize, seed: u64) -> Vec<Triple> {
        let refs = gaussian_vectors(n, dim, seed);
        let texts = gaussian_vectors(n, dim, seed.wrapping_add(1000));
        refs.into_iter()
            .zip(texts)
            .map(|(r, t)| {
                let r = crate::vecmath::normalized(&r).unwrap();
                let t = crate::vecmath::normalized(&t).unwrap();
                let sum: Vec<f32> = r.iter().zip(&t).map(|(a, b)| a + b).collect();
                Triple {
                    target: crate::vecmath::normalized(&sum).unwrap(),
                    reference: r,
                    text: t,
                }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut p = CombinerParams::init(8, 32, 5);
        p.set_lambda(0.6);
        let triples = toy_triples(5, 8, 21);
        let batch: Vec<&Triple> = triples.iter().collect();
        let tau = 0.5;
        let (_, grads) = batch_loss_and_grad(&p, &batch, tau).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..p.parameter_count() {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fp = batch_loss_and_grad(&plus, &batch, tau).unwrap().0;
            let fm = batch_loss_and_grad(&minus, &batch, tau).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            if fd.abs().max(grads[i].abs()) > 1e-8 {
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn training_halves_loss_on_additive_task() {
        let triples = toy_triples(200, 32, 3);
        let p = CombinerParams::init_default(32, 3);
        let cfg = CombinerTrainConfig {
            seed: 3,
            ..Default::default()
        };
        let (_, trace) = train_combiner(&p, &triples, &cfg).unwrap();
        let (first, last) = (trace[0], *trace.last().unwrap());
        assert!(last < 0.5 * first, "first {first} last {last}");
    }
}
