//! Noise contrastive loss over cosine scores.
//!
//! For prediction `i` with positive `pos_i` and negatives `neg_i`:
//! `S_P = cos(pred_i, pos_i)`, `S_N = Σ_j cos(pred_i, neg_ij)` and
//! `L = -(1/N) Σ_i log(e^{S_P} / (e^{S_P} + e^{S_N}))`. The negative scores
//! are summed, not pooled through log-sum-exp.

use super::TransformerError;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine and its gradient w.r.t. `p`.
fn cos_and_grad(p: &[f64], p_norm: f64, t: &[f64]) -> (f64, Vec<f64>) {
    let tn = norm(t);
    if p_norm == 0.0 || tn == 0.0 {
        return (0.0, vec![0.0; p.len()]);
    }
    let c = p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (p_norm * tn);
    let g = p
        .iter()
        .zip(t)
        .map(|(pi, ti)| ti / (p_norm * tn) - c * pi / (p_norm * p_norm))
        .collect();
    (c, g)
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and its gradient w.r.t. each prediction.
pub fn nce_loss_with_grad(
    preds: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
) -> Result<(f64, Vec<Vec<f64>>), TransformerError> {
    let n = preds.len();
    if n == 0 || positives.len() != n || negatives.len() != n {
        return Err(TransformerError::ShapeMismatch(format!(
            "{} predictions, {} positives, {} negative sets",
            n,
            positives.len(),
            negatives.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        if negatives[i].is_empty() {
            return Err(TransformerError::EmptyNegativeSet(i));
        }
        let p = &preds[i];
        let pn = norm(p);
        let (sp, gp) = cos_and_grad(p, pn, &positives[i]);
        let mut sn = 0.0;
        let mut gn = vec![0.0; p.len()];
        for neg in &negatives[i] {
            let (c, g) = cos_and_grad(p, pn, neg);
            sn += c;
            for (a, b) in gn.iter_mut().zip(g) {
                *a += b;
            }
        }
        // -log(e^sp / (e^sp + e^sn)) = softplus(sn - sp)
        loss += softplus(sn - sp);
        let w = sigmoid(sn - sp) / n as f64;
        grads.push(gn.iter().zip(&gp).map(|(a, b)| w * (a - b)).collect());
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(TransformerError::NonFinite { epoch: 0 });
    }
    Ok((loss, grads))
}

pub fn nce_loss(preds: &[Vec<f64>], positives: &[Vec<f64>], negatives: &[Vec<Vec<f64>>]) -> Result<f64, TransformerError> {
    nce_loss_with_grad(preds, positives, negatives).map(|r| r.0)
}
