//! Encoder math in f64 with hand-written backward passes.
//!
//! Matrices are row-major with one row per sequence slot. Weights of a
//! linear map `in → out` are stored `out × in`.

use super::{SlotRole, TransformerConfig};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub pos: usize,
    pub out_tok: usize,
    pub un_tok: usize,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &TransformerConfig) -> Self {
        let (d, l, f) = (cfg.dim, cfg.seq_len, cfg.ff_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let pos = take(l * d);
        let out_tok = take(d);
        let un_tok = take(d);
        let layers = (0..cfg.layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(f * d),
                b1: take(f),
                w2: take(d * f),
                b2: take(d),
                end: 0,
            })
            .collect::<Vec<_>>();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let len = take(0);
        let mut layers = layers;
        for i in 0..layers.len() {
            layers[i].end = if i + 1 < layers.len() { layers[i + 1].ln1_g } else { lnf_g };
        }
        Self {
            pos,
            out_tok,
            un_tok,
            layers,
            lnf_g,
            lnf_b,
            len,
        }
    }

    /// Ranges exempt from weight decay: biases, norms, tokens and positions.
    pub fn no_decay(&self, cfg: &TransformerConfig) -> Vec<std::ops::Range<usize>> {
        let d = cfg.dim;
        let mut out = vec![self.pos..self.un_tok + d];
        for l in &self.layers {
            out.push(l.ln1_g..l.wq);
            out.extend([l.bq..l.bq + d, l.bk..l.bk + d, l.bv..l.bv + d, l.bo..l.bo + d]);
            out.push(l.ln2_g..l.w1);
            out.push(l.b1..l.w2);
            out.push(l.b2..l.b2 + d);
        }
        out.push(self.lnf_g..self.len);
        out
    }
}

fn linear(x: &[f64], rows: usize, inp: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = vec![0.0; rows * out];
    for i in 0..rows {
        let xi = &x[i * inp..(i + 1) * inp];
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            y[i * out + o] = b[o] + wo.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

/// Backward of [`linear`]: accumulates weight and bias gradients at the given
/// offsets of `grads` and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    w: &[f64],
    grads: &mut [f64],
    w_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * inp];
    for i in 0..rows {
        let xi = &x[i * inp..(i + 1) * inp];
        for o in 0..out {
            let g = dy[i * out + o];
            if g == 0.0 {
                continue;
            }
            grads[b_off + o] += g;
            let gw = &mut grads[w_off + o * inp..w_off + (o + 1) * inp];
            for (gk, xk) in gw.iter_mut().zip(xi) {
                *gk += g * xk;
            }
            let wrow = &w[o * inp..(o + 1) * inp];
            for (dk, wk) in dx[i * inp..(i + 1) * inp].iter_mut().zip(wrow) {
                *dk += g * wk;
            }
        }
    }
    dx
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for i in 0..rows {
        let xi = &x[i * d..(i + 1) * d];
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let h = (xi[k] - mean) * r;
            xhat[i * d + k] = h;
            y[i * d + k] = g[k] * h + b[k];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &[f64],
    cache: &NormCache,
    rows: usize,
    d: usize,
    g: &[f64],
    grads: &mut [f64],
    g_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    for i in 0..rows {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for k in 0..d {
            grads[g_off + k] += dyi[k] * xh[k];
            grads[b_off + k] += dyi[k];
            let dxh = dyi[k] * g[k];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[k];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for k in 0..d {
            let dxh = dyi[k] * g[k];
            dx[i * d + k] = cache.rstd[i] * (dxh - mean_dxh - xh[k] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    ln1: NormCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × L × L` attention weights.
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: NormCache,
    h2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    lnf: NormCache,
    roles: Vec<SlotRole>,
}

/// Slot inputs before the first layer: the item embedding for INPUT slots,
/// the shared token otherwise, plus the slot's positional embedding.
pub(crate) fn embed_slots(
    cfg: &TransformerConfig,
    lay: &Layout,
    p: &[f64],
    roles: &[SlotRole],
    inputs: &[Option<&[f64]>],
) -> Vec<f64> {
    let (d, l) = (cfg.dim, cfg.seq_len);
    let mut x = vec![0.0; l * d];
    for i in 0..l {
        let row = &mut x[i * d..(i + 1) * d];
        match roles[i] {
            SlotRole::Input => row.copy_from_slice(inputs[i].expect("input slot carries an embedding")),
            SlotRole::Out => row.copy_from_slice(&p[lay.out_tok..lay.out_tok + d]),
            SlotRole::Un => row.copy_from_slice(&p[lay.un_tok..lay.un_tok + d]),
        }
        for k in 0..d {
            row[k] += p[lay.pos + i * d + k];
        }
    }
    x
}

/// One forward pass over `L` slots; returns the `L × dim` outputs.
pub(crate) fn forward(
    cfg: &TransformerConfig,
    lay: &Layout,
    p: &[f64],
    roles: &[SlotRole],
    inputs: &[Option<&[f64]>],
) -> (Vec<f64>, ForwardCache) {
    let (d, l, f, nh) = (cfg.dim, cfg.seq_len, cfg.ff_dim, cfg.heads);
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embed_slots(cfg, lay, p, roles, inputs);

    let mut caches = Vec::with_capacity(lay.layers.len());
    for ll in &lay.layers {
        let x_in = x;
        let (h1, ln1) = layer_norm(&x_in, l, d, &p[ll.ln1_g..ll.ln1_g + d], &p[ll.ln1_b..ll.ln1_b + d]);
        let q = linear(&h1, l, d, &p[ll.wq..ll.wq + d * d], &p[ll.bq..ll.bq + d]);
        let k = linear(&h1, l, d, &p[ll.wk..ll.wk + d * d], &p[ll.bk..ll.bk + d]);
        let v = linear(&h1, l, d, &p[ll.wv..ll.wv + d * d], &p[ll.bv..ll.bv + d]);
        let mut probs = vec![0.0; nh * l * l];
        let mut attn = vec![0.0; l * d];
        for h in 0..nh {
            let c0 = h * dh;
            for i in 0..l {
                let pr = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                for j in 0..l {
                    pr[j] = scale * (0..dh).map(|c| q[i * d + c0 + c] * k[j * d + c0 + c]).sum::<f64>();
                }
                let m = pr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in pr.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in pr.iter_mut() {
                    *s /= z;
                }
                for j in 0..l {
                    for c in 0..dh {
                        attn[i * d + c0 + c] += pr[j] * v[j * d + c0 + c];
                    }
                }
            }
        }
        let o = linear(&attn, l, d, &p[ll.wo..ll.wo + d * d], &p[ll.bo..ll.bo + d]);
        let x_mid: Vec<f64> = x_in.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (h2, ln2) = layer_norm(&x_mid, l, d, &p[ll.ln2_g..ll.ln2_g + d], &p[ll.ln2_b..ll.ln2_b + d]);
        let u = linear(&h2, l, d, &p[ll.w1..ll.w1 + f * d], &p[ll.b1..ll.b1 + f]);
        let act: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let ff = linear(&act, l, f, &p[ll.w2..ll.w2 + d * f], &p[ll.b2..ll.b2 + d]);
        x = x_mid.iter().zip(&ff).map(|(a, b)| a + b).collect();
        caches.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h2,
            u,
            act,
        });
    }
    let (y, lnf) = layer_norm(&x, l, d, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d]);
    (
        y,
        ForwardCache {
            layers: caches,
            lnf,
            roles: roles.to_vec(),
        },
    )
}

/// Backward pass from `dy` (gradient w.r.t. the `L × dim` outputs).
/// Accumulates parameter gradients into `grads` and returns the gradient
/// w.r.t. the slot inputs (non-zero only for `Input` slots).
pub(crate) fn backward(
    cfg: &TransformerConfig,
    lay: &Layout,
    p: &[f64],
    cache: &ForwardCache,
    dy: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let (d, l, f, nh) = (cfg.dim, cfg.seq_len, cfg.ff_dim, cfg.heads);
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dx = layer_norm_back(dy, &cache.lnf, l, d, &p[lay.lnf_g..lay.lnf_g + d], grads, lay.lnf_g, lay.lnf_b);

    for (ll, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // Feed-forward residual branch.
        let d_act = linear_back(&c.act, &dx, l, f, d, &p[ll.w2..ll.w2 + d * f], grads, ll.w2, ll.b2);
        let du: Vec<f64> = d_act.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let dh2 = linear_back(&c.h2, &du, l, d, f, &p[ll.w1..ll.w1 + f * d], grads, ll.w1, ll.b1);
        let dmid_ln = layer_norm_back(&dh2, &c.ln2, l, d, &p[ll.ln2_g..ll.ln2_g + d], grads, ll.ln2_g, ll.ln2_b);
        let d_mid: Vec<f64> = dx.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();

        // Attention residual branch.
        let d_attn = linear_back(&c.attn, &d_mid, l, d, d, &p[ll.wo..ll.wo + d * d], grads, ll.wo, ll.bo);
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut dp = vec![0.0; l];
        for h in 0..nh {
            let c0 = h * dh;
            for i in 0..l {
                let pr = &c.probs[(h * l + i) * l..(h * l + i + 1) * l];
                for j in 0..l {
                    let mut s = 0.0;
                    for cc in 0..dh {
                        let g = d_attn[i * d + c0 + cc];
                        s += g * c.v[j * d + c0 + cc];
                        dv[j * d + c0 + cc] += pr[j] * g;
                    }
                    dp[j] = s;
                }
                let inner: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..l {
                    let ds = pr[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for cc in 0..dh {
                        dq[i * d + c0 + cc] += ds * c.k[j * d + c0 + cc];
                        dk[j * d + c0 + cc] += ds * c.q[i * d + c0 + cc];
                    }
                }
            }
        }
        let mut dh1 = linear_back(&c.h1, &dq, l, d, d, &p[ll.wq..ll.wq + d * d], grads, ll.wq, ll.bq);
        for (a, b) in dh1
            .iter_mut()
            .zip(linear_back(&c.h1, &dk, l, d, d, &p[ll.wk..ll.wk + d * d], grads, ll.wk, ll.bk))
        {
            *a += b;
        }
        for (a, b) in dh1
            .iter_mut()
            .zip(linear_back(&c.h1, &dv, l, d, d, &p[ll.wv..ll.wv + d * d], grads, ll.wv, ll.bv))
        {
            *a += b;
        }
        let din_ln = layer_norm_back(&dh1, &c.ln1, l, d, &p[ll.ln1_g..ll.ln1_g + d], grads, ll.ln1_g, ll.ln1_b);
        dx = d_mid.iter().zip(&din_ln).map(|(a, b)| a + b).collect();
    }

    let mut d_input = vec![0.0; l * d];
    for i in 0..l {
        let g = &dx[i * d..(i + 1) * d];
        for k in 0..d {
            grads[lay.pos + i * d + k] += g[k];
        }
        match cache.roles[i] {
            SlotRole::Input => d_input[i * d..(i + 1) * d].copy_from_slice(g),
            SlotRole::Out => {
                for k in 0..d {
                    grads[lay.out_tok + k] += g[k];
                }
            }
            SlotRole::Un => {
                for k in 0..d {
                    grads[lay.un_tok + k] += g[k];
                }
            }
        }
    }
    d_input
}
