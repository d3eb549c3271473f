//! An independent `f64` reference transformer shared by the test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use prefixquant::model::{Linear, ToyModel};
use prefixquant::tensor::Tensor;

pub mod grad;
pub mod oracle;

/// Row-major `f64` matrix for the reference block.
#[derive(Clone)]
pub struct M {
    pub rows: usize,
    pub cols: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn of(t: &Tensor) -> M {
        let cols = *t.shape().last().unwrap();
        M {
            rows: t.len() / cols,
            cols,
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn mm(&self, w: &M) -> M {
        let mut d = vec![0.0; self.rows * w.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.d[i * self.cols + k];
                for j in 0..w.cols {
                    d[i * w.cols + j] += a * w.d[k * w.cols + j];
                }
            }
        }
        M { rows: self.rows, cols: w.cols, d }
    }

    pub fn zip(&self, o: &M, f: impl Fn(f64, f64) -> f64) -> M {
        M {
            d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        }
    }

    pub fn norm(&self, g: &Tensor, eps: f64) -> M {
        let mut out = self.clone();
        for r in out.d.chunks_mut(self.cols) {
            let inv = 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64 + eps).sqrt();
            r.iter_mut().zip(g.data()).for_each(|(v, &gv)| *v *= inv * gv as f64);
        }
        out
    }

    pub fn rope(&self, hd: usize, offset: usize, theta: f64) -> M {
        let mut out = self.clone();
        let half = hd / 2;
        for (t, r) in out.d.chunks_mut(self.cols).enumerate() {
            for head in r.chunks_mut(hd) {
                for i in 0..half {
                    let ang = (offset + t) as f64 * theta.powf(-2.0 * i as f64 / hd as f64);
                    let (a, b) = (head[i], head[i + half]);
                    head[i] = a * ang.cos() - b * ang.sin();
                    head[i + half] = a * ang.sin() + b * ang.cos();
                }
            }
        }
        out
    }

    /// `x·Q` on every chunk of the rotation's size.
    pub fn rotate(&self, q: &M) -> M {
        let n = q.rows;
        let mut out = self.clone();
        for chunk in out.d.chunks_mut(n) {
            let src = chunk.to_vec();
            for j in 0..n {
                chunk[j] = (0..n).map(|i| src[i] * q.d[i * n + j]).sum();
            }
        }
        out
    }
}

/// Causal multi-head attention; `k`, `v` include any past rows first.
pub fn ref_attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let hd = q.cols / heads;
    let past = k.rows - q.rows;
    let mut out = vec![0.0; q.rows * q.cols];
    for t in 0..q.rows {
        for h in 0..heads {
            let qr = &q.d[t * q.cols + h * hd..][..hd];
            let scores: Vec<f64> = (0..=past + t)
                .map(|j| qr.iter().zip(&k.d[j * k.cols + h * hd..][..hd]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for i in 0..hd {
                    out[t * q.cols + h * hd + i] += ej / z * v.d[j * v.cols + h * hd + i];
                }
            }
        }
    }
    M { rows: q.rows, cols: q.cols, d: out }
}

/// Unquantized block in `f64`.
pub fn ref_block(m: &ToyModel, layer: usize, ws: &BTreeMap<Linear, M>, x: &M, past: Option<(&Tensor, &Tensor)>) -> M {
    let cfg = &m.config;
    let lw = &m.layers[layer];
    let w = |l: Linear| &ws[&l];
    let eps = cfg.norm_eps as f64;
    let offset = past.map_or(0, |(k, _)| k.shape()[0]);
    let h = x.norm(&lw.attn_norm, eps);
    let theta = cfg.rope_theta as f64;
    let mut q = h.mm(w(Linear::QProj)).rope(cfg.head_dim, offset, theta);
    let mut k = h.mm(w(Linear::KProj)).rope(cfg.head_dim, offset, theta);
    let mut v = h.mm(w(Linear::VProj));
    if let Some(r3) = &m.online_r3 {
        let r = M::of(&r3.matrix());
        q = q.rotate(&r);
        k = k.rotate(&r);
    }
    if let Some((pk, pv)) = past {
        let (pk, pv) = (M::of(&pk.reshape(&[offset, k.cols]).unwrap()), M::of(&pv.reshape(&[offset, v.cols]).unwrap()));
        k = M { rows: offset + k.rows, cols: k.cols, d: [pk.d, k.d].concat() };
        v = M { rows: offset + v.rows, cols: v.cols, d: [pv.d, v.d].concat() };
    }
    let attn = ref_attention(&q, &k, &v, cfg.n_heads);
    let x1 = x.zip(&attn.mm(w(Linear::OProj)), |a, b| a + b);
    let h2 = x1.norm(&lw.mlp_norm, eps);
    let g = h2.mm(w(Linear::GateProj));
    let u = h2.mm(w(Linear::UpProj));
    let mut act = g.zip(&u, |a, b| a / (1.0 + (-a).exp()) * b);
    if let Some(r4) = &m.online_r4 {
        act = act.rotate(&M::of(&r4.matrix()));
    }
    x1.zip(&act.mm(w(Linear::DownProj)), |a, b| a + b)
}

/// Weights of one layer as `f64` matrices.
pub fn layer_weights(m: &ToyModel, layer: usize) -> BTreeMap<Linear, M> {
    Linear::ALL.iter().map(|&l| (l, M::of(m.layers[layer].linear(l)))).collect()
}

/// Logits of the whole model in `f64`; `past` rows per layer come first.
pub fn ref_forward(m: &ToyModel, tokens: &[u32], past: Option<&[(Tensor, Tensor)]>) -> M {
    let hidden = m.config.hidden;
    let mut x = M {
        rows: tokens.len(),
        cols: hidden,
        d: tokens.iter().flat_map(|&t| m.embedding.row(t as usize).iter().map(|&v| v as f64)).collect(),
    };
    for layer in 0..m.config.n_layers {
        let p = past.map(|p| (&p[layer].0, &p[layer].1));
        x = ref_block(m, layer, &layer_weights(m, layer), &x, p);
    }
    x.norm(&m.final_norm, m.config.norm_eps as f64).mm(&M::of(&m.lm_head))
}
