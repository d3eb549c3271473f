//! A minimal reverse-mode gradient tape over the ops a transformer block
//! uses.
//!
//! Forward values are computed with the same kernels as the inference path,
//! so a tape forward is bit-identical to [`crate::model::block_forward`].
//! Nodes are appended in evaluation order, which makes the tape a
//! topological order of the graph by construction.
//!
//! Quantizer gradients:
//!
//! * input: straight-through, `1` where `round(x/s) + z` lies in
//!   `[0, qmax]` and `0` where it is clamped;
//! * step `s`: `round(x/s)` inside the range, `qmax − z` when clamped high,
//!   `−z` when clamped low (the exact local derivative, rounding being
//!   piecewise constant);
//! * zero point `z`: `0` inside, `−s` when clamped;
//! * dynamic clipping factors via `s = (γ·max − β·min)/qmax`, with the
//!   zero point's dependence on `β` (a floor) treated as locally constant.

use crate::error::{Error, Result};
use crate::model::attention_probs;
use crate::quant::{fake_quant, fit_params, QuantParams, QuantSpec, SCALE_GUARD};
use crate::rotation::HadamardSpec;
use crate::tensor::{add, matmul, mul, rms_inverse, rmsnorm, rope_apply, silu, Tensor};

pub type Var = usize;

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, eps: f32 },
    Rope { x: Var, head_dim: usize, offset: usize, theta: f32 },
    Rotate { x: Var, h: HadamardSpec },
    Reshape(Var),
    /// Causal attention; `past` keys/values are constants.
    Attention { q: Var, k: Var, v: Var, past: Option<(Tensor, Tensor)>, probs: Vec<f64> },
    /// Static fake quantization with per-group `scale` and `zero` nodes.
    FakeQuant { x: Var, scale: Var, zero: Var, spec: QuantSpec },
    /// Dynamic fake quantization with scalar `gamma`/`beta` nodes; caches the
    /// per-group ranges and fitted `(s, z)`.
    DynamicQuant { x: Var, gamma: Var, beta: Var, spec: QuantSpec, ranges: Vec<(f32, f32)>, params: QuantParams },
    /// `Σ (x − target)² / denom`, a `[1]` tensor.
    SquaredError { x: Var, target: Tensor, denom: f64 },
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op: Op,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Clone, Debug)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v).and_then(Option::take)
    }
}

fn acc(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => add(&prev, &g)?,
        None => g,
    });
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f32> {
    match t.data() {
        [v] => Ok(*v),
        _ => Err(Error::shape("scalar", t.shape(), &[1])),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(TapeNode { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = silu(self.value(x));
        self.push(Op::Silu(x), v)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let v = rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(Op::RmsNorm { x, gain, eps }, v))
    }

    pub fn rope(&mut self, x: Var, head_dim: usize, offset: usize, theta: f32) -> Result<Var> {
        let v = rope_apply(self.value(x), head_dim, offset, theta, false)?;
        Ok(self.push(Op::Rope { x, head_dim, offset, theta }, v))
    }

    pub fn rotate(&mut self, x: Var, h: &HadamardSpec) -> Result<Var> {
        let v = h.apply(self.value(x))?;
        Ok(self.push(Op::Rotate { x, h: h.clone() }, v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// `q` `[T × H × D]`; `k`, `v` `[T × H × D]`, preceded by constant
    /// `past` keys/values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, past: Option<(&Tensor, &Tensor)>) -> Result<Var> {
        let past = past.filter(|(pk, _)| pk.shape()[0] > 0).map(|(pk, pv)| (pk.clone(), pv.clone()));
        let (out, probs) = match &past {
            Some((pk, pv)) => {
                let kf = Tensor::concat_rows(&[pk, self.value(k)])?;
                let vf = Tensor::concat_rows(&[pv, self.value(v)])?;
                attention_probs(self.value(q), &kf, &vf)?
            }
            None => attention_probs(self.value(q), self.value(k), self.value(v))?,
        };
        Ok(self.push(Op::Attention { q, k, v, past, probs }, out))
    }

    pub fn fake_quant(&mut self, x: Var, scale: Var, zero: Var, spec: QuantSpec) -> Result<Var> {
        let params = QuantParams {
            scale: self.value(scale).clone(),
            zero: self.value(zero).clone(),
            gamma: 1.0,
            beta: 1.0,
        };
        let v = fake_quant(self.value(x), &params, &spec)?;
        Ok(self.push(Op::FakeQuant { x, scale, zero, spec }, v))
    }

    pub fn dynamic_quant(&mut self, x: Var, gamma: Var, beta: Var, spec: QuantSpec) -> Result<Var> {
        let (g, b) = (scalar(self.value(gamma))?, scalar(self.value(beta))?);
        let xv = self.value(x);
        let ranges = spec.grouping(xv.shape())?.min_max(xv.data());
        let params = fit_params(xv, &spec, g, b)?;
        let v = fake_quant(xv, &params, &spec)?;
        Ok(self.push(Op::DynamicQuant { x, gamma, beta, spec, ranges, params }, v))
    }

    pub fn squared_error(&mut self, x: Var, target: &Tensor, denom: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::shape("squared_error", xv.shape(), target.shape()));
        }
        let s: f64 = xv.data().iter().zip(target.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        let v = Tensor::from_parts(vec![1], vec![(s / denom) as f32]);
        Ok(self.push(Op::SquaredError { x, target: target.clone(), denom }, v))
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).len() != 1 {
            return Err(Error::Invalid("backward needs a scalar output".into()));
        }
        self.backward_with(out, Tensor::from_parts(self.value(out).shape().to_vec(), vec![1.0]))
    }

    /// Vector–Jacobian product: seeds `out` with `seed`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape("backward", seed.shape(), self.value(out).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn backprop_node(&self, i: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(&mut grads[*a], matmul(g, &bv.transpose()?)?)?;
                acc(&mut grads[*b], matmul(&av.transpose()?, g)?)?;
            }
            Op::Add(a, b) => {
                acc(&mut grads[*a], g.clone())?;
                acc(&mut grads[*b], g.clone())?;
            }
            Op::Mul(a, b) => {
                acc(&mut grads[*a], mul(g, self.value(*b))?)?;
                acc(&mut grads[*b], mul(g, self.value(*a))?)?;
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let xd = x as f64;
                        let s = 1.0 / (1.0 + (-xd).exp());
                        (gy as f64 * s * (1.0 + xd * (1.0 - s))) as f32
                    })
                    .collect();
                acc(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), d))?;
            }
            Op::RmsNorm { x, gain, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let c = xv.last_dim();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![0.0f64; c];
                for (row, gy) in xv.data().chunks(c).zip(g.data().chunks(c)) {
                    let inv = rms_inverse(row, *eps);
                    let dot: f64 = (0..c).map(|j| gy[j] as f64 * gv.data()[j] as f64 * row[j] as f64).sum();
                    let k = inv.powi(3) * dot / c as f64;
                    for j in 0..c {
                        dx.push((inv * gv.data()[j] as f64 * gy[j] as f64 - row[j] as f64 * k) as f32);
                        dg[j] += gy[j] as f64 * row[j] as f64 * inv;
                    }
                }
                acc(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), dx))?;
                acc(&mut grads[*gain], Tensor::from_parts(gv.shape().to_vec(), dg.into_iter().map(|v| v as f32).collect()))?;
            }
            Op::Rope { x, head_dim, offset, theta } => {
                acc(&mut grads[*x], rope_apply(g, *head_dim, *offset, *theta, true)?)?;
            }
            Op::Rotate { x, h } => {
                acc(&mut grads[*x], h.apply_transpose(g)?)?;
            }
            Op::Reshape(x) => {
                acc(&mut grads[*x], g.reshape(self.value(*x).shape())?)?;
            }
            Op::Attention { q, k, v, past, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, past.as_ref(), probs, g)?;
                acc(&mut grads[*q], dq)?;
                acc(&mut grads[*k], dk)?;
                acc(&mut grads[*v], dv)?;
            }
            Op::FakeQuant { x, scale, zero, spec } => {
                let xv = self.value(*x);
                let grouping = spec.grouping(xv.shape())?;
                let (s, z) = (self.value(*scale).data(), self.value(*zero).data());
                let mut ds = vec![0.0f64; s.len()];
                let mut dz = vec![0.0f64; s.len()];
                let dx = quant_backward(xv.data(), g.data(), spec.qmax(), |i| grouping.group_of(i), s, z, &mut ds, &mut dz);
                acc(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), dx))?;
                let to = |v: Vec<f64>, like: &Tensor| Tensor::from_parts(like.shape().to_vec(), v.into_iter().map(|x| x as f32).collect());
                acc(&mut grads[*scale], to(ds, self.value(*scale)))?;
                acc(&mut grads[*zero], to(dz, self.value(*zero)))?;
            }
            Op::DynamicQuant { x, gamma, beta, spec, ranges, params } => {
                let xv = self.value(*x);
                let grouping = spec.grouping(xv.shape())?;
                let (s, z) = (params.scale.data(), params.zero.data());
                let mut ds = vec![0.0f64; s.len()];
                let mut dz = vec![0.0f64; s.len()];
                let dx = quant_backward(xv.data(), g.data(), spec.qmax(), |i| grouping.group_of(i), s, z, &mut ds, &mut dz);
                acc(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), dx))?;
                let (gm, bt) = (scalar(self.value(*gamma))? as f64, scalar(self.value(*beta))? as f64);
                let (mut dgamma, mut dbeta) = (0.0f64, 0.0f64);
                for (grp, &(lo, hi)) in ranges.iter().enumerate() {
                    if s[grp] <= SCALE_GUARD || lo == hi {
                        continue;
                    }
                    let (lo, hi) = (lo as f64, hi as f64);
                    if spec.symmetric {
                        let denom = (1u32 << (spec.bits - 1)) as f64 - 1.0;
                        if gm * hi >= -bt * lo {
                            dgamma += ds[grp] * hi / denom;
                        } else {
                            dbeta += ds[grp] * -lo / denom;
                        }
                    } else {
                        let q = spec.qmax() as f64;
                        dgamma += ds[grp] * hi / q;
                        dbeta += ds[grp] * -lo / q;
                    }
                }
                acc(&mut grads[*gamma], Tensor::from_parts(vec![1], vec![dgamma as f32]))?;
                acc(&mut grads[*beta], Tensor::from_parts(vec![1], vec![dbeta as f32]))?;
            }
            Op::SquaredError { x, target, denom } => {
                let gy = scalar(g)? as f64;
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| (gy * 2.0 * (a - b) as f64 / denom) as f32)
                    .collect();
                acc(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), d))?;
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        past: Option<&(Tensor, Tensor)>,
        probs: &[f64],
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [t_len, h, d] = qv.shape()[..] else {
            return Err(Error::shape("attention backward", qv.shape(), &[0, 0, 0]));
        };
        let n_past = past.map_or(0, |(pk, _)| pk.shape()[0]);
        let s_len = n_past + kv.shape()[0];
        let c = h * d;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, gd) = (qv.data(), g.data());
        // Key/value row `j` of the full sequence (past rows are constants).
        let key = |j: usize| -> &[f32] {
            match past {
                Some((pk, _)) if j < n_past => &pk.data()[j * c..(j + 1) * c],
                _ => &kv.data()[(j - n_past) * c..(j - n_past + 1) * c],
            }
        };
        let value = |j: usize| -> &[f32] {
            match past {
                Some((_, pv)) if j < n_past => &pv.data()[j * c..(j + 1) * c],
                _ => &vv.data()[(j - n_past) * c..(j - n_past + 1) * c],
            }
        };
        let mut dq = vec![0.0f64; qv.len()];
        let mut dk = vec![0.0f64; kv.len()];
        let mut dv = vec![0.0f64; vv.len()];
        for head in 0..h {
            let hs = head * d..head * d + d;
            for t in 0..t_len {
                let visible = s_len - t_len + t + 1;
                let base = (head * t_len + t) * s_len;
                let p = &probs[base..base + visible];
                let gt = &gd[t * c + hs.start..t * c + hs.end];
                let qt = &qd[t * c + hs.start..t * c + hs.end];
                let dp: Vec<f64> = (0..visible)
                    .map(|j| gt.iter().zip(&value(j)[hs.clone()]).map(|(&a, &b)| a as f64 * b as f64).sum())
                    .collect();
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..visible {
                    let dscore = p[j] * (dp[j] - dot) * scale;
                    for (e, &kj) in key(j)[hs.clone()].iter().enumerate() {
                        dq[t * c + hs.start + e] += dscore * kj as f64;
                    }
                    if j >= n_past {
                        let row = (j - n_past) * c + hs.start;
                        for e in 0..d {
                            dk[row + e] += dscore * qt[e] as f64;
                            dv[row + e] += p[j] * gt[e] as f64;
                        }
                    }
                }
            }
        }
        let to = |v: Vec<f64>, like: &Tensor| {
            Tensor::from_parts(like.shape().to_vec(), v.into_iter().map(|x| x as f32).collect())
        };
        Ok((to(dq, qv), to(dk, kv), to(dv, vv)))
    }
}

/// Shared backward of static and dynamic fake quantization; returns the
/// input gradient and accumulates per-group `ds`, `dz`.
#[allow(clippy::too_many_arguments)]
fn quant_backward(
    x: &[f32],
    gy: &[f32],
    qmax: f32,
    group_of: impl Fn(usize) -> usize,
    s: &[f32],
    z: &[f32],
    ds: &mut [f64],
    dz: &mut [f64],
) -> Vec<f32> {
    x.iter()
        .zip(gy)
        .enumerate()
        .map(|(i, (&xv, &g))| {
            let grp = group_of(i);
            let (sg, zg) = (s[grp], z[grp]);
            let r = (xv / sg).round_ties_even();
            let q = r + zg;
            let g64 = g as f64;
            if q > qmax {
                ds[grp] += g64 * (qmax - zg) as f64;
                dz[grp] -= g64 * sg as f64;
                0.0
            } else if q < 0.0 {
                ds[grp] -= g64 * zg as f64;
                dz[grp] -= g64 * sg as f64;
                0.0
            } else {
                ds[grp] += g64 * r as f64;
                g
            }
        })
        .collect()
}
