use std::collections::BTreeMap;

use rayon::prelude::*;

use super::hooks::{QuantHookSet, SiteId, SiteKind};
use super::{Linear, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::{add, matmul, mul, rmsnorm, rope_apply, silu, softmax_in_place, Tensor};

/// Keys/values per layer, each `[len × n_heads × head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    n_heads: usize,
    head_dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            n_heads,
            head_dim,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
        }
    }

    pub fn for_model(model: &ToyModel) -> Self {
        let c = &model.config;
        Self::new(c.n_layers, c.n_heads, c.head_dim)
    }

    /// Builds a cache from per-layer tensors; all must share one length.
    pub fn from_layers(keys: Vec<Tensor>, values: Vec<Tensor>) -> Result<Self> {
        let first = keys.first().ok_or(Error::Empty("kv cache layers"))?;
        let [len, h, d] = first.shape()[..] else {
            return Err(Error::shape("kv cache", first.shape(), &[0, 0, 0]));
        };
        if keys.len() != values.len() {
            return Err(Error::Invalid("key/value layer counts differ".into()));
        }
        for t in keys.iter().chain(&values) {
            if t.shape() != [len, h, d] {
                return Err(Error::shape("kv cache", first.shape(), t.shape()));
            }
        }
        Ok(Self {
            n_heads: h,
            head_dim: d,
            keys: keys.into_iter().map(Tensor::into_data).collect(),
            values: values.into_iter().map(Tensor::into_data).collect(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len() / (self.n_heads * self.head_dim))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self, layer: usize) -> Tensor {
        self.layer_tensor(&self.keys[layer])
    }

    pub fn values(&self, layer: usize) -> Tensor {
        self.layer_tensor(&self.values[layer])
    }

    fn layer_tensor(&self, data: &[f32]) -> Tensor {
        let len = data.len() / (self.n_heads * self.head_dim);
        Tensor::from_parts(vec![len, self.n_heads, self.head_dim], data.to_vec())
    }

    fn append(&mut self, layer: usize, k: &Tensor, v: &Tensor) {
        self.keys[layer].extend_from_slice(k.data());
        self.values[layer].extend_from_slice(v.data());
    }

    fn lengths_consistent(&self) -> bool {
        self.keys
            .iter()
            .chain(&self.values)
            .all(|k| k.len() == self.keys[0].len())
    }
}

/// Intermediate values exposed by a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CaptureSite {
    BlockInput,
    /// Input to a linear layer before any quantization hook.
    LinearInput(Linear),
    /// Post-RoPE (and post-R3) query/key, value; `[T × n_heads × head_dim]`,
    /// before quantization.
    Q,
    K,
    V,
    BlockOutput,
}

pub type Captures = BTreeMap<(usize, CaptureSite), Tensor>;

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub hooks: Option<&'a QuantHookSet>,
    /// Full-precision prefix keys/values, attended by every position.
    pub prefix: Option<&'a KvCache>,
    pub capture: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub captures: Captures,
}

pub struct BlockOutput {
    pub out: Tensor,
    /// New keys/values after hooks, `[T × n_heads × head_dim]`.
    pub k: Tensor,
    pub v: Tensor,
}

/// Causal multi-head attention. `q` is `[T × H × D]`, `k`/`v` are
/// `[S × H × D]` with `S ≥ T`; query `t` sees keys `0..=S−T+t`. Returns
/// `[T × H·D]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attention_impl(q, k, v, false)?.0)
}

/// [`attention`] plus the softmax probabilities, laid out `[H][T][S]`
/// (masked entries are zero).
pub fn attention_probs(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (out, p) = attention_impl(q, k, v, true)?;
    Ok((out, p.expect("probabilities requested")))
}

fn attention_impl(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    keep: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let [t_len, h, d] = q.shape()[..] else {
        return Err(Error::shape("attention", q.shape(), &[0, 0, 0]));
    };
    let [s_len, hk, dk] = k.shape()[..] else {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    };
    if hk != h || dk != d || v.shape() != k.shape() || s_len < t_len {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let past = s_len - t_len;
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let c = h * d;

    let rows: Vec<(Vec<f32>, Vec<f64>)> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let visible = past + t + 1;
            let mut out = vec![0.0f32; c];
            let mut probs = if keep { vec![0.0f64; h * s_len] } else { Vec::new() };
            let mut p = vec![0.0f64; visible];
            for head in 0..h {
                let qrow = &qd[t * c + head * d..t * c + head * d + d];
                for (j, pj) in p.iter_mut().enumerate() {
                    let krow = &kd[j * c + head * d..j * c + head * d + d];
                    let dot: f64 = qrow.iter().zip(krow).map(|(&a, &b)| a as f64 * b as f64).sum();
                    *pj = dot * scale;
                }
                softmax_in_place(&mut p);
                let mut acc = vec![0.0f64; d];
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = &vd[j * c + head * d..j * c + head * d + d];
                    for (a, &x) in acc.iter_mut().zip(vrow) {
                        *a += pj * x as f64;
                    }
                }
                for (o, a) in out[head * d..head * d + d].iter_mut().zip(acc) {
                    *o = a as f32;
                }
                if keep {
                    probs[head * s_len..head * s_len + visible].copy_from_slice(&p);
                }
            }
            (out, probs)
        })
        .collect();

    let mut out = Vec::with_capacity(t_len * c);
    let mut probs = keep.then(|| vec![0.0f64; h * t_len * s_len]);
    for (t, (o, p)) in rows.into_iter().enumerate() {
        out.extend_from_slice(&o);
        if let Some(all) = probs.as_mut() {
            for head in 0..h {
                let dst = (head * t_len + t) * s_len;
                all[dst..dst + s_len].copy_from_slice(&p[head * s_len..(head + 1) * s_len]);
            }
        }
    }
    Ok((Tensor::from_parts(vec![t_len, c], out), probs))
}

fn hooked(hooks: Option<&QuantHookSet>, site: SiteId, x: Tensor) -> Result<Tensor> {
    match hooks {
        Some(h) => Ok(h.apply(site, &x)?.unwrap_or(x)),
        None => Ok(x),
    }
}

struct BlockRun<'a> {
    model: &'a ToyModel,
    layer: usize,
    hooks: Option<&'a QuantHookSet>,
    captures: Option<&'a mut Captures>,
}

impl BlockRun<'_> {
    fn capture(&mut self, site: CaptureSite, t: &Tensor) {
        if let Some(c) = self.captures.as_deref_mut() {
            c.insert((self.layer, site), t.clone());
        }
    }

    fn site(&self, kind: SiteKind) -> SiteId {
        SiteId::new(self.layer, kind)
    }

    fn linear(&mut self, lin: Linear, x: &Tensor) -> Result<Tensor> {
        self.capture(CaptureSite::LinearInput(lin), x);
        let xq = hooked(self.hooks, self.site(SiteKind::Input(lin)), x.clone())?;
        let w = self.model.layers[self.layer].linear(lin);
        match self.hooks.map(|h| h.apply(self.site(SiteKind::Weight(lin)), w)).transpose()?.flatten() {
            Some(wq) => matmul(&xq, &wq),
            None => matmul(&xq, w),
        }
    }
}

/// One transformer block on hidden states `x` (`[T × hidden]`). `past` holds
/// keys/values of every earlier position (prefix then cache); the new tokens
/// sit at positions `past_len..past_len+T`.
pub fn block_forward(
    model: &ToyModel,
    layer: usize,
    x: &Tensor,
    past: Option<(&Tensor, &Tensor)>,
    hooks: Option<&QuantHookSet>,
    captures: Option<&mut Captures>,
) -> Result<BlockOutput> {
    let cfg = &model.config;
    let w = &model.layers[layer];
    let (t_len, _) = x.dims2("block_forward")?;
    let past_len = past.map_or(0, |(k, _)| k.shape()[0]);
    let mut run = BlockRun {
        model,
        layer,
        hooks,
        captures,
    };
    run.capture(CaptureSite::BlockInput, x);

    let h = rmsnorm(x, &w.attn_norm, cfg.norm_eps)?;
    let q = run.linear(Linear::QProj, &h)?;
    let k = run.linear(Linear::KProj, &h)?;
    let v = run.linear(Linear::VProj, &h)?;
    let mut q = rope_apply(&q, cfg.head_dim, past_len, cfg.rope_theta, false)?;
    let mut k = rope_apply(&k, cfg.head_dim, past_len, cfg.rope_theta, false)?;
    if let Some(r3) = &model.online_r3 {
        q = r3.apply(&q)?;
        k = r3.apply(&k)?;
    }
    let qkv_shape = [t_len, cfg.n_heads, cfg.head_dim];
    let q = q.reshape(&qkv_shape)?;
    let k = k.reshape(&qkv_shape)?;
    let v = v.reshape(&qkv_shape)?;
    run.capture(CaptureSite::Q, &q);
    run.capture(CaptureSite::K, &k);
    run.capture(CaptureSite::V, &v);
    let q = hooked(hooks, run.site(SiteKind::Q), q)?;
    let k = hooked(hooks, run.site(SiteKind::K), k)?;
    let v = hooked(hooks, run.site(SiteKind::V), v)?;

    let attn = match past {
        Some((pk, pv)) => attention(
            &q,
            &Tensor::concat_rows(&[pk, &k])?,
            &Tensor::concat_rows(&[pv, &v])?,
        )?,
        None => attention(&q, &k, &v)?,
    };
    let o = run.linear(Linear::OProj, &attn)?;
    let x1 = add(x, &o)?;

    let h2 = rmsnorm(&x1, &w.mlp_norm, cfg.norm_eps)?;
    let g = run.linear(Linear::GateProj, &h2)?;
    let u = run.linear(Linear::UpProj, &h2)?;
    let mut act = mul(&silu(&g), &u)?;
    if let Some(r4) = &model.online_r4 {
        act = r4.apply(&act)?;
    }
    let down = run.linear(Linear::DownProj, &act)?;
    let out = add(&x1, &down)?;
    run.capture(CaptureSite::BlockOutput, &out);
    Ok(BlockOutput { out, k, v })
}

/// Embedding rows for `tokens` (`[T × hidden]`).
pub fn embed(model: &ToyModel, tokens: &[u32]) -> Result<Tensor> {
    let cfg = &model.config;
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab) {
        return Err(Error::TokenRange { id, vocab: cfg.vocab });
    }
    Ok(Tensor::from_parts(
        vec![tokens.len(), cfg.hidden],
        tokens
            .iter()
            .flat_map(|&t| model.embedding.row(t as usize).iter().copied())
            .collect(),
    ))
}

/// Full forward over `tokens`, optionally continuing `cache` (which is
/// extended in place) and attending to a full-precision prefix.
pub fn forward(
    model: &ToyModel,
    tokens: &[u32],
    opts: ForwardOptions<'_>,
    mut cache: Option<&mut KvCache>,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab) {
        return Err(Error::TokenRange {
            id,
            vocab: cfg.vocab,
        });
    }
    if let Some(h) = opts.hooks {
        h.check_config(cfg)?;
    }
    let prefix_len = opts.prefix.map_or(0, KvCache::len);
    let cache_len = cache.as_deref().map_or(0, KvCache::len);
    let needed = prefix_len + cache_len + tokens.len();
    if needed > cfg.max_seq {
        return Err(Error::SequenceOverflow {
            needed,
            max_seq: cfg.max_seq,
        });
    }
    for kv in opts.prefix.iter().copied().chain(cache.as_deref()) {
        if kv.n_layers() != cfg.n_layers || kv.n_heads != cfg.n_heads || kv.head_dim != cfg.head_dim {
            return Err(Error::Invalid("kv cache geometry does not match model".into()));
        }
    }

    let mut x = embed(model, tokens)?;
    let mut captures = Captures::new();
    for layer in 0..cfg.n_layers {
        let mut parts_k = Vec::new();
        let mut parts_v = Vec::new();
        if let Some(p) = opts.prefix.filter(|p| !p.is_empty()) {
            parts_k.push(p.keys(layer));
            parts_v.push(p.values(layer));
        }
        if let Some(c) = cache.as_deref().filter(|_| cache_len > 0) {
            parts_k.push(c.keys(layer));
            parts_v.push(c.values(layer));
        }
        let past = if parts_k.is_empty() {
            None
        } else {
            let rk: Vec<&Tensor> = parts_k.iter().collect();
            let rv: Vec<&Tensor> = parts_v.iter().collect();
            Some((Tensor::concat_rows(&rk)?, Tensor::concat_rows(&rv)?))
        };
        let b = block_forward(
            model,
            layer,
            &x,
            past.as_ref().map(|(k, v)| (k, v)),
            opts.hooks,
            opts.capture.then_some(&mut captures),
        )?;
        if let Some(c) = cache.as_deref_mut() {
            c.append(layer, &b.k, &b.v);
        }
        x = b.out;
    }
    if let Some(c) = cache.as_deref() {
        debug_assert!(c.lengths_consistent());
    }
    let normed = rmsnorm(&x, &model.final_norm, cfg.norm_eps)?;
    let logits = matmul(&normed, &model.lm_head)?;
    Ok(ForwardOutput { logits, captures })
}

/// `exp(mean NLL)` over non-overlapping windows of `context_len` predicted
/// tokens. Each window starts with BOS unless a prefix (which ends with BOS)
/// is active; neither BOS nor prefix positions are scored.
pub fn perplexity(
    model: &ToyModel,
    corpus: &[u32],
    hooks: Option<&QuantHookSet>,
    prefix: Option<&KvCache>,
    context_len: usize,
) -> Result<f64> {
    if context_len == 0 || corpus.len() < context_len + 1 {
        return Err(Error::Invalid(format!(
            "corpus of {} tokens is too short for context {}",
            corpus.len(),
            context_len
        )));
    }
    let windows = (corpus.len() - 1) / context_len;
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for w in 0..windows {
        let start = w * context_len;
        let text = &corpus[start..start + context_len];
        let target = &corpus[start + 1..start + context_len + 1];
        let prefixed = prefix.is_some_and(|p| !p.is_empty());
        let input = if prefixed { text.to_vec() } else { crate::corpus::with_bos(text) };
        let out = forward(
            model,
            &input,
            ForwardOptions {
                hooks,
                prefix,
                capture: false,
            },
            None,
        )?;
        let skip = usize::from(!prefixed);
        for (row, &y) in out.logits.data().chunks(model.config.vocab).skip(skip).zip(target) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[y as usize] as f64;
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SiteQuantizer};
    use crate::quant::{Granularity, Mode, QuantSpec};
    use crate::tensor::Rng;

    fn model() -> ToyModel {
        ToyModel::init_random(ModelConfig::tiny(), &mut Rng::seed(21)).unwrap()
    }

    fn tokens(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = Rng::seed(seed);
        (0..n).map(|_| rng.below(256) as u32).collect()
    }

    fn logits(m: &ToyModel, t: &[u32], opts: ForwardOptions<'_>) -> Tensor {
        forward(m, t, opts, None).unwrap().logits
    }

    #[test]
    fn causal() {
        let m = model();
        let a = tokens(20, 1);
        let mut b = a.clone();
        b[12] = (b[12] + 1) % 256;
        let (la, lb) = (logits(&m, &a, Default::default()), logits(&m, &b, Default::default()));
        let v = m.config.vocab;
        assert_eq!(la.data()[..12 * v], lb.data()[..12 * v]);
        assert_ne!(la.data()[12 * v..13 * v], lb.data()[12 * v..13 * v]);
    }

    #[test]
    fn cache_matches_full_pass() {
        let m = model();
        let t = tokens(30, 2);
        let full = logits(&m, &t, Default::default());
        let mut cache = KvCache::for_model(&m);
        let a = forward(&m, &t[..17], Default::default(), Some(&mut cache)).unwrap();
        let b = forward(&m, &t[17..], Default::default(), Some(&mut cache)).unwrap();
        assert_eq!(cache.len(), 30);
        let joined = Tensor::concat_rows(&[&a.logits, &b.logits]).unwrap();
        assert!(joined.max_abs_diff(&full) < 1e-5);
    }

    #[test]
    fn prefix_matches_full_sequence() {
        let m = model();
        let t = tokens(24, 3);
        let full = logits(&m, &t, Default::default());
        let mut prefix = KvCache::for_model(&m);
        forward(&m, &t[..3], Default::default(), Some(&mut prefix)).unwrap();
        let opts = ForwardOptions {
            prefix: Some(&prefix),
            ..Default::default()
        };
        let tail = logits(&m, &t[3..], opts);
        assert!(tail.max_abs_diff(&full.slice_rows(3, 24)) < 1e-5);

        let empty = KvCache::for_model(&m);
        let opts = ForwardOptions {
            prefix: Some(&empty),
            ..Default::default()
        };
        assert_eq!(logits(&m, &t, opts), full);
    }

    #[test]
    fn sixteen_bit_hooks_are_transparent() {
        let m = model();
        let t = tokens(32, 4);
        let mut hooks = QuantHookSet::new();
        let w = QuantSpec::new(16, Granularity::PerChannel, Mode::Dynamic).unwrap();
        let a = QuantSpec::new(16, Granularity::PerToken, Mode::Dynamic).unwrap();
        for l in 0..m.config.n_layers {
            for kind in SiteKind::block_order() {
                let spec = match kind {
                    SiteKind::Weight(_) => w,
                    _ => a,
                };
                hooks.insert(SiteId::new(l, kind), SiteQuantizer::new(spec)).unwrap();
            }
        }
        let opts = ForwardOptions {
            hooks: Some(&hooks),
            ..Default::default()
        };
        let q = logits(&m, &t, opts);
        assert!(q.max_abs_diff(&logits(&m, &t, Default::default())) < 1e-3);
        let p0 = perplexity(&m, &t, None, None, 15).unwrap();
        let p1 = perplexity(&m, &t, Some(&hooks), None, 15).unwrap();
        assert!((p1 - p0).abs() / p0 < 1e-3);
    }

    #[test]
    fn captures_and_errors() {
        let m = model();
        let t = tokens(10, 5);
        let out = forward(
            &m,
            &t,
            ForwardOptions {
                capture: true,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(out.captures[&(1, CaptureSite::K)].shape(), &[10, 2, 32]);
        assert_eq!(out.captures[&(0, CaptureSite::LinearInput(Linear::DownProj))].shape(), &[10, 128]);
        assert!(matches!(
            forward(&m, &[300], Default::default(), None),
            Err(Error::TokenRange { .. })
        ));
        let long = tokens(257, 6);
        assert!(matches!(
            forward(&m, &long, Default::default(), None),
            Err(Error::SequenceOverflow { .. })
        ));
        assert!(perplexity(&m, &t, None, None, 10).is_err());
    }

    #[test]
    fn perplexity_reference_points() {
        // Zero lm_head gives uniform predictions.
        let mut m = model();
        m.lm_head = Tensor::zeros(&[64, m.config.vocab]);
        let t = tokens(65, 7);
        let p = perplexity(&m, &t, None, None, 32).unwrap();
        assert!((p - 257.0).abs() < 1e-3, "{p}");

        // A BOS-only prefix stands in for the BOS each window would get.
        let m = model();
        let t = tokens(97, 9);
        let mut bos = KvCache::for_model(&m);
        forward(&m, &[crate::model::BOS], Default::default(), Some(&mut bos)).unwrap();
        let a = perplexity(&m, &t, None, None, 32).unwrap();
        let b = perplexity(&m, &t, None, Some(&bos), 32).unwrap();
        assert!((a - b).abs() < 1e-4 * a, "{a} vs {b}");

        // One-hot embeddings with a large identity head predict the next
        // token perfectly on a corpus where every token repeats itself.
        let mut m = model();
        for w in &mut m.layers {
            w.o_proj = Tensor::zeros(w.o_proj.shape());
            w.down_proj = Tensor::zeros(w.down_proj.shape());
        }
        m.embedding = Tensor::from_fn(&[257, 64], |i| if i % 64 == (i / 64) % 64 { 1.0 } else { 0.0 });
        // Only the first 64 tokens get a one-hot embedding of their own.
        m.lm_head = Tensor::from_fn(&[64, 257], |i| if i / 257 == i % 257 { 400.0 } else { 0.0 });
        let t = vec![5u32; 65];
        let p = perplexity(&m, &t, None, None, 32).unwrap();
        assert!((p - 1.0).abs() < 1e-3, "{p}");
    }

    #[test]
    fn attention_against_naive() {
        let mut rng = Rng::seed(8);
        let q = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[5, 2, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[5, 2, 4], 1.0, &mut rng);
        let (out, probs) = attention_probs(&q, &k, &v).unwrap();
        for h in 0..2 {
            for t in 0..3 {
                let vis = 2 + t + 1;
                let s: Vec<f64> = (0..vis)
                    .map(|j| (0..4).map(|d| (q.data()[t * 8 + h * 4 + d] * k.data()[j * 8 + h * 4 + d]) as f64).sum::<f64>() / 2.0)
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for d in 0..4 {
                    let want: f64 = (0..vis).map(|j| (s[j] - m).exp() / z * v.data()[j * 8 + h * 4 + d] as f64).sum();
                    assert!((out.data()[t * 8 + h * 4 + d] as f64 - want).abs() < 1e-5);
                }
                let row = &probs[(h * 3 + t) * 5..(h * 3 + t + 1) * 5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[vis..].iter().all(|&p| p == 0.0));
            }
        }
    }
}
