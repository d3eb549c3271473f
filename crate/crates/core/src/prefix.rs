//! Prefixed tokens: choosing them, prefilling their keys/values at full
//! precision and checking that they absorb the outliers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::container;
use crate::error::{Error, Result};
use crate::model::{attention, forward, ForwardOptions, KvCache, ToyModel, BOS};
use crate::outlier::{analyze, OutlierReport, OutlierThresholds};
use crate::tensor::Tensor;

pub const PREFIX_MAGIC: [u8; 4] = *b"PQPC";

/// Prefill order of the stored token list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixOrder {
    /// As listed, BOS last.
    #[default]
    Listed,
    /// BOS first.
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixPlan {
    /// Most frequent outlier tokens first, BOS last.
    pub token_ids: Vec<u32>,
    pub o: usize,
    #[serde(default)]
    pub order: PrefixOrder,
}

impl PrefixPlan {
    pub fn new(token_ids: Vec<u32>, order: PrefixOrder) -> Result<Self> {
        if token_ids.last() != Some(&BOS) {
            return Err(Error::Invalid("prefix plan must end with BOS".into()));
        }
        Ok(Self {
            o: token_ids.len(),
            token_ids,
            order,
        })
    }

    /// Tokens in the order they are prefilled.
    pub fn prefill_tokens(&self) -> Vec<u32> {
        let mut t = self.token_ids.clone();
        if self.order == PrefixOrder::Reversed {
            t.reverse();
        }
        t
    }
}

/// Takes the `o − 1` most frequent outlier tokens (ties to the smaller id)
/// and appends BOS. Fewer tokens are taken if the tally runs out.
pub fn select_prefix(tally: &BTreeMap<u32, usize>, o: usize, bos: u32) -> Result<PrefixPlan> {
    if o < 1 {
        return Err(Error::Invalid("o must be at least 1".into()));
    }
    let mut ranked: Vec<(u32, usize)> = tally
        .iter()
        .filter(|&(&id, &n)| id != bos && n > 0)
        .map(|(&id, &n)| (id, n))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ids: Vec<u32> = ranked.into_iter().take(o - 1).map(|(id, _)| id).collect();
    ids.push(bos);
    Ok(PrefixPlan {
        o: ids.len(),
        token_ids: ids,
        order: PrefixOrder::Listed,
    })
}

/// Plan from an outlier report; `o` is clamped to at least 1.
pub fn select_prefix_from_report(report: &OutlierReport, order: PrefixOrder) -> Result<PrefixPlan> {
    let mut p = select_prefix(&report.frequency, report.o.max(1), BOS)?;
    p.order = order;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache {
    pub plan: PrefixPlan,
    pub kv: KvCache,
    pub fingerprint: String,
}

/// Prefills the plan with the full-precision model (no hooks).
pub fn build_prefix_cache(model: &ToyModel, plan: &PrefixPlan) -> Result<PrefixCache> {
    let tokens = plan.prefill_tokens();
    if tokens.is_empty() {
        return Err(Error::Empty("prefix plan"));
    }
    let mut kv = KvCache::for_model(model);
    forward(model, &tokens, ForwardOptions::default(), Some(&mut kv))?;
    Ok(PrefixCache {
        plan: plan.clone(),
        kv,
        fingerprint: model.fingerprint(),
    })
}

impl PrefixCache {
    pub fn len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }

    /// Fails unless the cache was built from exactly this model.
    pub fn check_model(&self, model: &ToyModel) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::Fingerprint {
                cache: self.fingerprint.clone(),
                model: fp,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut shapes = Vec::new();
        for l in 0..self.kv.n_layers() {
            let (k, v) = (self.kv.keys(l), self.kv.values(l));
            shapes.push(k.shape().to_vec());
            tensors.insert(format!("layers.{l}.k"), k);
            tensors.insert(format!("layers.{l}.v"), v);
        }
        let mut meta = Map::new();
        meta.insert("plan".into(), serde_json::to_value(&self.plan)?);
        meta.insert("o".into(), self.plan.o.into());
        meta.insert("fingerprint".into(), self.fingerprint.clone().into());
        meta.insert("shapes".into(), serde_json::to_value(shapes)?);
        container::to_bytes(PREFIX_MAGIC, meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut meta, mut tensors) = container::from_bytes(PREFIX_MAGIC, bytes)?;
        let missing = |name: &str| Error::Inconsistent {
            name: name.to_string(),
            reason: "missing".into(),
        };
        let plan: PrefixPlan = serde_json::from_value(meta.remove("plan").ok_or_else(|| missing("plan"))?)?;
        let fingerprint: String =
            serde_json::from_value(meta.remove("fingerprint").ok_or_else(|| missing("fingerprint"))?)?;
        let n_layers = tensors.len() / 2;
        let mut keys = Vec::with_capacity(n_layers);
        let mut values = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let k = format!("layers.{l}.k");
            let v = format!("layers.{l}.v");
            keys.push(tensors.remove(&k).ok_or_else(|| missing(&k))?);
            values.push(tensors.remove(&v).ok_or_else(|| missing(&v))?);
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Inconsistent {
                name: name.clone(),
                reason: "unexpected tensor".into(),
            });
        }
        let kv = KvCache::from_layers(keys, values)?;
        if kv.len() != plan.o || plan.token_ids.len() != plan.o {
            return Err(Error::Inconsistent {
                name: "plan".into(),
                reason: format!("o = {} but cache holds {} positions", plan.o, kv.len()),
            });
        }
        Ok(Self { plan, kv, fingerprint })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// Attention with full-precision prefix keys/values prepended: every query
/// sees the whole prefix, and the suffix is causal among itself.
pub fn attention_with_prefix(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    k_prefix: Option<&Tensor>,
    v_prefix: Option<&Tensor>,
) -> Result<Tensor> {
    match (k_prefix, v_prefix) {
        (Some(kp), Some(vp)) => {
            if kp.shape() != vp.shape() {
                return Err(Error::shape("attention_with_prefix", kp.shape(), vp.shape()));
            }
            if kp.shape()[0] == 0 {
                return attention(q, k, v);
            }
            attention(q, &Tensor::concat_rows(&[kp, k])?, &Tensor::concat_rows(&[vp, v])?)
        }
        (None, None) => attention(q, k, v),
        _ => Err(Error::Invalid("prefix keys and values must both be given".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub plan: PrefixPlan,
    /// Upper-outlier positions at block outputs, summed over sequences.
    pub residual_without_prefix: usize,
    pub residual_with_prefix: usize,
    /// Largest `max(M)/median(M)` at block outputs.
    pub top1_over_median_without: f64,
    pub top1_over_median_with: f64,
    pub counts_without: Vec<f64>,
    pub counts_with: Vec<f64>,
}

/// Reruns detection on the suffix positions with the prefix active. The
/// baseline counts every position except the initial token.
pub fn verify_isolation(
    model: &ToyModel,
    cache: &PrefixCache,
    sequences: &[Vec<u32>],
    th: &OutlierThresholds,
) -> Result<IsolationReport> {
    cache.check_model(model)?;
    let without = analyze(model, sequences, th, None)?;
    let with = analyze(model, sequences, th, Some(&cache.kv))?;
    Ok(IsolationReport {
        plan: cache.plan.clone(),
        residual_without_prefix: without.upper_positions(),
        residual_with_prefix: with.upper_positions(),
        top1_over_median_without: without.aggregates["block_output"].top1_over_median,
        top1_over_median_with: with.aggregates["block_output"].top1_over_median,
        counts_without: without.counts,
        counts_with: with.counts,
    })
}
