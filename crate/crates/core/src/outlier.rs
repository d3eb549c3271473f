//! Token-wise outlier statistics.
//!
//! For token-wise maxima `M`, `R_i = M_i / median(M)` (lower median, guarded
//! to `1e-12`). Token `i` is an upper outlier when `R_i > η1` and a lower
//! outlier when `1/R_i > η2`. Counting uses block outputs only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::with_bos;
use crate::error::{Error, Result};
use crate::model::{forward, CaptureSite, ForwardOptions, KvCache, Linear, ToyModel};
use crate::tensor::{median, Tensor};

pub const MEDIAN_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierThresholds {
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for OutlierThresholds {
    fn default() -> Self {
        Self { eta1: 64.0, eta2: 8.0 }
    }
}

impl OutlierThresholds {
    pub fn new(eta1: f64, eta2: f64) -> Result<Self> {
        let t = Self { eta1, eta2 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 1.0 && self.eta2 > 1.0) {
            return Err(Error::Invalid(format!(
                "thresholds must exceed 1 (eta1 {}, eta2 {})",
                self.eta1, self.eta2
            )));
        }
        Ok(())
    }
}

/// `M_i = max_c |x_{i,c}|` over everything but the leading (token) axis.
pub fn token_maxima(x: &Tensor) -> Result<Tensor> {
    let t = x.shape()[0];
    if x.shape().len() < 2 {
        return Err(Error::shape("token_maxima", x.shape(), &[t, 0]));
    }
    let inner = x.len() / t;
    let m = x
        .data()
        .chunks(inner)
        .map(|r| r.iter().fold(0.0f32, |a, &v| a.max(v.abs())))
        .collect();
    Ok(Tensor::from_parts(vec![t], m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub ratios: Vec<f32>,
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

/// Ratios and upper/lower index sets for one vector of maxima.
pub fn classify_outliers(m: &[f32], th: &OutlierThresholds) -> Result<Classification> {
    let med = median(m).ok_or(Error::Empty("token maxima"))? as f64;
    let med = med.max(MEDIAN_GUARD);
    let mut c = Classification {
        ratios: Vec::with_capacity(m.len()),
        upper: Vec::new(),
        lower: Vec::new(),
    };
    for (i, &v) in m.iter().enumerate() {
        let r = v as f64 / med;
        if r > th.eta1 {
            c.upper.push(i);
        }
        if r == 0.0 || 1.0 / r > th.eta2 {
            c.lower.push(i);
        }
        c.ratios.push(r as f32);
    }
    Ok(c)
}

/// Statistics of one site on one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub maxima: Vec<f32>,
    pub ratios: Vec<f32>,
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

impl SiteStats {
    fn from_activation(x: &Tensor, th: &OutlierThresholds) -> Result<Self> {
        let m = token_maxima(x)?.into_data();
        let c = classify_outliers(&m, th)?;
        Ok(Self {
            maxima: m,
            ratios: c.ratios,
            upper: c.upper,
            lower: c.lower,
        })
    }

    /// `max(M) / median(M)`.
    pub fn top1_over_median(&self) -> f64 {
        let med = (median(&self.maxima).unwrap_or(0.0) as f64).max(MEDIAN_GUARD);
        self.maxima.iter().fold(0.0f64, |a, &v| a.max(v as f64)) / med
    }

    /// `median(M) / min(M)`.
    pub fn median_over_min(&self) -> f64 {
        let med = median(&self.maxima).unwrap_or(0.0) as f64;
        let min = self.maxima.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64));
        med / min.max(MEDIAN_GUARD)
    }
}

/// Sites reported per layer. Only `block_output` is used for counting.
pub const REPORT_SITES: [&str; 4] = ["block_output", "down_proj_input", "q", "k"];

fn capture_site(name: &str) -> CaptureSite {
    match name {
        "block_output" => CaptureSite::BlockOutput,
        "down_proj_input" => CaptureSite::LinearInput(Linear::DownProj),
        "q" => CaptureSite::Q,
        "k" => CaptureSite::K,
        _ => unreachable!("unknown report site {name}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Site name → one entry per sequence.
    pub sites: BTreeMap<String, Vec<SiteStats>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Largest `max(M)/median(M)` over layers and sequences.
    pub top1_over_median: f64,
    /// Largest `median(M)/min(M)` over layers and sequences.
    pub median_over_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub thresholds: OutlierThresholds,
    pub n_sequences: usize,
    /// Whether a prefix cache was active (then no BOS is prepended and
    /// position 0 is not treated as the initial token).
    pub prefixed: bool,
    pub layers: Vec<LayerStats>,
    /// Mean number of upper outliers at each block output.
    pub counts: Vec<f64>,
    /// `⌈max(counts)⌉`.
    pub o: usize,
    /// Site name → aggregates.
    pub aggregates: BTreeMap<String, Aggregates>,
    /// Token id → number of (sequence, position) pairs that are an upper
    /// outlier at some block output, excluding the initial token.
    pub frequency: BTreeMap<u32, usize>,
    /// Tokens actually fed to the model, per sequence.
    pub tokens: Vec<Vec<u32>>,
}

/// Runs FP32 forwards over `sequences` and collects every statistic. Without
/// a prefix, BOS is prepended to each sequence.
pub fn analyze(
    model: &ToyModel,
    sequences: &[Vec<u32>],
    th: &OutlierThresholds,
    prefix: Option<&KvCache>,
) -> Result<OutlierReport> {
    th.validate()?;
    if sequences.is_empty() {
        return Err(Error::Empty("calibration sequences"));
    }
    let prefixed = prefix.is_some_and(|p| !p.is_empty());
    let n_layers = model.config.n_layers;
    let mut layers: Vec<LayerStats> = (0..n_layers)
        .map(|layer| LayerStats {
            layer,
            sites: REPORT_SITES.iter().map(|s| (s.to_string(), Vec::new())).collect(),
        })
        .collect();
    let mut tokens_used = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let tokens = if prefixed { seq.clone() } else { with_bos(seq) };
        let out = forward(
            model,
            &tokens,
            ForwardOptions {
                hooks: None,
                prefix,
                capture: true,
            },
            None,
        )?;
        for (layer, stats) in layers.iter_mut().enumerate() {
            for name in REPORT_SITES {
                let x = &out.captures[&(layer, capture_site(name))];
                let s = SiteStats::from_activation(x, th)?;
                stats.sites.get_mut(name).expect("site present").push(s);
            }
        }
        tokens_used.push(tokens);
    }
    Ok(summarize(*th, prefixed, layers, tokens_used))
}

/// Derives every aggregate from the per-sequence statistics.
pub fn summarize(
    thresholds: OutlierThresholds,
    prefixed: bool,
    layers: Vec<LayerStats>,
    tokens: Vec<Vec<u32>>,
) -> OutlierReport {
    let n = tokens.len();
    let counts: Vec<f64> = layers
        .iter()
        .map(|l| {
            let total: usize = l.sites["block_output"].iter().map(|s| s.upper.len()).sum();
            total as f64 / n as f64
        })
        .collect();
    let o = counts.iter().cloned().fold(0.0f64, f64::max).ceil() as usize;

    let mut aggregates = BTreeMap::new();
    for name in REPORT_SITES {
        let mut a = Aggregates {
            top1_over_median: 0.0,
            median_over_min: 0.0,
        };
        for l in &layers {
            for s in &l.sites[name] {
                a.top1_over_median = a.top1_over_median.max(s.top1_over_median());
                a.median_over_min = a.median_over_min.max(s.median_over_min());
            }
        }
        aggregates.insert(name.to_string(), a);
    }

    let mut frequency = BTreeMap::new();
    let skip = usize::from(!prefixed);
    for (seq, toks) in tokens.iter().enumerate() {
        let mut positions: Vec<usize> = layers
            .iter()
            .flat_map(|l| l.sites["block_output"][seq].upper.iter().copied())
            .filter(|&p| p >= skip)
            .collect();
        positions.sort_unstable();
        positions.dedup();
        for p in positions {
            *frequency.entry(toks[p]).or_insert(0) += 1;
        }
    }
    OutlierReport {
        thresholds,
        n_sequences: n,
        prefixed,
        layers,
        counts,
        o,
        aggregates,
        frequency,
        tokens,
    }
}

impl OutlierReport {
    /// Recomputes every derived field from the stored maxima.
    pub fn recompute(&self) -> Result<OutlierReport> {
        let mut layers = self.layers.clone();
        for l in &mut layers {
            for stats in l.sites.values_mut() {
                for s in stats.iter_mut() {
                    let c = classify_outliers(&s.maxima, &self.thresholds)?;
                    s.ratios = c.ratios;
                    s.upper = c.upper;
                    s.lower = c.lower;
                }
            }
        }
        Ok(summarize(self.thresholds, self.prefixed, layers, self.tokens.clone()))
    }

    /// Total number of upper outliers at block outputs, counting each
    /// (sequence, position) once, excluding the initial token.
    pub fn upper_positions(&self) -> usize {
        self.frequency.values().sum()
    }

    /// `layer,site,sequence,position,maximum` rows.
    pub fn maxima_csv(&self) -> String {
        let mut s = String::from("layer,site,sequence,position,maximum\n");
        for l in &self.layers {
            for (name, stats) in &l.sites {
                for (seq, st) in stats.iter().enumerate() {
                    for (pos, m) in st.maxima.iter().enumerate() {
                        let _ = writeln!(s, "{},{name},{seq},{pos},{m}", l.layer);
                    }
                }
            }
        }
        s
    }
}

/// Mean block-output outlier counts `O` and `o = ⌈max(O)⌉`.
pub fn count_outlier_tokens(
    model: &ToyModel,
    sequences: &[Vec<u32>],
    th: &OutlierThresholds,
) -> Result<(Vec<f64>, usize)> {
    let r = analyze(model, sequences, th, None)?;
    Ok((r.counts, r.o))
}

/// Token id → count of non-initial upper-outlier positions.
pub fn frequency_tally(
    model: &ToyModel,
    sequences: &[Vec<u32>],
    th: &OutlierThresholds,
) -> Result<BTreeMap<u32, usize>> {
    Ok(analyze(model, sequences, th, None)?.frequency)
}
