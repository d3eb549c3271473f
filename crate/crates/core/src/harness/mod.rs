//! Experiment orchestration: quantization schemes, the staged pipeline,
//! error tables and the JSON report envelope.

mod errors;
mod pipeline;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::CalibConfig;
use crate::error::{Error, Result};
use crate::finetune::TrainConfig;
use crate::model::{Linear, ModelConfig, QuantHookSet, SiteId, SiteKind, SiteQuantizer};
use crate::outlier::OutlierThresholds;
use crate::prefix::PrefixOrder;
use crate::quant::{Granularity, Mode, QuantSpec};

pub use errors::{error_decomposition, error_table, ErrorBreakdown, ErrorTable, Stage, StageError};
pub use pipeline::{evaluate, run_pipeline, split_corpus, EvalConfig, EvalReport, OutlierSummary, PipelineOutput, PipelineReport, PrefixSummary};

/// The shipped toy corpus (128 KiB, seed 0).
pub const TOY_CORPUS: &str = include_str!("../../data/toy_corpus.txt");

/// Tokens of [`TOY_CORPUS`].
pub fn toy_corpus() -> Vec<u32> {
    crate::model::tokenize(TOY_CORPUS.as_bytes())
}

/// Tokens of the text file at `path`, or of the shipped corpus.
pub fn load_corpus(path: Option<&Path>) -> Result<Vec<u32>> {
    match path {
        Some(p) => Ok(crate::model::tokenize(&crate::container::read_file(p)?)),
        None => Ok(toy_corpus()),
    }
}

/// Bit widths at or above this leave a site class unquantized.
pub const FULL_PRECISION_BITS: u8 = 16;

/// Weight-only group size.
pub const WEIGHT_GROUP: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Per-channel weights, per-token dynamic activations, group-wise
    /// dynamic K/V.
    O1,
    /// Per-channel weights, per-tensor static activations, per-head static
    /// K/V.
    O2,
    /// Group-wise weights only.
    #[serde(rename = "weight_only")]
    WeightOnly,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "o1" => Ok(Scheme::O1),
            "o2" => Ok(Scheme::O2),
            "weight_only" | "weight-only" | "w" => Ok(Scheme::WeightOnly),
            _ => Err(Error::Invalid(format!("unknown scheme `{s}` (O1, O2, weight_only)"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::O1 => "O1",
            Scheme::O2 => "O2",
            Scheme::WeightOnly => "weight_only",
        })
    }
}

/// Bit widths for weights, activations and the KV cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bits {
    pub w: u8,
    pub a: u8,
    pub kv: u8,
}

impl Bits {
    pub fn new(w: u8, a: u8, kv: u8) -> Self {
        Self { w, a, kv }
    }
}

impl FromStr for Bits {
    type Err = Error;

    /// `W,A,KV`, e.g. `4,4,4`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Invalid(format!("bits must be W,A,KV with each in 1..=16, got `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut v = [0u8; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| bad())?;
            if !(1..=FULL_PRECISION_BITS).contains(slot) {
                return Err(bad());
            }
        }
        Ok(Self::new(v[0], v[1], v[2]))
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.w, self.a, self.kv)
    }
}

fn quantizer(bits: u8, g: Granularity, mode: Mode) -> Result<SiteQuantizer> {
    Ok(SiteQuantizer::new(QuantSpec::new(bits, g, mode)?))
}

/// Uncalibrated hooks for `scheme`. Site classes at 16 bits or more are
/// left out; weight-only schemes ignore the activation and KV widths.
pub fn scheme_hooks(cfg: &ModelConfig, scheme: Scheme, bits: Bits) -> Result<QuantHookSet> {
    let mut hooks = QuantHookSet::new();
    let quantize = |b: u8| b < FULL_PRECISION_BITS;
    for layer in 0..cfg.n_layers {
        for lin in Linear::ALL {
            if quantize(bits.w) {
                let g = match scheme {
                    Scheme::WeightOnly => Granularity::Group(lin.dims(cfg).0.min(WEIGHT_GROUP)),
                    _ => Granularity::PerChannel,
                };
                hooks.insert(SiteId::new(layer, SiteKind::Weight(lin)), quantizer(bits.w, g, Mode::Static)?)?;
            }
            if quantize(bits.a) && scheme != Scheme::WeightOnly {
                let (g, mode) = match scheme {
                    Scheme::O1 => (Granularity::PerToken, Mode::Dynamic),
                    _ => (Granularity::PerTensor, Mode::Static),
                };
                hooks.insert(SiteId::new(layer, SiteKind::Input(lin)), quantizer(bits.a, g, mode)?)?;
            }
        }
        if quantize(bits.kv) && scheme != Scheme::WeightOnly {
            let (g, mode) = match scheme {
                Scheme::O1 => (Granularity::Group(cfg.head_dim.min(128)), Mode::Dynamic),
                _ => (Granularity::PerHead, Mode::Static),
            };
            for kind in [SiteKind::K, SiteKind::V] {
                hooks.insert(SiteId::new(layer, kind), quantizer(bits.kv, g, mode)?)?;
            }
        }
    }
    Ok(hooks)
}

/// `n` windows of `len` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scheme: Scheme,
    pub bits: Bits,
    pub rotation: bool,
    pub prefix: bool,
    pub seed: u64,
    pub prefix_order: PrefixOrder,
    pub thresholds: OutlierThresholds,
    /// Sequences used for outlier detection.
    pub detect: SampleSpec,
    pub calib: CalibConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Defaults for `scheme` at `bits`: full grids, 8×256 detection and
    /// calibration, 64×256 training for 10 (8-bit activations) or 20 epochs.
    pub fn new(scheme: Scheme, bits: Bits, seed: u64) -> Self {
        let act_bits = if scheme == Scheme::WeightOnly { FULL_PRECISION_BITS } else { bits.a };
        Self {
            scheme,
            bits,
            rotation: true,
            prefix: true,
            seed,
            prefix_order: PrefixOrder::Listed,
            thresholds: OutlierThresholds::default(),
            detect: SampleSpec { n: 8, len: 256 },
            calib: CalibConfig::default(),
            train: TrainConfig {
                epochs: TrainConfig::epochs_for_bits(act_bits),
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.calib.validate()?;
        self.train.validate()?;
        for (what, s) in [("detection", self.detect), ("evaluation", self.eval.sample)] {
            if s.n == 0 || s.len == 0 {
                return Err(Error::Config(format!("{what} sample is empty")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of the JSON encoding.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// Every JSON report: what it is, the seed and a hash of the configuration
/// that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub kind: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub data: T,
}

pub const REPORT_VERSION: u32 = 1;

impl<T: Serialize> Report<T> {
    pub fn new<C: Serialize>(kind: &str, seed: u64, config: &C, data: T) -> Self {
        Self {
            kind: kind.to_string(),
            version: REPORT_VERSION,
            seed,
            config_hash: config_hash(config),
            data,
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// JSON schemas shipped with the crate, by report kind.
pub const SCHEMAS: &[(&str, &str)] = &[
    ("outlier_report", include_str!("../../schemas/outlier_report.schema.json")),
    ("prefix_plan", include_str!("../../schemas/prefix_plan.schema.json")),
    ("calibration_report", include_str!("../../schemas/calibration_report.schema.json")),
    ("finetune_report", include_str!("../../schemas/finetune_report.schema.json")),
    ("eval_report", include_str!("../../schemas/eval_report.schema.json")),
    ("error_table", include_str!("../../schemas/error_table.schema.json")),
    ("pipeline_report", include_str!("../../schemas/pipeline_report.schema.json")),
];

pub fn schema(kind: &str) -> Option<&'static str> {
    SCHEMAS.iter().find(|(k, _)| *k == kind).map(|(_, s)| *s)
}
