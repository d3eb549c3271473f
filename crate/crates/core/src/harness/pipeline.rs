//! The staged pipeline: rotate, detect outliers, pick and prefill the
//! prefix, calibrate, fine-tune, evaluate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibrate::{block_errors, calibrate_model, CalibReport};
use crate::corpus::{sample_windows, windows};
use crate::error::{Error, Result};
use crate::finetune::{finetune_model, FinetuneReport};
use crate::model::{perplexity, KvCache, QuantHookSet, RotationInfo, ToyModel};
use crate::outlier::{analyze, Aggregates, OutlierReport};
use crate::prefix::{build_prefix_cache, select_prefix_from_report, verify_isolation, IsolationReport, PrefixCache};
use crate::rotation::{rotate_model, RotationFlags};
use crate::tensor::Rng;

use super::{scheme_hooks, PipelineConfig, SampleSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Perplexity windows; `len` is the context length.
    pub sample: SampleSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sample: SampleSpec { n: 16, len: 256 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub context_len: usize,
    pub tokens: usize,
    pub prefixed: bool,
    /// Reference model, no quantization, no prefix.
    pub ppl_fp: f64,
    pub ppl_quant: f64,
    /// End-to-end MSE at each block output, quantized vs unquantized.
    pub block_mse: Vec<f64>,
}

impl EvalReport {
    /// `block,mse`.
    pub fn block_csv(&self) -> String {
        let mut s = String::from("block,mse\n");
        for (b, m) in self.block_mse.iter().enumerate() {
            let _ = writeln!(s, "{b},{m:e}");
        }
        s
    }
}

/// Perplexity of `reference` (unquantized) and of `model` under `hooks` and
/// `prefix` on `tokens`, plus per-block error on the same windows.
pub fn evaluate(
    reference: &ToyModel,
    model: &ToyModel,
    hooks: &QuantHookSet,
    prefix: Option<&KvCache>,
    tokens: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let SampleSpec { n, len } = cfg.sample;
    let seqs = windows(tokens, n, len);
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let used = &tokens[..(seqs.len() * len + 1).min(tokens.len())];
    Ok(EvalReport {
        context_len: len,
        tokens: used.len(),
        prefixed: prefix.is_some_and(|p| !p.is_empty()),
        ppl_fp: perplexity(reference, used, None, None, len)?,
        ppl_quant: perplexity(model, used, Some(hooks), prefix, len)?,
        block_mse: block_errors(model, hooks, prefix, &seqs)?,
    })
}

/// The parts of an outlier report a pipeline run keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSummary {
    pub n_sequences: usize,
    pub counts: Vec<f64>,
    pub o: usize,
    pub frequency: BTreeMap<u32, usize>,
    pub aggregates: BTreeMap<String, Aggregates>,
}

impl From<&OutlierReport> for OutlierSummary {
    fn from(r: &OutlierReport) -> Self {
        Self {
            n_sequences: r.n_sequences,
            counts: r.counts.clone(),
            o: r.o,
            frequency: r.frequency.clone(),
            aggregates: r.aggregates.clone(),
        }
    }
}

pub type PrefixSummary = IsolationReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub rotation: RotationInfo,
    pub outliers: OutlierSummary,
    pub prefix: Option<PrefixSummary>,
    pub calibration: CalibReport,
    pub finetune: Option<FinetuneReport>,
    pub eval: EvalReport,
}

pub struct PipelineOutput {
    pub model: ToyModel,
    pub hooks: QuantHookSet,
    pub prefix: Option<PrefixCache>,
    pub outliers: OutlierReport,
    pub report: PipelineReport,
}

/// The part of a corpus used for detection, calibration and training, and
/// the held-out last fifth used for evaluation.
pub fn split_corpus(corpus: &[u32]) -> (&[u32], &[u32]) {
    corpus.split_at(corpus.len() - corpus.len() / 5)
}

/// Runs every stage on `corpus`. The last fifth of the corpus is held out
/// for evaluation; detection, calibration and training windows are drawn
/// from the rest with one seeded stream each.
pub fn run_pipeline(model: &ToyModel, corpus: &[u32], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (train_part, eval_part) = split_corpus(corpus);
    let mut rng = Rng::seed(cfg.seed);
    let (mut detect_rng, mut calib_rng, mut train_rng) = (rng.fork(), rng.fork(), rng.fork());
    let draw = |n: usize, len: usize, rng: &mut Rng, what: &'static str| {
        let s = sample_windows(train_part, n, len, rng);
        if s.is_empty() {
            Err(Error::Empty(what))
        } else {
            Ok(s)
        }
    };

    let rotated = if cfg.rotation {
        rotate_model(model, cfg.seed, RotationFlags::default())?
    } else {
        model.clone()
    };
    tracing::info!(rotation = cfg.rotation, "rotate");

    let detect = draw(cfg.detect.n, cfg.detect.len, &mut detect_rng, "detection corpus")?;
    let outliers = analyze(&rotated, &detect, &cfg.thresholds, None)?;
    tracing::info!(o = outliers.o, "analyze");

    let (mut cache, isolation) = if cfg.prefix {
        let plan = select_prefix_from_report(&outliers, cfg.prefix_order)?;
        let cache = build_prefix_cache(&rotated, &plan)?;
        let iso = verify_isolation(&rotated, &cache, &detect, &cfg.thresholds)?;
        tracing::info!(plan = ?plan.token_ids, "prefix");
        (Some(cache), Some(iso))
    } else {
        (None, None)
    };

    let base = scheme_hooks(&rotated.config, cfg.scheme, cfg.bits)?;
    let calib = draw(cfg.calib.n_samples, cfg.calib.seq_len, &mut calib_rng, "calibration corpus")?;
    let (mut hooks, calibration) = calibrate_model(&rotated, &base, cache.as_ref().map(|c| &c.kv), &calib, &cfg.calib)?;
    tracing::info!(sites = calibration.sites.len(), "calibrate");

    let mut trained = rotated;
    let mut finetune = None;
    if cfg.train.epochs > 0 && !hooks.is_empty() {
        let seqs = draw(cfg.train.n_samples, cfg.train.seq_len, &mut train_rng, "training corpus")?;
        let (m, h, r) = finetune_model(&trained, &hooks, cache.as_ref().map(|c| &c.kv), &seqs, &cfg.train)?;
        // The cache belongs to the weights it was prefilled with.
        if let Some(c) = &cache {
            cache = Some(build_prefix_cache(&m, &c.plan)?);
        }
        trained = m;
        hooks = h;
        finetune = Some(r);
        tracing::info!("finetune");
    }

    let eval = evaluate(model, &trained, &hooks, cache.as_ref().map(|c| &c.kv), eval_part, &cfg.eval)?;
    tracing::info!(ppl_fp = eval.ppl_fp, ppl_quant = eval.ppl_quant, "eval");

    let report = PipelineReport {
        config: cfg.clone(),
        rotation: trained.rotation.clone(),
        outliers: OutlierSummary::from(&outliers),
        prefix: isolation,
        calibration,
        finetune,
        eval,
    };
    Ok(PipelineOutput {
        model: trained,
        hooks,
        prefix: cache,
        outliers,
        report,
    })
}
