//! Where quantization error comes from: per-position attribution of a
//! block's output error to outlier tokens and to the rest, across the
//! mitigation stages.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibrate::{block_errors, calibrate_model, model_inputs, prefix_layer, CalibConfig};
use crate::error::{Error, Result};
use crate::model::{block_forward, forward, CaptureSite, ForwardOptions, KvCache, QuantHookSet, ToyModel};
use crate::outlier::{analyze, OutlierThresholds};
use crate::prefix::{build_prefix_cache, select_prefix_from_report, PrefixOrder, PrefixPlan};
use crate::rotation::{rotate_model, RotationFlags};

use super::{scheme_hooks, Bits, Scheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    /// Block-output MSE over every element.
    pub mse: f64,
    /// Percent of the squared error at outlier-token positions.
    pub outlier_share: f64,
    pub remaining_share: f64,
    pub outlier_positions: usize,
    pub positions: usize,
}

/// Splits the output error of `block` between outlier-token positions and
/// the rest. The block sees full-precision inputs; outlier positions are
/// the upper outliers at any block output (the initial token included).
/// Each share is the total error with the other group's error zeroed.
pub fn error_decomposition(
    model: &ToyModel,
    hooks: &QuantHookSet,
    sequences: &[Vec<u32>],
    prefix: Option<&KvCache>,
    th: &OutlierThresholds,
    block: usize,
) -> Result<ErrorBreakdown> {
    if block >= model.config.n_layers {
        return Err(Error::Invalid(format!(
            "measurement block {block} out of range for {} layers",
            model.config.n_layers
        )));
    }
    let report = analyze(model, sequences, th, prefix)?;
    let inputs = model_inputs(sequences, prefix);
    let past = prefix_layer(prefix, block);
    let past = past.as_ref().map(|(k, v)| (k, v));
    let hidden = model.config.hidden;
    let (mut outlier, mut rest) = (0.0f64, 0.0f64);
    let (mut n_outlier, mut n_positions) = (0usize, 0usize);
    for (seq, tokens) in inputs.iter().enumerate() {
        let fp = forward(
            model,
            tokens,
            ForwardOptions {
                hooks: None,
                prefix,
                capture: true,
            },
            None,
        )?;
        let x = &fp.captures[&(block, CaptureSite::BlockInput)];
        let y = &fp.captures[&(block, CaptureSite::BlockOutput)];
        let yq = block_forward(model, block, x, past, Some(hooks), None)?.out;
        let marked: BTreeSet<usize> = report
            .layers
            .iter()
            .flat_map(|l| l.sites["block_output"][seq].upper.iter().copied())
            .collect();
        for (t, (a, b)) in y.data().chunks(hidden).zip(yq.data().chunks(hidden)).enumerate() {
            let e: f64 = a.iter().zip(b).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum();
            if marked.contains(&t) {
                outlier += e;
                n_outlier += 1;
            } else {
                rest += e;
            }
            n_positions += 1;
        }
    }
    let total = outlier + rest;
    let outlier_share = if total > 0.0 { 100.0 * outlier / total } else { 0.0 };
    Ok(ErrorBreakdown {
        mse: total / (n_positions * hidden).max(1) as f64,
        outlier_share,
        remaining_share: 100.0 - outlier_share,
        outlier_positions: n_outlier,
        positions: n_positions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    None,
    Rotation,
    RotationPrefix,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::None, Stage::Rotation, Stage::RotationPrefix];

    pub fn name(self) -> &'static str {
        match self {
            Stage::None => "none",
            Stage::Rotation => "rotation",
            Stage::RotationPrefix => "rotation_prefix",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: Stage,
    #[serde(flatten)]
    pub breakdown: ErrorBreakdown,
    /// End-to-end MSE at every block output.
    pub per_block: Vec<f64>,
    pub plan: Option<PrefixPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub scheme: Scheme,
    pub bits: Bits,
    pub measurement_block: usize,
    pub stages: Vec<StageError>,
}

impl ErrorTable {
    pub fn stage(&self, stage: Stage) -> Option<&StageError> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// `stage,mse,outlier_share,remaining_share,outlier_positions,positions`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mse,outlier_share,remaining_share,outlier_positions,positions\n");
        for st in &self.stages {
            let b = &st.breakdown;
            let _ = writeln!(
                s,
                "{},{:e},{},{},{},{}",
                st.stage.name(),
                b.mse,
                b.outlier_share,
                b.remaining_share,
                b.outlier_positions,
                b.positions
            );
        }
        s
    }

    /// `stage,block,mse`.
    pub fn per_block_csv(&self) -> String {
        let mut s = String::from("stage,block,mse\n");
        for st in &self.stages {
            for (b, m) in st.per_block.iter().enumerate() {
                let _ = writeln!(s, "{},{b},{m:e}", st.stage.name());
            }
        }
        s
    }
}

/// The error table across {no mitigation, rotation, rotation + prefix}.
/// Hooks are calibrated separately for each stage; the prefix is chosen by
/// outlier detection on the rotated model.
#[allow(clippy::too_many_arguments)]
pub fn error_table(
    model: &ToyModel,
    sequences: &[Vec<u32>],
    scheme: Scheme,
    bits: Bits,
    calib: &CalibConfig,
    th: &OutlierThresholds,
    block: usize,
    rotation_seed: u64,
) -> Result<ErrorTable> {
    let base = scheme_hooks(&model.config, scheme, bits)?;
    let rotated = rotate_model(model, rotation_seed, RotationFlags::default())?;
    let mut stages = Vec::new();
    for stage in Stage::ALL {
        let m = if stage == Stage::None { model } else { &rotated };
        let (plan, cache) = if stage == Stage::RotationPrefix {
            let report = analyze(m, sequences, th, None)?;
            let plan = select_prefix_from_report(&report, PrefixOrder::Listed)?;
            let cache = build_prefix_cache(m, &plan)?;
            (Some(plan), Some(cache.kv))
        } else {
            (None, None)
        };
        let (hooks, _) = calibrate_model(m, &base, cache.as_ref(), sequences, calib)?;
        let breakdown = error_decomposition(m, &hooks, sequences, cache.as_ref(), th, block)?;
        let per_block = block_errors(m, &hooks, cache.as_ref(), sequences)?;
        tracing::info!(stage = stage.name(), mse = breakdown.mse, "error table stage");
        stages.push(StageError {
            stage,
            breakdown,
            per_block,
            plan,
        });
    }
    Ok(ErrorTable {
        scheme,
        bits,
        measurement_block: block,
        stages,
    })
}
