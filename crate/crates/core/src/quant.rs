//! Fake quantization (quantize then dequantize) over every grouping the
//! toolkit supports.
//!
//! For a group with observed range `[min, max]`, clipping factors `γ, β` and
//! `N` bits:
//!
//! ```text
//! s = (γ·max − β·min) / (2^N − 1)
//! z = clamp(−⌊β·min / s⌋, 0, 2^N − 1)
//! q = clamp(round(x / s) + z, 0, 2^N − 1)
//! y = s · (q − z)
//! ```
//!
//! Rounding is half-to-even. Degenerate groups (`max == min` or `s < 1e-8`)
//! use `s = 1e-8`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{mse, Tensor};

pub const SCALE_GUARD: f32 = 1e-8;
pub const DEFAULT_GROUP: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
    Group(usize),
    PerHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dynamic,
    Static,
}

/// What kind of tensor a quantizer is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteRole {
    /// Linear weight stored `[in × out]`.
    Weight,
    /// Linear input `[T × C]`.
    Activation,
    /// Query/key/value `[T × n_heads × head_dim]`.
    Kv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
    pub mode: Mode,
    #[serde(default)]
    pub symmetric: bool,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity, mode: Mode) -> Result<Self> {
        let spec = Self {
            bits,
            granularity,
            mode,
            symmetric: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Spec(format!("bits {} outside 2..=16", self.bits)));
        }
        if let Granularity::Group(0) = self.granularity {
            return Err(Error::Spec("group size must be positive".into()));
        }
        Ok(())
    }

    /// Largest integer level, `2^N − 1`.
    pub fn qmax(&self) -> f32 {
        ((1u32 << self.bits) - 1) as f32
    }

    /// Checks the granularity is meaningful for the kind of site.
    pub fn check_role(&self, role: SiteRole) -> Result<()> {
        use Granularity::*;
        let ok = match (self.granularity, role) {
            (PerTensor, _) => true,
            (PerToken, SiteRole::Activation | SiteRole::Kv) => true,
            (PerHead, SiteRole::Kv) => true,
            (PerChannel | Group(_), SiteRole::Weight | SiteRole::Kv) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!(
                "{:?} is not valid on a {:?} site",
                self.granularity, role
            )))
        }
    }

    /// Group assignment for a tensor of the given shape.
    pub fn grouping(&self, shape: &[usize]) -> Result<Grouping> {
        Grouping::new(self.granularity, shape)
    }
}

/// Maps flat element indices to quantization groups.
///
/// * 2-D `[R × C]`: `PerToken` = rows, `PerChannel` = columns, `Group(g)` =
///   `g` consecutive rows within a column (weights are stored `[in × out]`).
/// * 3-D `[T × H × D]`: `PerToken` = t, `PerHead` = h, `PerChannel` = (h, d),
///   `Group(g)` = `g` consecutive entries of head_dim.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grouping {
    kind: GroupKind,
    n_groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GroupKind {
    All,
    Div(usize),
    Mod(usize),
    /// `(i / div) % modulo`
    DivMod(usize, usize),
    /// 2-D column groups: `col · (R/g) + row / g`
    ColGroup { cols: usize, per_col: usize, g: usize },
    /// 3-D head_dim groups: `(i / d) · (d/g) + (i % d) / g`
    LastGroup { d: usize, g: usize },
}

impl Grouping {
    fn new(granularity: Granularity, shape: &[usize]) -> Result<Self> {
        use Granularity::*;
        let bad = || {
            Error::Spec(format!(
                "{granularity:?} cannot be applied to a tensor of shape {shape:?}"
            ))
        };
        let (kind, n_groups) = match (granularity, shape) {
            (PerTensor, _) => (GroupKind::All, 1),
            (PerToken, &[r, c]) => (GroupKind::Div(c), r),
            (PerChannel, &[_, c]) => (GroupKind::Mod(c), c),
            (Group(g), &[r, c]) => {
                if r % g != 0 {
                    return Err(Error::Spec(format!(
                        "group size {g} does not divide extent {r}"
                    )));
                }
                (
                    GroupKind::ColGroup {
                        cols: c,
                        per_col: r / g,
                        g,
                    },
                    c * (r / g),
                )
            }
            (PerToken, &[t, h, d]) => (GroupKind::Div(h * d), t),
            (PerHead, &[_, h, d]) => (GroupKind::DivMod(d, h), h),
            (PerChannel, &[_, h, d]) => (GroupKind::Mod(h * d), h * d),
            (Group(g), &[t, h, d]) => {
                if d % g != 0 {
                    return Err(Error::Spec(format!(
                        "group size {g} does not divide extent {d}"
                    )));
                }
                (GroupKind::LastGroup { d, g }, t * h * (d / g))
            }
            _ => return Err(bad()),
        };
        Ok(Self { kind, n_groups })
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    #[inline]
    pub fn group_of(&self, i: usize) -> usize {
        match self.kind {
            GroupKind::All => 0,
            GroupKind::Div(c) => i / c,
            GroupKind::Mod(c) => i % c,
            GroupKind::DivMod(d, h) => (i / d) % h,
            GroupKind::ColGroup { cols, per_col, g } => (i % cols) * per_col + (i / cols) / g,
            GroupKind::LastGroup { d, g } => (i / d) * (d / g) + (i % d) / g,
        }
    }

    /// Per-group `(min, max)`.
    pub fn min_max(&self, data: &[f32]) -> Vec<(f32, f32)> {
        let mut mm = vec![(f32::INFINITY, f32::NEG_INFINITY); self.n_groups];
        for (i, &v) in data.iter().enumerate() {
            let e = &mut mm[self.group_of(i)];
            e.0 = e.0.min(v);
            e.1 = e.1.max(v);
        }
        mm
    }
}

/// Fitted parameters: one `(s, z)` per group plus the clipping factors used.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: Tensor,
    pub zero: Tensor,
    pub gamma: f32,
    pub beta: f32,
}

impl QuantParams {
    pub fn n_groups(&self) -> usize {
        self.scale.len()
    }
}

fn check_clip(gamma: f32, beta: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::Invalid(format!(
            "clipping factors must lie in [0,1], got γ={gamma} β={beta}"
        )));
    }
    Ok(())
}

/// Step size and zero point for one group's range.
pub fn scale_zero(min: f32, max: f32, spec: &QuantSpec, gamma: f32, beta: f32) -> (f32, f32) {
    let qmax = spec.qmax() as f64;
    if spec.symmetric {
        let half = (1u32 << (spec.bits - 1)) as f64;
        let amax = (gamma as f64 * max as f64)
            .max(-(beta as f64) * min as f64)
            .max(0.0);
        let mut s = (amax / (half - 1.0)) as f32;
        if max == min || !(s >= SCALE_GUARD) {
            s = SCALE_GUARD;
        }
        return (s, half as f32);
    }
    let mut s = ((gamma as f64 * max as f64 - beta as f64 * min as f64) / qmax) as f32;
    if max == min || !(s >= SCALE_GUARD) {
        s = SCALE_GUARD;
    }
    let z = (-(beta as f64 * min as f64 / s as f64).floor()).clamp(0.0, qmax) as f32;
    (s, z)
}

/// Fits `(s, z)` per group.
pub fn fit_params(x: &Tensor, spec: &QuantSpec, gamma: f32, beta: f32) -> Result<QuantParams> {
    spec.validate()?;
    check_clip(gamma, beta)?;
    let grouping = spec.grouping(x.shape())?;
    let (scale, zero): (Vec<f32>, Vec<f32>) = grouping
        .min_max(x.data())
        .into_iter()
        .map(|(lo, hi)| scale_zero(lo, hi, spec, gamma, beta))
        .unzip();
    let n = scale.len();
    Ok(QuantParams {
        scale: Tensor::from_parts(vec![n], scale),
        zero: Tensor::from_parts(vec![n], zero),
        gamma,
        beta,
    })
}

/// Quantize-dequantize one value.
#[inline]
pub fn fake_quant_scalar(x: f32, s: f32, z: f32, qmax: f32) -> f32 {
    let q = ((x / s).round_ties_even() + z).clamp(0.0, qmax);
    s * (q - z)
}

/// `s · (clamp(round(x/s) + z, 0, 2^N − 1) − z)` element-wise.
pub fn fake_quant(x: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<Tensor> {
    let grouping = spec.grouping(x.shape())?;
    if params.scale.len() != grouping.n_groups() || params.zero.len() != grouping.n_groups() {
        return Err(Error::shape(
            "fake_quant",
            x.shape(),
            params.scale.shape(),
        ));
    }
    let qmax = spec.qmax();
    let (s, z) = (params.scale.data(), params.zero.data());
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = grouping.group_of(i);
            fake_quant_scalar(v, s[g], z[g], qmax)
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// MSE between a reference output and its quantized counterpart.
pub fn quant_error(reference: &Tensor, quantized: &Tensor) -> Result<f64> {
    mse(reference, quantized)
}

/// Dynamic quantization: fits per-group parameters from `x` itself using the
/// site's shared clipping factors, then fake-quantizes.
pub fn dynamic_quantize_site(x: &Tensor, spec: &QuantSpec, gamma: f32, beta: f32) -> Result<Tensor> {
    if spec.mode != Mode::Dynamic {
        return Err(Error::Spec("dynamic_quantize_site needs a dynamic spec".into()));
    }
    let params = fit_params(x, spec, gamma, beta)?;
    fake_quant(x, &params, spec)
}
