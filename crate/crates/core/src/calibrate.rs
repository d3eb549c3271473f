//! MSE grid-search initialization of quantizer parameters.
//!
//! Two searches:
//!
//! * clipping factors `(γ, β)` on a 2-D grid, for weights, dynamic sites
//!   and static sites with more than one group. The objective is the error of
//!   the layer output (linear sites) or of the attention output (Q/K/V);
//! * `(s, z)` directly, for per-tensor static sites. The objective is the
//!   error of the block output (attention output for Q/K/V).
//!
//! Both grids contain the max–min point, so the result never does worse
//! than max–min initialization on the calibration data. Ties go to the
//! candidate with less clipping: larger `γ`, then larger `β`, then larger
//! `s`, then smaller `z`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::with_bos;
use crate::error::{Error, Result};
use crate::model::{
    attention, block_forward, embed, CaptureSite, Captures, KvCache, QuantHookSet, SiteId,
    SiteKind, SiteQuantizer, ToyModel,
};
use crate::quant::{
    dynamic_quantize_site, fake_quant, fit_params, scale_zero, Granularity, Mode, QuantParams, QuantSpec,
    SiteRole, SCALE_GUARD,
};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub n_samples: usize,
    pub seq_len: usize,
    /// Searched in descending order.
    pub gamma_grid: Vec<f32>,
    pub beta_grid: Vec<f32>,
    /// Points of the geometric step grid `[s_maxmin / s_span, s_maxmin]`.
    pub s_points: usize,
    pub s_span: f32,
    /// Cap on zero-point candidates per step; the max–min zero point is
    /// always added. `0` keeps only that one.
    pub z_candidates: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self::with_step(0.01)
    }
}

impl CalibConfig {
    /// Default config with clipping grids `1.0, 1.0 − step, …` down to 0.5.
    pub fn with_step(step: f64) -> Self {
        Self {
            n_samples: 8,
            seq_len: 256,
            gamma_grid: clip_grid(0.5, step),
            beta_grid: clip_grid(0.5, step),
            s_points: 100,
            s_span: 50.0,
            z_candidates: 64,
        }
    }

    /// Single-point grids: plain max–min initialization.
    pub fn max_min() -> Self {
        Self {
            gamma_grid: vec![1.0],
            beta_grid: vec![1.0],
            s_points: 1,
            z_candidates: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma", &self.gamma_grid), ("beta", &self.beta_grid)] {
            if g.is_empty() {
                return Err(Error::Config(format!("{name} grid is empty")));
            }
            if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Config(format!("{name} grid value {v} outside [0,1]")));
            }
        }
        if self.s_points == 0 || !(self.s_span >= 1.0) {
            return Err(Error::Config("step grid needs ≥ 1 point and a span ≥ 1".into()));
        }
        if self.n_samples == 0 || self.seq_len == 0 {
            return Err(Error::Config("calibration set is empty".into()));
        }
        Ok(())
    }
}

/// `1.0, 1.0 − step, …` down to `lo` (inclusive, up to rounding).
pub fn clip_grid(lo: f64, step: f64) -> Vec<f32> {
    if !(step > 0.0) {
        return vec![1.0];
    }
    let n = ((1.0 - lo) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|k| ((1.0 - k as f64 * step) * 1e6).round() as f32 / 1e6)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipChoice {
    pub gamma: f32,
    pub beta: f32,
    pub mse: f64,
    pub mse_max_min: f64,
    pub evaluated: usize,
}

fn desc_unique(v: &[f32]) -> Vec<f32> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

/// Index of the first strict minimum, skipping non-finite values.
fn first_min(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in values.iter().enumerate() {
        if m.is_finite() && best.is_none_or(|b| m < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Exhaustive search over `γ × β`. Grid points are evaluated in parallel
/// and reduced in grid order.
pub fn grid_search_clipping<F>(gammas: &[f32], betas: &[f32], objective: F) -> Result<ClipChoice>
where
    F: Fn(f32, f32) -> Result<f64> + Sync,
{
    if gammas.is_empty() || betas.is_empty() {
        return Err(Error::Empty("clipping grid"));
    }
    let (gs, bs) = (desc_unique(gammas), desc_unique(betas));
    let points: Vec<(f32, f32)> = gs.iter().flat_map(|&g| bs.iter().map(move |&b| (g, b))).collect();
    let values = points
        .par_iter()
        .map(|&(g, b)| objective(g, b))
        .collect::<Result<Vec<f64>>>()?;
    let best = first_min(&values).ok_or_else(|| Error::Invalid("objective is not finite".into()))?;
    let mse_max_min = match points.iter().position(|&p| p == (1.0, 1.0)) {
        Some(i) => values[i],
        None => objective(1.0, 1.0)?,
    };
    Ok(ClipChoice {
        gamma: points[best].0,
        beta: points[best].1,
        mse: values[best],
        mse_max_min,
        evaluated: points.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepChoice {
    pub scale: f32,
    pub zero: f32,
    pub mse: f64,
    pub mse_max_min: f64,
    pub evaluated: usize,
}

/// Candidate `(s, z)` pairs in tie-break order (s descending, z ascending).
/// The max–min pair is always included.
pub fn step_candidates(min: f32, max: f32, spec: &QuantSpec, cfg: &CalibConfig) -> Result<Vec<(f32, f32)>> {
    if !(min <= max) {
        return Err(Error::Empty("calibration capture"));
    }
    let (s_mm, _) = scale_zero(min, max, spec, 1.0, 1.0);
    let qmax = spec.qmax() as f64;
    let mut scales: Vec<f32> = (0..cfg.s_points)
        .map(|k| {
            if k == 0 {
                return s_mm;
            }
            let t = k as f64 / (cfg.s_points - 1) as f64;
            ((s_mm as f64) * (cfg.s_span as f64).powf(-t)).max(SCALE_GUARD as f64) as f32
        })
        .collect();
    scales.dedup();
    let mut out = Vec::new();
    for s in scales {
        let sd = s as f64;
        let max_min_z = if spec.symmetric {
            scale_zero(min, max, spec, 1.0, 1.0).1 as f64
        } else {
            (-(min as f64 / sd).floor()).clamp(0.0, qmax)
        };
        let mut zs = vec![max_min_z];
        if !spec.symmetric && cfg.z_candidates > 0 {
            // Zero points whose window [−z·s, (qmax − z)·s] still meets [min, max].
            let lo = (-(max as f64) / sd).ceil().max(0.0);
            let hi = (qmax - min as f64 / sd).floor().min(qmax);
            if lo <= hi {
                let n = (hi - lo) as usize + 1;
                if n <= cfg.z_candidates {
                    zs.extend((0..n).map(|i| lo + i as f64));
                } else if cfg.z_candidates == 1 {
                    zs.push(lo);
                } else {
                    let c = cfg.z_candidates;
                    zs.extend((0..c).map(|i| lo + ((hi - lo) * i as f64 / (c - 1) as f64).round()));
                }
            }
        }
        zs.sort_by(f64::total_cmp);
        zs.dedup();
        out.extend(zs.into_iter().map(|z| (s, z as f32)));
    }
    Ok(out)
}

/// Exhaustive search over [`step_candidates`].
pub fn grid_search_static<F>(min: f32, max: f32, spec: &QuantSpec, cfg: &CalibConfig, objective: F) -> Result<StepChoice>
where
    F: Fn(f32, f32) -> Result<f64> + Sync,
{
    let cands = step_candidates(min, max, spec, cfg)?;
    let values = cands
        .par_iter()
        .map(|&(s, z)| objective(s, z))
        .collect::<Result<Vec<f64>>>()?;
    let best = first_min(&values).ok_or_else(|| Error::Invalid("objective is not finite".into()))?;
    let max_min = scale_zero(min, max, spec, 1.0, 1.0);
    let mse_max_min = match cands.iter().position(|&c| c == max_min) {
        Some(i) => values[i],
        None => objective(max_min.0, max_min.1)?,
    };
    Ok(StepChoice {
        scale: cands[best].0,
        zero: cands[best].1,
        mse: values[best],
        mse_max_min,
        evaluated: cands.len(),
    })
}

/// One `(s, z)` pair for the whole tensor.
pub fn per_tensor_params(scale: f32, zero: f32) -> QuantParams {
    QuantParams {
        scale: Tensor::from_parts(vec![1], vec![scale]),
        zero: Tensor::from_parts(vec![1], vec![zero]),
        gamma: 1.0,
        beta: 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    ClipGrid,
    StepGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site: String,
    pub method: SearchMethod,
    pub gamma: f32,
    pub beta: f32,
    pub scale: Option<f32>,
    pub zero: Option<f32>,
    pub mse_max_min: f64,
    pub mse_best: f64,
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub n_sequences: usize,
    pub tokens: usize,
    pub prefixed: bool,
    pub sites: Vec<SiteReport>,
}

/// How a hooked site is searched.
pub fn search_method(kind: SiteKind, spec: &QuantSpec) -> Result<SearchMethod> {
    let role = kind.role();
    spec.check_role(role)?;
    if spec.mode == Mode::Dynamic || role == SiteRole::Weight {
        return Ok(SearchMethod::ClipGrid);
    }
    match (spec.granularity, role) {
        (Granularity::PerTensor, _) => Ok(SearchMethod::StepGrid),
        (Granularity::PerHead | Granularity::PerChannel, SiteRole::Kv) => Ok(SearchMethod::ClipGrid),
        (g, _) => Err(Error::Spec(format!(
            "static {g:?} parameters would depend on the sequence length at {kind:?}"
        ))),
    }
}

/// Calibration sequences as the model sees them: BOS first unless a prefix
/// (which ends with BOS) is active.
pub fn model_inputs(sequences: &[Vec<u32>], prefix: Option<&KvCache>) -> Vec<Vec<u32>> {
    if prefix.is_some_and(|p| !p.is_empty()) {
        sequences.to_vec()
    } else {
        sequences.iter().map(|s| with_bos(s)).collect()
    }
}

/// Keys/values of the prefix at one layer, if any.
pub fn prefix_layer(prefix: Option<&KvCache>, layer: usize) -> Option<(Tensor, Tensor)> {
    prefix.filter(|p| !p.is_empty()).map(|p| (p.keys(layer), p.values(layer)))
}

fn past_ref(p: &Option<(Tensor, Tensor)>) -> Option<(&Tensor, &Tensor)> {
    p.as_ref().map(|(k, v)| (k, v))
}

/// Attention output over the prefix plus the sequence itself.
pub fn prefixed_attention(q: &Tensor, k: &Tensor, v: &Tensor, past: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    match past {
        Some((pk, pv)) => attention(q, &Tensor::concat_rows(&[pk, k])?, &Tensor::concat_rows(&[pv, v])?),
        None => attention(q, k, v),
    }
}

/// Block-output state of one layer during sequential calibration.
struct LayerData<'a> {
    model: &'a ToyModel,
    layer: usize,
    xs: &'a [Tensor],
    past: Option<(Tensor, Tensor)>,
    n_tokens: usize,
}

impl LayerData<'_> {
    fn capture(&self, hooks: &QuantHookSet) -> Result<Vec<Captures>> {
        self.xs
            .iter()
            .map(|x| {
                let mut c = Captures::new();
                block_forward(self.model, self.layer, x, past_ref(&self.past), Some(hooks), Some(&mut c))?;
                Ok(c)
            })
            .collect()
    }

    fn outputs(&self, hooks: Option<&QuantHookSet>) -> Result<Vec<Tensor>> {
        self.xs
            .iter()
            .map(|x| Ok(block_forward(self.model, self.layer, x, past_ref(&self.past), hooks, None)?.out))
            .collect()
    }
}

/// Squared error of `e · W` summed over rows, via `W·Wᵀ` when that is
/// cheaper.
struct OutputMetric {
    w: Tensor,
    gram: Option<Vec<f64>>,
}

impl OutputMetric {
    fn new(w: Tensor) -> Self {
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        let gram = (n_in < n_out).then(|| {
            let d = w.data();
            let mut g = vec![0.0f64; n_in * n_in];
            for i in 0..n_in {
                for j in i..n_in {
                    let (ri, rj) = (&d[i * n_out..(i + 1) * n_out], &d[j * n_out..(j + 1) * n_out]);
                    let v: f64 = ri.iter().zip(rj).map(|(&a, &b)| a as f64 * b as f64).sum();
                    g[i * n_in + j] = v;
                    g[j * n_in + i] = v;
                }
            }
            g
        });
        Self { w, gram }
    }

    fn sq_error(&self, e: &Tensor) -> Result<f64> {
        match &self.gram {
            Some(g) => Ok(quadratic_rows(e.data(), g, e.last_dim())),
            None => Ok(matmul(e, &self.w)?.data().iter().map(|&v| (v as f64).powi(2)).sum()),
        }
    }
}

/// `Σ_r e_rᵀ G e_r` over rows `e_r` of width `n`.
fn quadratic_rows(e: &[f32], g: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    let mut ge = vec![0.0f64; n];
    for row in e.chunks(n) {
        ge.iter_mut().for_each(|v| *v = 0.0);
        for (k, &ek) in row.iter().enumerate() {
            if ek != 0.0 {
                for (acc, &gv) in ge.iter_mut().zip(&g[k * n..(k + 1) * n]) {
                    *acc += gv * ek as f64;
                }
            }
        }
        total += row.iter().zip(&ge).map(|(&a, &b)| a as f64 * b).sum::<f64>();
    }
    total
}

/// `Σ_j δ_jᵀ G δ_j` over the columns of `delta` (`[n × m]`), `G` `[n × n]`.
fn quadratic_cols(delta: &[f64], g: &[f64], n: usize, m: usize) -> f64 {
    let mut total = 0.0;
    let mut gd = vec![0.0f64; m];
    for i in 0..n {
        gd.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            let gik = g[i * n + k];
            if gik != 0.0 {
                for (acc, &d) in gd.iter_mut().zip(&delta[k * m..(k + 1) * m]) {
                    *acc += gik * d;
                }
            }
        }
        total += delta[i * m..(i + 1) * m].iter().zip(&gd).map(|(a, b)| a * b).sum::<f64>();
    }
    total
}

fn gram_of(xs: &[&Tensor]) -> Vec<f64> {
    let n = xs[0].last_dim();
    let mut g = vec![0.0f64; n * n];
    for x in xs {
        for row in x.data().chunks(n) {
            for (i, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                for (gv, &b) in g[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *gv += a * b as f64;
                }
            }
        }
    }
    g
}

fn range_of(xs: &[&Tensor]) -> (f32, f32) {
    xs.iter()
        .flat_map(|x| x.data().iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

fn applied(hooks: &QuantHookSet, site: SiteId, x: &Tensor) -> Result<Tensor> {
    Ok(hooks.apply(site, x)?.unwrap_or_else(|| x.clone()))
}

fn quantizer_from_clip(spec: QuantSpec, gamma: f32, beta: f32, fit_on: Option<&Tensor>) -> Result<SiteQuantizer> {
    let params = match (spec.mode, fit_on) {
        (Mode::Static, Some(x)) => Some(fit_params(x, &spec, gamma, beta)?),
        _ => None,
    };
    Ok(SiteQuantizer {
        spec,
        gamma,
        beta,
        params,
    })
}

fn quantizer_from_step(spec: QuantSpec, scale: f32, zero: f32) -> SiteQuantizer {
    SiteQuantizer {
        spec,
        gamma: 1.0,
        beta: 1.0,
        params: Some(per_tensor_params(scale, zero)),
    }
}

fn kv_capture(kind: SiteKind) -> CaptureSite {
    match kind {
        SiteKind::Q => CaptureSite::Q,
        SiteKind::K => CaptureSite::K,
        _ => CaptureSite::V,
    }
}

/// Searches one site given the quantizers fitted so far.
fn calibrate_site(
    data: &LayerData<'_>,
    site: SiteId,
    spec: QuantSpec,
    fitted: &QuantHookSet,
    cfg: &CalibConfig,
) -> Result<(SiteQuantizer, SiteReport)> {
    let method = search_method(site.kind, &spec)?;
    let caps = data.capture(fitted)?;
    let n_tok = data.n_tokens as f64;
    let report = |q: &SiteQuantizer, mse_max_min: f64, mse_best: f64, evaluated: usize| SiteReport {
        site: site.to_string(),
        method,
        gamma: q.gamma,
        beta: q.beta,
        scale: (method == SearchMethod::StepGrid).then(|| q.params.as_ref().unwrap().scale.data()[0]),
        zero: (method == SearchMethod::StepGrid).then(|| q.params.as_ref().unwrap().zero.data()[0]),
        mse_max_min,
        mse_best,
        evaluated,
    };

    match site.kind {
        SiteKind::Weight(lin) => {
            let w = data.model.layers[data.layer].linear(lin);
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            let xs: Vec<&Tensor> = caps.iter().map(|c| &c[&(data.layer, CaptureSite::LinearInput(lin))]).collect();
            let g = gram_of(&xs);
            let objective = |gamma: f32, beta: f32| -> Result<f64> {
                let p = fit_params(w, &spec, gamma, beta)?;
                let wq = fake_quant(w, &p, &spec)?;
                let delta: Vec<f64> = wq.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 - b as f64).collect();
                Ok(quadratic_cols(&delta, &g, n_in, n_out) / (n_tok * n_out as f64))
            };
            let c = grid_search_clipping(&cfg.gamma_grid, &cfg.beta_grid, objective)?;
            let q = quantizer_from_clip(spec, c.gamma, c.beta, Some(w))?;
            Ok((q.clone(), report(&q, c.mse_max_min, c.mse, c.evaluated)))
        }
        SiteKind::Input(lin) => {
            let w = data.model.layers[data.layer].linear(lin);
            let xs: Vec<&Tensor> = caps.iter().map(|c| &c[&(data.layer, CaptureSite::LinearInput(lin))]).collect();
            match method {
                SearchMethod::ClipGrid => {
                    let wq = applied(fitted, SiteId::new(data.layer, SiteKind::Weight(lin)), w)?;
                    let n_out = wq.shape()[1] as f64;
                    let metric = OutputMetric::new(wq);
                    let objective = |gamma: f32, beta: f32| -> Result<f64> {
                        let mut total = 0.0;
                        for x in &xs {
                            let xq = dynamic_quantize_site(x, &spec, gamma, beta)?;
                            total += metric.sq_error(&crate::tensor::sub(&xq, x)?)?;
                        }
                        Ok(total / (n_tok * n_out))
                    };
                    let c = grid_search_clipping(&cfg.gamma_grid, &cfg.beta_grid, objective)?;
                    let q = quantizer_from_clip(spec, c.gamma, c.beta, None)?;
                    Ok((q.clone(), report(&q, c.mse_max_min, c.mse, c.evaluated)))
                }
                SearchMethod::StepGrid => {
                    let (lo, hi) = range_of(&xs);
                    let reference = data.outputs(None)?;
                    let denom = n_tok * data.model.config.hidden as f64;
                    let objective = |s: f32, z: f32| -> Result<f64> {
                        let mut hooks = fitted.clone();
                        hooks.insert(site, quantizer_from_step(spec, s, z))?;
                        let outs = data.outputs(Some(&hooks))?;
                        Ok(outs.iter().zip(&reference).map(|(a, b)| sq_diff(a, b)).sum::<f64>() / denom)
                    };
                    let c = grid_search_static(lo, hi, &spec, cfg, objective)?;
                    let q = quantizer_from_step(spec, c.scale, c.zero);
                    Ok((q.clone(), report(&q, c.mse_max_min, c.mse, c.evaluated)))
                }
            }
        }
        SiteKind::Q | SiteKind::K | SiteKind::V => {
            let l = data.layer;
            // Baseline q/k/v: earlier-fitted hooks applied, this site raw.
            let mut base = Vec::with_capacity(caps.len());
            for c in &caps {
                let mut t = [SiteKind::Q, SiteKind::K, SiteKind::V].map(|k| c[&(l, kv_capture(k))].clone());
                for (i, k) in [SiteKind::Q, SiteKind::K, SiteKind::V].into_iter().enumerate() {
                    if k != site.kind {
                        t[i] = applied(fitted, SiteId::new(l, k), &t[i])?;
                    }
                }
                base.push(t);
            }
            let idx = match site.kind {
                SiteKind::Q => 0,
                SiteKind::K => 1,
                _ => 2,
            };
            let past = past_ref(&data.past);
            let reference = base
                .iter()
                .map(|[q, k, v]| prefixed_attention(q, k, v, past))
                .collect::<Result<Vec<_>>>()?;
            let denom = n_tok * data.model.config.hidden as f64;
            let eval = |quantize: &dyn Fn(&Tensor) -> Result<Tensor>| -> Result<f64> {
                let mut total = 0.0;
                for (t, r) in base.iter().zip(&reference) {
                    let mut t = t.clone();
                    t[idx] = quantize(&t[idx])?;
                    total += sq_diff(&prefixed_attention(&t[0], &t[1], &t[2], past)?, r);
                }
                Ok(total / denom)
            };
            let raw: Vec<&Tensor> = base.iter().map(|t| &t[idx]).collect();
            match (method, spec.mode) {
                (SearchMethod::StepGrid, _) => {
                    let (lo, hi) = range_of(&raw);
                    let c = grid_search_static(lo, hi, &spec, cfg, |s, z| {
                        let p = per_tensor_params(s, z);
                        eval(&|x| fake_quant(x, &p, &spec))
                    })?;
                    let q = quantizer_from_step(spec, c.scale, c.zero);
                    Ok((q.clone(), report(&q, c.mse_max_min, c.mse, c.evaluated)))
                }
                (SearchMethod::ClipGrid, Mode::Dynamic) => {
                    let c = grid_search_clipping(&cfg.gamma_grid, &cfg.beta_grid, |g, b| {
                        eval(&|x| dynamic_quantize_site(x, &spec, g, b))
                    })?;
                    let q = quantizer_from_clip(spec, c.gamma, c.beta, None)?;
                    Ok((q.clone(), report(&q, c.mse_max_min, c.mse, c.evaluated)))
                }
                (SearchMethod::ClipGrid, Mode::Static) => {
                    let all = Tensor::concat_rows(&raw)?;
                    let c = grid_search_clipping(&cfg.gamma_grid, &cfg.beta_grid, |g, b| {
                        let p = fit_params(&all, &spec, g, b)?;
                        eval(&|x| fake_quant(x, &p, &spec))
                    })?;
                    let q = quantizer_from_clip(spec, c.gamma, c.beta, Some(&all))?;
                    Ok((q.clone(), report(&q, c.mse_max_min, c.mse, c.evaluated)))
                }
            }
        }
    }
}

/// Fits every hooked site, layer by layer in forward order, each on
/// activations produced by the already-calibrated earlier sites. `hooks`
/// supplies the specs; stored parameters in it are ignored.
pub fn calibrate_model(
    model: &ToyModel,
    hooks: &QuantHookSet,
    prefix: Option<&KvCache>,
    sequences: &[Vec<u32>],
    cfg: &CalibConfig,
) -> Result<(QuantHookSet, CalibReport)> {
    cfg.validate()?;
    hooks.check_config(&model.config)?;
    if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
        return Err(Error::Empty("calibration set"));
    }
    for (site, q) in hooks.iter() {
        search_method(site.kind, &q.spec)?;
    }
    let inputs = model_inputs(sequences, prefix);
    let mut xs = inputs.iter().map(|t| embed(model, t)).collect::<Result<Vec<_>>>()?;
    let n_tokens = inputs.iter().map(Vec::len).sum();
    let mut fitted = QuantHookSet::new();
    let mut sites = Vec::new();
    for layer in 0..model.config.n_layers {
        let data = LayerData {
            model,
            layer,
            xs: &xs,
            past: prefix_layer(prefix, layer),
            n_tokens,
        };
        for kind in SiteKind::block_order() {
            let site = SiteId::new(layer, kind);
            let Some(q) = hooks.get(&site) else { continue };
            let (fq, rep) = calibrate_site(&data, site, q.spec, &fitted, cfg)?;
            tracing::debug!(site = %site, mse = rep.mse_best, max_min = rep.mse_max_min, "calibrated");
            fitted.insert(site, fq)?;
            sites.push(rep);
        }
        xs = data.outputs(Some(&fitted))?;
    }
    Ok((
        fitted,
        CalibReport {
            n_sequences: sequences.len(),
            tokens: n_tokens,
            prefixed: prefix.is_some_and(|p| !p.is_empty()),
            sites,
        },
    ))
}

/// Block-output MSE of the quantized model against the full-precision one,
/// per block, both fed their own activations.
pub fn block_errors(
    model: &ToyModel,
    hooks: &QuantHookSet,
    prefix: Option<&KvCache>,
    sequences: &[Vec<u32>],
) -> Result<Vec<f64>> {
    let inputs = model_inputs(sequences, prefix);
    let n_layers = model.config.n_layers;
    let mut totals = vec![0.0f64; n_layers];
    let mut count = 0usize;
    for t in &inputs {
        let (mut xf, mut xq) = (embed(model, t)?, embed(model, t)?);
        for (layer, total) in totals.iter_mut().enumerate() {
            let past = prefix_layer(prefix, layer);
            xf = block_forward(model, layer, &xf, past_ref(&past), None, None)?.out;
            xq = block_forward(model, layer, &xq, past_ref(&past), Some(hooks), None)?.out;
            *total += sq_diff(&xf, &xq);
        }
        count += xf.len();
    }
    Ok(totals.into_iter().map(|t| t / count as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_grid_contains_endpoints() {
        let g = clip_grid(0.5, 0.01);
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 1.0);
        assert_eq!(*g.last().unwrap(), 0.5);
        assert_eq!(clip_grid(0.5, 0.05).len(), 11);
    }

    #[test]
    fn quadratic_forms_match_direct() {
        let e = [1.0f32, 2.0, -1.0, 0.5];
        let g = [2.0, 1.0, 1.0, 3.0];
        // rows (1,2) and (-1,0.5)
        let direct = (2.0 + 2.0 * 2.0 + 3.0 * 4.0) + (2.0 - 1.0 + 0.75);
        assert!((quadratic_rows(&e, &g, 2) - direct).abs() < 1e-12);
        // columns of [[1,-1],[2,0.5]] are (1,2) and (-1,0.5)
        let d = [1.0, -1.0, 2.0, 0.5];
        assert!((quadratic_cols(&d, &g, 2, 2) - direct).abs() < 1e-12);
    }

    #[test]
    fn empty_grids_and_ranges_error() {
        assert!(grid_search_clipping(&[], &[1.0], |_, _| Ok(0.0)).is_err());
        let spec = QuantSpec::new(4, Granularity::PerTensor, Mode::Static).unwrap();
        assert!(step_candidates(f32::INFINITY, f32::NEG_INFINITY, &spec, &CalibConfig::default()).is_err());
        let mut cfg = CalibConfig::default();
        cfg.beta_grid.push(1.5);
        assert!(cfg.validate().is_err());
    }
}
