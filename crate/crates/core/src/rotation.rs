//! Randomized Hadamard rotations and their absorption into model weights.
//!
//! A rotation of size `n` is `Q = D·H/√n` with `D` a random ±1 diagonal and
//! `H` the Sylvester Hadamard matrix, so for a row vector `x`:
//! `x·Q = wht(x ∘ signs)` and `x·Qᵀ = wht(x) ∘ signs`.
//!
//! * R1 (hidden) and R2 (per head, on the value/output path) are folded into
//!   weights after the RMSNorm gains are absorbed into the following linears.
//! * R3 (per head, q and k after RoPE) and R4 (down_proj input) run online;
//!   `R4ᵀ` is fused into down_proj.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linear, ToyModel};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationSite {
    R1,
    R2,
    R3,
    R4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HadamardSpec {
    pub dim: usize,
    pub signs: Vec<f32>,
    pub site: RotationSite,
}

/// In-place normalized Walsh–Hadamard transform.
fn wht_f64(buf: &mut [f64]) {
    let n = buf.len();
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (buf[i], buf[i + h]);
                buf[i] = a + b;
                buf[i + h] = a - b;
            }
        }
        h *= 2;
    }
    let norm = 1.0 / (n as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= norm);
}

/// Normalized Walsh–Hadamard transform `x·H/√n`.
pub fn wht(x: &[f32]) -> Result<Vec<f32>> {
    if !x.len().is_power_of_two() {
        return Err(Error::Invalid(format!("wht length {} is not a power of two", x.len())));
    }
    let mut buf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    wht_f64(&mut buf);
    Ok(buf.into_iter().map(|v| v as f32).collect())
}

impl HadamardSpec {
    pub fn random(dim: usize, site: RotationSite, rng: &mut Rng) -> Result<Self> {
        let signs = (0..dim).map(|_| rng.sign()).collect();
        Self::from_signs(signs, site)
    }

    pub fn from_signs(signs: Vec<f32>, site: RotationSite) -> Result<Self> {
        let dim = signs.len();
        if dim < 2 || !dim.is_power_of_two() {
            return Err(Error::Invalid(format!("rotation size {dim} is not a power of two")));
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::Invalid("rotation signs must be ±1".into()));
        }
        Ok(Self { dim, signs, site })
    }

    fn chunks(&self, x: &Tensor, transpose: bool) -> Result<Tensor> {
        if x.last_dim() % self.dim != 0 {
            return Err(Error::shape("rotation", x.shape(), &[self.dim]));
        }
        let mut buf = vec![0.0f64; self.dim];
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.data().chunks(self.dim) {
            for ((b, &v), &s) in buf.iter_mut().zip(chunk).zip(&self.signs) {
                *b = if transpose { v as f64 } else { v as f64 * s as f64 };
            }
            wht_f64(&mut buf);
            if transpose {
                out.extend(buf.iter().zip(&self.signs).map(|(&b, &s)| (b * s as f64) as f32));
            } else {
                out.extend(buf.iter().map(|&b| b as f32));
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    /// `x·Q` applied to every consecutive `dim`-chunk of the last axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.chunks(x, false)
    }

    /// `x·Qᵀ` chunk-wise.
    pub fn apply_transpose(&self, x: &Tensor) -> Result<Tensor> {
        self.chunks(x, true)
    }

    /// Dense `Q`.
    pub fn matrix(&self) -> Tensor {
        let n = self.dim;
        let norm = 1.0 / (n as f32).sqrt();
        Tensor::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            let h = if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            self.signs[i] * h * norm
        })
    }
}

/// `Qᵀ·W` (block-diagonal if `W` has more rows than `dim`).
fn left_transpose(spec: &HadamardSpec, w: &Tensor) -> Result<Tensor> {
    spec.apply(&w.transpose()?)?.transpose()
}

/// `Q·W`.
fn left(spec: &HadamardSpec, w: &Tensor) -> Result<Tensor> {
    spec.apply_transpose(&w.transpose()?)?.transpose()
}

fn scale_rows(w: &Tensor, g: &Tensor) -> Tensor {
    let cols = w.last_dim();
    let gd = g.data();
    Tensor::from_fn(w.shape(), |i| w.data()[i] * gd[i / cols])
}

/// Absorbs every RMSNorm gain into the linears that read the normalized
/// stream and resets the gains to one. The function computed is unchanged.
pub fn fold_norms(model: &mut ToyModel) {
    let hidden = model.config.hidden;
    for w in &mut model.layers {
        for l in [Linear::QProj, Linear::KProj, Linear::VProj] {
            *w.linear_mut(l) = scale_rows(w.linear(l), &w.attn_norm);
        }
        for l in [Linear::GateProj, Linear::UpProj] {
            *w.linear_mut(l) = scale_rows(w.linear(l), &w.mlp_norm);
        }
        w.attn_norm = Tensor::full(&[hidden], 1.0);
        w.mlp_norm = Tensor::full(&[hidden], 1.0);
    }
    model.lm_head = scale_rows(&model.lm_head, &model.final_norm);
    model.final_norm = Tensor::full(&[hidden], 1.0);
}

fn check_dim(spec: &HadamardSpec, dim: usize, site: RotationSite) -> Result<()> {
    if spec.dim != dim || spec.site != site {
        return Err(Error::Invalid(format!(
            "{:?} rotation of size {} does not fit dimension {dim}",
            spec.site, spec.dim
        )));
    }
    Ok(())
}

fn rotate_weights(
    model: &mut ToyModel,
    r1: Option<&HadamardSpec>,
    r2: Option<&HadamardSpec>,
    inverse: bool,
) -> Result<()> {
    let cfg = model.config.clone();
    if let Some(r1) = r1 {
        check_dim(r1, cfg.hidden, RotationSite::R1)?;
        // Forward: embedding·Q, readers Qᵀ·W, writers W·Q. Inverse swaps Q, Qᵀ.
        let (row, col) = if inverse {
            (HadamardSpec::apply_transpose as fn(&_, &_) -> _, left as fn(&_, &_) -> _)
        } else {
            (HadamardSpec::apply as fn(&_, &_) -> _, left_transpose as fn(&_, &_) -> _)
        };
        model.embedding = row(r1, &model.embedding)?;
        model.lm_head = col(r1, &model.lm_head)?;
        for w in &mut model.layers {
            for l in Linear::ALL {
                let t = w.linear(l);
                *w.linear_mut(l) = match l {
                    Linear::QProj | Linear::KProj | Linear::VProj | Linear::GateProj | Linear::UpProj => {
                        col(r1, t)?
                    }
                    Linear::OProj | Linear::DownProj => row(r1, t)?,
                };
            }
        }
    }
    if let Some(r2) = r2 {
        check_dim(r2, cfg.head_dim, RotationSite::R2)?;
        for w in &mut model.layers {
            if inverse {
                w.v_proj = r2.apply_transpose(&w.v_proj)?;
                w.o_proj = left(r2, &w.o_proj)?;
            } else {
                w.v_proj = r2.apply(&w.v_proj)?;
                w.o_proj = left_transpose(r2, &w.o_proj)?;
            }
        }
    }
    Ok(())
}

/// Folds norms, then absorbs R1 and/or R2 into the weights.
pub fn absorb_rotations(
    model: &mut ToyModel,
    r1: Option<&HadamardSpec>,
    r2: Option<&HadamardSpec>,
) -> Result<()> {
    fold_norms(model);
    rotate_weights(model, r1, r2, false)?;
    model.rotation.r1 |= r1.is_some();
    model.rotation.r2 |= r2.is_some();
    Ok(())
}

/// Undoes [`absorb_rotations`] (norm gains stay folded) and removes any
/// online rotations.
pub fn unabsorb(
    model: &mut ToyModel,
    r1: Option<&HadamardSpec>,
    r2: Option<&HadamardSpec>,
) -> Result<()> {
    rotate_weights(model, r1, r2, true)?;
    if let Some(r4) = model.online_r4.take() {
        for w in &mut model.layers {
            w.down_proj = left(&r4, &w.down_proj)?;
        }
    }
    model.online_r3 = None;
    model.rotation = Default::default();
    Ok(())
}

/// Installs the online rotations; `R4ᵀ` is fused into every down_proj.
pub fn enable_online_rotations(
    model: &mut ToyModel,
    r3: Option<HadamardSpec>,
    r4: Option<HadamardSpec>,
) -> Result<()> {
    if let Some(r3) = &r3 {
        check_dim(r3, model.config.head_dim, RotationSite::R3)?;
    }
    if let Some(r4) = &r4 {
        check_dim(r4, model.config.intermediate, RotationSite::R4)?;
        if model.online_r4.is_some() {
            return Err(Error::Invalid("R4 already installed".into()));
        }
        for w in &mut model.layers {
            w.down_proj = left_transpose(r4, &w.down_proj)?;
        }
    }
    model.rotation.r3 |= r3.is_some();
    model.rotation.r4 |= r4.is_some();
    if r3.is_some() {
        model.online_r3 = r3;
    }
    if r4.is_some() {
        model.online_r4 = r4;
    }
    Ok(())
}

/// Applies an online rotation (R3 or R4) to an activation.
pub fn online_rotate(x: &Tensor, spec: &HadamardSpec) -> Result<Tensor> {
    match spec.site {
        RotationSite::R3 | RotationSite::R4 => spec.apply(x),
        s => Err(Error::Invalid(format!("{s:?} is absorbed into weights, not applied online"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationFlags {
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
    pub r4: bool,
}

impl Default for RotationFlags {
    fn default() -> Self {
        Self {
            r1: true,
            r2: true,
            r3: true,
            r4: true,
        }
    }
}

/// The four rotations a seed produces. All four are always drawn, in order,
/// so enabling one does not change the others.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationSet {
    pub r1: HadamardSpec,
    pub r2: HadamardSpec,
    pub r3: HadamardSpec,
    pub r4: HadamardSpec,
}

impl RotationSet {
    pub fn from_seed(model: &ToyModel, seed: u64) -> Result<Self> {
        let cfg = &model.config;
        let mut rng = Rng::seed(seed);
        Ok(Self {
            r1: HadamardSpec::random(cfg.hidden, RotationSite::R1, &mut rng)?,
            r2: HadamardSpec::random(cfg.head_dim, RotationSite::R2, &mut rng)?,
            r3: HadamardSpec::random(cfg.head_dim, RotationSite::R3, &mut rng)?,
            r4: HadamardSpec::random(cfg.intermediate, RotationSite::R4, &mut rng)?,
        })
    }
}

/// Returns a rotated copy of `model`. Fails if it is already rotated.
pub fn rotate_model(model: &ToyModel, seed: u64, flags: RotationFlags) -> Result<ToyModel> {
    let info = &model.rotation;
    if info.r1 || info.r2 || info.r3 || info.r4 {
        return Err(Error::Invalid("model is already rotated".into()));
    }
    let set = RotationSet::from_seed(model, seed)?;
    let mut out = model.clone();
    absorb_rotations(&mut out, flags.r1.then_some(&set.r1), flags.r2.then_some(&set.r2))?;
    enable_online_rotations(
        &mut out,
        flags.r3.then(|| set.r3.clone()),
        flags.r4.then(|| set.r4.clone()),
    )?;
    out.rotation.seed = Some(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ForwardOptions, ModelConfig};
    use crate::tensor::matmul;

    fn spec(n: usize, seed: u64) -> HadamardSpec {
        HadamardSpec::random(n, RotationSite::R1, &mut Rng::seed(seed)).unwrap()
    }

    #[test]
    fn orthogonal() {
        for n in [2, 8, 64] {
            let q = spec(n, 1).matrix();
            let qqt = matmul(&q, &q.transpose().unwrap()).unwrap();
            assert!(qqt.max_abs_diff(&Tensor::identity(n)) < 1e-5);
        }
    }

    #[test]
    fn wht_is_involution() {
        let x: Vec<f32> = (0..32).map(|i| (i as f32 * 0.7).sin()).collect();
        let y = wht(&wht(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(wht(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn fast_path_matches_dense_matrix() {
        let h = spec(64, 2);
        let x = Tensor::randn(&[5, 64], 1.0, &mut Rng::seed(3));
        let q = h.matrix();
        assert!(h.apply(&x).unwrap().max_abs_diff(&matmul(&x, &q).unwrap()) < 1e-5);
        let qt = q.transpose().unwrap();
        assert!(h.apply_transpose(&x).unwrap().max_abs_diff(&matmul(&x, &qt).unwrap()) < 1e-5);
    }

    #[test]
    fn preserves_norm() {
        let h = spec(128, 4);
        let x = Tensor::randn(&[3, 128], 2.0, &mut Rng::seed(5));
        let y = h.apply(&x).unwrap();
        for t in 0..3 {
            let a: f64 = x.row(t).iter().map(|&v| (v as f64).powi(2)).sum();
            let b: f64 = y.row(t).iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((a - b).abs() / a < 1e-6);
        }
    }

    #[test]
    fn spreads_channel_outlier() {
        let h = spec(256, 6);
        let mut x = Tensor::randn(&[1, 256], 0.1, &mut Rng::seed(7)).into_data();
        x[17] = 100.0;
        let x = Tensor::new(vec![1, 256], x).unwrap();
        let y = h.apply(&x).unwrap();
        assert!(y.max_abs() < 0.1 * x.max_abs());
    }

    #[test]
    fn rotated_model_is_equivalent() {
        let mut m = ToyModel::init_random(ModelConfig::tiny(), &mut Rng::seed(8)).unwrap();
        let mut rng = Rng::seed(9);
        for w in &mut m.layers {
            w.attn_norm = Tensor::from_fn(&[64], |_| rng.uniform(0.5, 1.5));
            w.mlp_norm = Tensor::from_fn(&[64], |_| rng.uniform(0.5, 1.5));
        }
        let tokens: Vec<u32> = (0..40).map(|i| (i * 7 % 256) as u32).collect();
        let base = forward(&m, &tokens, ForwardOptions::default(), None).unwrap().logits;
        let r = rotate_model(&m, 11, RotationFlags::default()).unwrap();
        assert!(r.online_r3.is_some() && r.online_r4.is_some());
        let rot = forward(&r, &tokens, ForwardOptions::default(), None).unwrap().logits;
        assert!(rot.max_abs_diff(&base) < 1e-4, "{}", rot.max_abs_diff(&base));
        assert!(rotate_model(&r, 11, RotationFlags::default()).is_err());

        let set = RotationSet::from_seed(&m, 11).unwrap();
        let mut back = r.clone();
        unabsorb(&mut back, Some(&set.r1), Some(&set.r2)).unwrap();
        let mut folded = m.clone();
        fold_norms(&mut folded);
        assert!(back.embedding.max_abs_diff(&folded.embedding) < 1e-5);
        assert!(back.layers[1].down_proj.max_abs_diff(&folded.layers[1].down_proj) < 1e-5);
        assert!(back.layers[0].o_proj.max_abs_diff(&folded.layers[0].o_proj) < 1e-5);
    }
}
