//! A toy model edited so that it has a known set of outlier tokens.
//!
//! Real decoders put massive activations on the initial token and on the
//! first few delimiter tokens. Random toy models do not, so this builds the
//! behaviour in by hand on top of a random model:
//!
//! * residual channel [`MARK`] flags the marker byte (default `.`) and
//!   [`BOS_MARK`] flags BOS; nothing else writes to either;
//! * in the planted layer, head 0 lets a marker query attend strongly to
//!   earlier markers but not to itself (RoPE phases make the self score very
//!   negative and every other marker–marker score very positive), and writes
//!   what it found to channel [`SEEN`];
//! * one MLP unit fires `gate = G·(mark − 2·seen)`, `up = mark`, writing a
//!   massive value into channel [`MASSIVE`]. A second unit does the same for
//!   BOS unconditionally.
//!
//! So BOS and the first marker after it become outlier tokens, while later
//! markers stay quiet. If the marker was already seen in the prefix cache,
//! no suffix position fires at all.

use crate::error::{Error, Result};
use crate::model::{forward, CaptureSite, ForwardOptions, Linear, ModelConfig, ToyModel, BOS};
use crate::tensor::{Rng, Tensor};

pub const MARK: usize = 0;
pub const SEEN: usize = 1;
pub const MASSIVE: usize = 2;
pub const BOS_MARK: usize = 3;

const MARK_VALUE: f32 = 0.3;
const GATE: f32 = 2.0;
const SELF_SCORE: f64 = -13.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedConfig {
    pub marker: u8,
    /// Residual value written into [`MASSIVE`] by a firing token.
    pub massive: f32,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            marker: b'.',
            massive: 150.0,
        }
    }
}

/// Block whose MLP produces the planted outliers.
pub fn planted_layer(cfg: &ModelConfig) -> usize {
    usize::from(cfg.n_layers > 1)
}

/// Per-pair RoPE weights `c_i` for the marker head and the worst-case margin
/// of `f(Δ) = Σ c_i cos(θ_i Δ)`: `f(0) ≤ −margin`, `f(Δ) ≥ margin` for
/// `1 ≤ Δ < max_seq`.
fn phase_design(cfg: &ModelConfig) -> Result<(Vec<f64>, f64)> {
    let half = cfg.head_dim / 2;
    let horizon = cfg.max_seq as f64;
    let thetas: Vec<f64> = (0..half)
        .map(|i| (cfg.rope_theta as f64).powf(-2.0 * i as f64 / cfg.head_dim as f64))
        .collect();
    let high: Vec<bool> = thetas.iter().map(|&t| t >= 0.05).collect();
    let low: Vec<bool> = thetas.iter().map(|&t| t * horizon < 0.3).collect();
    let weights = |w: f64| -> Vec<f64> {
        (0..half)
            .map(|i| if high[i] { -1.0 } else if low[i] { w } else { 0.0 })
            .collect()
    };
    let margin = |c: &[f64]| -> f64 {
        let f = |d: f64| c.iter().zip(&thetas).map(|(ci, t)| ci * (t * d).cos()).sum::<f64>();
        (1..cfg.max_seq).map(|d| f(d as f64)).fold(-f(0.0), f64::min)
    };
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 1..=500 {
        let w = k as f64 * 0.01;
        let m = margin(&weights(w));
        if m > best.1 {
            best = (w, m);
        }
    }
    if best.1 <= 0.0 {
        return Err(Error::Config(format!(
            "head_dim {} / max_seq {} leave no room for the planted marker head",
            cfg.head_dim, cfg.max_seq
        )));
    }
    Ok((weights(best.0), best.1))
}

fn probe_sequences(marker: u32) -> Vec<u32> {
    // BOS, filler, marker, filler, marker, …
    let mut t = vec![BOS];
    for i in 0..40u32 {
        t.push(if i % 7 == 3 { marker } else { b'a' as u32 + i % 26 });
    }
    t
}

fn capture(model: &ToyModel, tokens: &[u32]) -> Result<crate::model::Captures> {
    Ok(forward(
        model,
        tokens,
        ForwardOptions {
            capture: true,
            ..Default::default()
        },
        None,
    )?
    .captures)
}

/// Random model with planted outliers.
pub fn planted_model(config: ModelConfig, planted: PlantedConfig, rng: &mut Rng) -> Result<ToyModel> {
    let mut m = ToyModel::init_random(config, rng)?;
    plant(&mut m, planted)?;
    Ok(m)
}

/// Edits `model` in place; see the module docs.
pub fn plant(model: &mut ToyModel, planted: PlantedConfig) -> Result<()> {
    let cfg = model.config.clone();
    if cfg.hidden < 8 || cfg.head_dim < 8 || cfg.intermediate < 4 {
        return Err(Error::Config("model too small for the planted construction".into()));
    }
    if model.rotation != Default::default() {
        return Err(Error::Invalid("plant before rotating".into()));
    }
    let marker = planted.marker as u32;
    let layer = planted_layer(&cfg);
    let reserved = [MARK, SEEN, MASSIVE, BOS_MARK];
    let (h, d, inter) = (cfg.hidden, cfg.head_dim, cfg.intermediate);
    let set = |t: &mut Tensor, r: usize, c: usize, v: f32| {
        let cols = t.last_dim();
        t.data_mut()[r * cols + c] = v;
    };

    for tok in 0..cfg.vocab {
        for &c in &reserved {
            set(&mut model.embedding, tok, c, 0.0);
        }
    }
    set(&mut model.embedding, marker as usize, MARK, MARK_VALUE);
    set(&mut model.embedding, BOS as usize, BOS_MARK, MARK_VALUE);
    for w in &mut model.layers {
        for lin in [Linear::OProj, Linear::DownProj] {
            let rows = lin.dims(&cfg).0;
            for r in 0..rows {
                for &c in &reserved {
                    set(w.linear_mut(lin), r, c, 0.0);
                }
            }
        }
    }

    // Normalized marker magnitude entering the planted layer.
    let caps = capture(model, &probe_sequences(marker))?;
    let normed = &caps[&(layer, CaptureSite::LinearInput(Linear::QProj))];
    let probe = probe_sequences(marker);
    let marks: Vec<f64> = probe
        .iter()
        .enumerate()
        .filter(|&(_, &t)| t == marker)
        .map(|(i, _)| normed.row(i)[MARK] as f64)
        .collect();
    let n_min = marks.iter().cloned().fold(f64::INFINITY, f64::min);
    let n_med = {
        let mut s = marks.clone();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };

    let (weights, margin) = phase_design(&cfg)?;
    let amp = -SELF_SCORE * (d as f64).sqrt() / (n_min * n_min * margin);
    let w = &mut model.layers[layer];
    for col in 0..d {
        for r in 0..h {
            set(&mut w.q_proj, r, col, 0.0);
            set(&mut w.k_proj, r, col, 0.0);
            set(&mut w.v_proj, r, col, 0.0);
        }
    }
    for (i, &c) in weights.iter().enumerate() {
        let a = (amp * c.abs()).sqrt() as f32;
        set(&mut w.q_proj, MARK, i, a);
        set(&mut w.k_proj, MARK, i, a * c.signum() as f32);
    }
    set(&mut w.v_proj, MARK, 0, 1.0);
    for c in 0..h {
        set(&mut w.o_proj, 0, c, 0.0);
    }
    set(&mut w.o_proj, 0, SEEN, (MARK_VALUE as f64 / n_med) as f32);

    // Not unit 0: a Hadamard rotation maps unit 0 to its constant column,
    // which leaves a firing token with a one-sided range.
    let (unit, bos_unit) = (1, 2);
    for r in 0..h {
        for u in [unit, bos_unit] {
            set(&mut w.gate_proj, r, u, 0.0);
            set(&mut w.up_proj, r, u, 0.0);
        }
    }
    for u in [unit, bos_unit] {
        for c in 0..h {
            set(&mut w.down_proj, u, c, 0.0);
        }
    }
    set(&mut w.gate_proj, MARK, unit, GATE);
    set(&mut w.gate_proj, SEEN, unit, -2.0 * GATE);
    set(&mut w.up_proj, MARK, unit, 1.0);
    set(&mut w.gate_proj, BOS_MARK, bos_unit, GATE);
    set(&mut w.up_proj, BOS_MARK, bos_unit, 1.0);
    debug_assert!(inter > bos_unit);

    // Scale the writes so a firing token carries `massive` in the residual.
    let caps = capture(model, &probe)?;
    let act = &caps[&(layer, CaptureSite::LinearInput(Linear::DownProj))];
    let first = probe.iter().position(|&t| t == marker).expect("probe has a marker");
    let (a_mark, a_bos) = (act.row(first)[unit], act.row(0)[bos_unit]);
    if !(a_mark > 1.0 && a_bos > 1.0) {
        return Err(Error::Config(format!(
            "planted units failed to fire (marker {a_mark}, bos {a_bos})"
        )));
    }
    let w = &mut model.layers[layer];
    set(&mut w.down_proj, unit, MASSIVE, planted.massive / a_mark);
    set(&mut w.down_proj, bos_unit, MASSIVE, planted.massive / a_bos);
    Ok(())
}
