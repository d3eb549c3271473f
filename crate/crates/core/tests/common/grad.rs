//! Finite-difference helpers: directional derivatives of the block loss,
//! analytic from the tape and numeric through the `f64` reference.

use std::collections::BTreeMap;

use prefixquant::corpus::{generate_corpus, windows};
use prefixquant::finetune::tape::Tape;
use prefixquant::finetune::{block_forward_quant, BlockState};
use prefixquant::model::{embed, Linear, ToyModel, BOS};
use prefixquant::tensor::{Rng, Tensor};

use super::{ref_block, M};

pub fn text(seed: u64, n: usize, len: usize) -> Vec<Vec<u32>> {
    windows(&generate_corpus(n * len + 16, seed), n, len)
}

pub fn block_input(m: &ToyModel, tokens: &[u32]) -> Tensor {
    let mut t = vec![BOS];
    t.extend_from_slice(tokens);
    embed(m, &t).unwrap()
}

pub fn randn(shape: &[usize], rng: &mut Rng, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(1.0) * scale).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
}

pub fn ref_weights(state: &BlockState) -> BTreeMap<Linear, M> {
    state.weights.iter().map(|(&l, w)| (l, M::of(w))).collect()
}

pub fn ref_loss(out: &M, target: &Tensor) -> f64 {
    out.d.iter().zip(target.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>() / out.d.len() as f64
}

pub fn rms(t: &Tensor) -> f32 {
    (t.data().iter().map(|v| v * v).sum::<f32>() / t.len() as f32).sqrt()
}

/// Directional derivative of the block loss along `dir`, analytic from the
/// tape and by central difference through the `f64` reference.
pub fn directional(
    m: &ToyModel,
    state: &BlockState,
    x: &Tensor,
    target: &Tensor,
    past: Option<(&Tensor, &Tensor)>,
    lin: Linear,
    dir: &Tensor,
) -> (f64, f64) {
    let mut tape = Tape::new();
    let vars = block_forward_quant(m, state, x, past, &mut tape).unwrap();
    let loss = tape.squared_error(vars.out, target, target.len() as f64).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(vars.weights[&lin]).unwrap();
    let analytic = g.data().iter().zip(dir.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
    let eps = 1e-6;
    let at = |sign: f64| {
        let mut ws = ref_weights(state);
        let w = ws[&lin].zip(&M::of(dir), |a, b| a + sign * eps * b);
        ws.insert(lin, w);
        ref_loss(&ref_block(m, state.layer, &ws, &M::of(x), past), target)
    };
    let fd = (at(1.0) - at(-1.0)) / (2.0 * eps);
    (analytic, fd)
}

/// Quantization error of `x` at clipping `(γ, β)`, in `f64` throughout.
pub fn clip_loss(x: &[f32], qmax: f64, gamma: f64, beta: f64) -> f64 {
    let lo = x.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s = (gamma * hi - beta * lo) / qmax;
    let z = (-(beta * lo / s).floor()).clamp(0.0, qmax);
    x.iter()
        .map(|&v| {
            let v = v as f64;
            let y = s * (((v / s).round_ties_even() + z).clamp(0.0, qmax) - z);
            (y - v).powi(2)
        })
        .sum::<f64>()
        / x.len() as f64
}
