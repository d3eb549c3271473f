//! Block-wise fine-tuning of weights and quantizer parameters.
//!
//! Each block is trained in turn to reproduce the full-precision block's
//! output (on full-precision inputs) from the quantized pipeline's
//! activations, with Adam and an MSE loss. The prefix cache, if any, is a
//! frozen constant.

pub mod tape;

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{model_inputs, prefix_layer};
use crate::error::{Error, Result};
use crate::model::{block_forward, embed, KvCache, Linear, QuantHookSet, SiteId, SiteKind, SiteQuantizer, ToyModel};
use crate::quant::{Mode, QuantParams, QuantSpec, SiteRole, SCALE_GUARD};
use crate::tensor::{Rng, Tensor};
use tape::{Tape, Var};

/// Groups of parameters that can be trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    Weights,
    WeightParams,
    /// `γ, β` of dynamic activation and K/V sites.
    ActivationClipping,
    /// `s, z` of static activation and K/V sites.
    ActivationStep,
}

impl Trainable {
    pub const ALL: [Trainable; 4] = [
        Trainable::Weights,
        Trainable::WeightParams,
        Trainable::ActivationClipping,
        Trainable::ActivationStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Trainable::Weights => "weights",
            Trainable::WeightParams => "weight_params",
            Trainable::ActivationClipping => "activation_clipping",
            Trainable::ActivationStep => "activation_step",
        }
    }
}

impl FromStr for Trainable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Trainable::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown trainable `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_qparams: f64,
    pub lr_weights: f64,
    pub batch: usize,
    pub epochs: usize,
    pub n_samples: usize,
    pub seq_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub trainables: Vec<Trainable>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_qparams: 5e-5,
            lr_weights: 5e-6,
            batch: 4,
            epochs: 20,
            n_samples: 64,
            seq_len: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            trainables: Trainable::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Epoch default by activation width: 10 for 8-bit, 20 below.
    pub fn epochs_for_bits(act_bits: u8) -> usize {
        if act_bits >= 8 {
            10
        } else {
            20
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_qparams >= 0.0 && self.lr_weights >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable view of one quantizer: `(s, z)` per group for static sites,
/// scalar `(γ, β)` for dynamic ones.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantState {
    pub spec: QuantSpec,
    /// `s` or `γ`.
    pub a: Tensor,
    /// `z` or `β`.
    pub b: Tensor,
}

impl QuantState {
    fn from_quantizer(site: SiteId, q: &SiteQuantizer) -> Result<Self> {
        match (q.spec.mode, &q.params) {
            (Mode::Static, Some(p)) => Ok(Self {
                spec: q.spec,
                a: p.scale.clone(),
                b: p.zero.clone(),
            }),
            (Mode::Static, None) => Err(Error::Invalid(format!("{site} is static but not calibrated"))),
            (Mode::Dynamic, _) => Ok(Self {
                spec: q.spec,
                a: Tensor::from_parts(vec![1], vec![q.gamma]),
                b: Tensor::from_parts(vec![1], vec![q.beta]),
            }),
        }
    }

    fn to_quantizer(&self, prev: &SiteQuantizer) -> SiteQuantizer {
        match self.spec.mode {
            Mode::Static => SiteQuantizer {
                spec: self.spec,
                gamma: prev.gamma,
                beta: prev.beta,
                params: Some(QuantParams {
                    scale: self.a.clone(),
                    zero: self.b.clone(),
                    gamma: prev.gamma,
                    beta: prev.beta,
                }),
            },
            Mode::Dynamic => SiteQuantizer {
                spec: self.spec,
                gamma: self.a.data()[0],
                beta: self.b.data()[0],
                params: None,
            },
        }
    }

    fn trainable(&self, kind: SiteKind) -> Trainable {
        match (kind.role(), self.spec.mode) {
            (SiteRole::Weight, _) => Trainable::WeightParams,
            (_, Mode::Dynamic) => Trainable::ActivationClipping,
            (_, Mode::Static) => Trainable::ActivationStep,
        }
    }

    /// Keeps parameters in their valid ranges.
    fn project(&mut self) {
        let qmax = self.spec.qmax();
        match self.spec.mode {
            Mode::Dynamic => {
                self.a = self.a.map(|v| v.clamp(0.0, 1.0));
                self.b = self.b.map(|v| v.clamp(0.0, 1.0));
            }
            Mode::Static => {
                self.a = self.a.map(|v| if v.is_nan() { SCALE_GUARD } else { v.max(SCALE_GUARD) });
                if !self.spec.symmetric {
                    self.b = self.b.map(|v| v.clamp(0.0, qmax));
                }
            }
        }
    }

    /// Integer zero points, as deployed.
    fn rounded(&self) -> Self {
        let mut s = self.clone();
        if self.spec.mode == Mode::Static {
            let qmax = self.spec.qmax();
            s.b = self.b.map(|v| v.round_ties_even().clamp(0.0, qmax));
        }
        s
    }
}

/// Weights and quantizers of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    pub layer: usize,
    pub weights: BTreeMap<Linear, Tensor>,
    pub quant: BTreeMap<SiteKind, QuantState>,
}

impl BlockState {
    pub fn from_model(model: &ToyModel, layer: usize, hooks: &QuantHookSet) -> Result<Self> {
        let w = &model.layers[layer];
        let weights = Linear::ALL.iter().map(|&l| (l, w.linear(l).clone())).collect();
        let mut quant = BTreeMap::new();
        for (site, q) in hooks.iter().filter(|(s, _)| s.layer == layer) {
            quant.insert(site.kind, QuantState::from_quantizer(*site, q)?);
        }
        Ok(Self { layer, weights, quant })
    }

    /// Writes weights into `model` and quantizers into `hooks`.
    pub fn write_back(&self, model: &mut ToyModel, hooks: &mut QuantHookSet) -> Result<()> {
        for (&l, w) in &self.weights {
            *model.layers[self.layer].linear_mut(l) = w.clone();
        }
        for (&kind, st) in &self.quant {
            let site = SiteId::new(self.layer, kind);
            let prev = hooks.get(&site).cloned().unwrap_or_else(|| SiteQuantizer::new(st.spec));
            hooks.insert(site, st.to_quantizer(&prev))?;
        }
        Ok(())
    }

    fn rounded(&self) -> Self {
        Self {
            layer: self.layer,
            weights: self.weights.clone(),
            quant: self.quant.iter().map(|(k, q)| (*k, q.rounded())).collect(),
        }
    }

    fn project(&mut self) {
        self.quant.values_mut().for_each(QuantState::project);
    }
}

/// Leaf variables of one tape forward.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub weights: BTreeMap<Linear, Var>,
    pub quant: BTreeMap<SiteKind, (Var, Var)>,
    pub out: Var,
}

struct Builder<'a> {
    tape: &'a mut Tape,
    state: &'a BlockState,
    quant: BTreeMap<SiteKind, (Var, Var)>,
    weights: BTreeMap<Linear, Var>,
}

impl Builder<'_> {
    fn hook(&mut self, kind: SiteKind, x: Var) -> Result<Var> {
        let Some(st) = self.state.quant.get(&kind) else { return Ok(x) };
        let a = self.tape.leaf(st.a.clone());
        let b = self.tape.leaf(st.b.clone());
        self.quant.insert(kind, (a, b));
        match st.spec.mode {
            Mode::Static => self.tape.fake_quant(x, a, b, st.spec),
            Mode::Dynamic => self.tape.dynamic_quant(x, a, b, st.spec),
        }
    }

    fn linear(&mut self, lin: Linear, x: Var) -> Result<Var> {
        let xq = self.hook(SiteKind::Input(lin), x)?;
        let w = self.tape.leaf(self.state.weights[&lin].clone());
        self.weights.insert(lin, w);
        let wq = self.hook(SiteKind::Weight(lin), w)?;
        self.tape.matmul(xq, wq)
    }
}

/// Quantized block forward recorded on `tape`. Norm gains and online
/// rotations come from `model`; weights and quantizers from `state`.
pub fn block_forward_quant(
    model: &ToyModel,
    state: &BlockState,
    x: &Tensor,
    past: Option<(&Tensor, &Tensor)>,
    tape: &mut Tape,
) -> Result<BlockVars> {
    let cfg = &model.config;
    let lw = &model.layers[state.layer];
    let (t_len, _) = x.dims2("block_forward_quant")?;
    let past_len = past.map_or(0, |(k, _)| k.shape()[0]);
    let mut b = Builder {
        tape,
        state,
        quant: BTreeMap::new(),
        weights: BTreeMap::new(),
    };
    let x = b.tape.leaf(x.clone());
    let attn_norm = b.tape.leaf(lw.attn_norm.clone());
    let h = b.tape.rmsnorm(x, attn_norm, cfg.norm_eps)?;
    let q = b.linear(Linear::QProj, h)?;
    let k = b.linear(Linear::KProj, h)?;
    let v = b.linear(Linear::VProj, h)?;
    let mut q = b.tape.rope(q, cfg.head_dim, past_len, cfg.rope_theta)?;
    let mut k = b.tape.rope(k, cfg.head_dim, past_len, cfg.rope_theta)?;
    if let Some(r3) = &model.online_r3 {
        q = b.tape.rotate(q, r3)?;
        k = b.tape.rotate(k, r3)?;
    }
    let shape = [t_len, cfg.n_heads, cfg.head_dim];
    let q = b.tape.reshape(q, &shape)?;
    let k = b.tape.reshape(k, &shape)?;
    let v = b.tape.reshape(v, &shape)?;
    let q = b.hook(SiteKind::Q, q)?;
    let k = b.hook(SiteKind::K, k)?;
    let v = b.hook(SiteKind::V, v)?;
    let attn = b.tape.attention(q, k, v, past)?;
    let o = b.linear(Linear::OProj, attn)?;
    let x1 = b.tape.add(x, o)?;
    let mlp_norm = b.tape.leaf(lw.mlp_norm.clone());
    let h2 = b.tape.rmsnorm(x1, mlp_norm, cfg.norm_eps)?;
    let g = b.linear(Linear::GateProj, h2)?;
    let u = b.linear(Linear::UpProj, h2)?;
    let sg = b.tape.silu(g);
    let mut act = b.tape.mul(sg, u)?;
    if let Some(r4) = &model.online_r4 {
        act = b.tape.rotate(act, r4)?;
    }
    let down = b.linear(Linear::DownProj, act)?;
    let out = b.tape.add(x1, down)?;
    Ok(BlockVars {
        weights: b.weights,
        quant: b.quant,
        out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Weight(Linear),
    QuantA(SiteKind),
    QuantB(SiteKind),
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<Slot, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    fn step(&mut self, updates: Vec<(Slot, &mut Tensor, Tensor, f64)>) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (slot, param, grad, lr) in updates {
            let n = param.len();
            let (m, v) = self.moments.entry(slot).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = param.data().to_vec();
            for (i, (&g, p)) in grad.data().iter().zip(data.iter_mut()).enumerate() {
                let g = g as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                if lr > 0.0 {
                    let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                    *p = (*p as f64 - step) as f32;
                }
            }
            *param = Tensor::from_parts(param.shape().to_vec(), data);
        }
    }
}

/// Mean squared error of the block under `state` against `targets`.
pub fn block_loss(
    model: &ToyModel,
    state: &BlockState,
    inputs: &[Tensor],
    targets: &[Tensor],
    past: Option<(&Tensor, &Tensor)>,
) -> Result<f64> {
    let mut m = model.clone();
    let mut hooks = QuantHookSet::new();
    state.write_back(&mut m, &mut hooks)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, t) in inputs.iter().zip(targets) {
        let out = block_forward(&m, state.layer, x, past, Some(&hooks), None)?.out;
        total += out.data().iter().zip(t.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
        count += out.len();
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrainReport {
    pub layer: usize,
    /// Loss before training, then after every epoch (zero points rounded).
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains one block. Returns the best state seen (by full training-set
/// loss with rounded zero points), which is never worse than the input.
pub fn train_block(
    model: &ToyModel,
    state: &BlockState,
    inputs: &[Tensor],
    targets: &[Tensor],
    past: Option<(&Tensor, &Tensor)>,
    cfg: &TrainConfig,
) -> Result<(BlockState, BlockTrainReport)> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Empty("training inputs"));
    }
    let initial = block_loss(model, state, inputs, targets, past)?;
    let mut losses = vec![initial];
    let mut best = (state.clone(), initial, 0usize);
    let mut current = state.clone();
    let mut adam = Adam::new(cfg);
    let mut rng = Rng::seed(cfg.seed ^ (state.layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let lr_of = |t: Trainable| -> Option<f64> {
        cfg.trainables.contains(&t).then_some(match t {
            Trainable::Weights => cfg.lr_weights,
            _ => cfg.lr_qparams,
        })
    };

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch) {
            let denom = batch.iter().map(|&i| targets[i].len()).sum::<usize>() as f64;
            let per_sample = batch
                .par_iter()
                .map(|&i| sample_grads(model, &current, &inputs[i], &targets[i], past, denom))
                .collect::<Result<Vec<_>>>()?;
            // Fixed-order reduction.
            let mut sum: BTreeMap<Slot, Tensor> = BTreeMap::new();
            for g in per_sample {
                for (slot, t) in g {
                    let e = sum.entry(slot).or_insert_with(|| Tensor::zeros(t.shape()));
                    *e = crate::tensor::add(e, &t)?;
                }
            }
            let mut updates = Vec::new();
            let BlockState { weights, quant, .. } = &mut current;
            for (&l, w) in weights.iter_mut() {
                if let (Some(lr), Some(g)) = (lr_of(Trainable::Weights), sum.remove(&Slot::Weight(l))) {
                    updates.push((Slot::Weight(l), w, g, lr));
                }
            }
            for (&k, st) in quant.iter_mut() {
                let Some(lr) = lr_of(st.trainable(k)) else { continue };
                let (ga, gb) = (sum.remove(&Slot::QuantA(k)), sum.remove(&Slot::QuantB(k)));
                if let Some(g) = ga {
                    updates.push((Slot::QuantA(k), &mut st.a, g, lr));
                }
                if let Some(g) = gb {
                    updates.push((Slot::QuantB(k), &mut st.b, g, lr));
                }
            }
            adam.step(updates);
            current.project();
        }
        let deployed = current.rounded();
        let loss = block_loss(model, &deployed, inputs, targets, past)?;
        tracing::debug!(layer = state.layer, epoch, loss, "epoch");
        losses.push(loss);
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(Error::Diverged { epoch, loss, initial });
        }
        if loss < best.1 {
            best = (deployed, loss, epoch);
        }
    }
    Ok((
        best.0,
        BlockTrainReport {
            layer: state.layer,
            losses,
            best_epoch: best.2,
            initial_loss: initial,
            final_loss: best.1,
        },
    ))
}

fn sample_grads(
    model: &ToyModel,
    state: &BlockState,
    x: &Tensor,
    target: &Tensor,
    past: Option<(&Tensor, &Tensor)>,
    denom: f64,
) -> Result<Vec<(Slot, Tensor)>> {
    let mut tape = Tape::new();
    let vars = block_forward_quant(model, state, x, past, &mut tape)?;
    let loss = tape.squared_error(vars.out, target, denom)?;
    let mut grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for (&l, &v) in &vars.weights {
        if let Some(g) = grads.take(v) {
            out.push((Slot::Weight(l), g));
        }
    }
    for (&k, &(a, b)) in &vars.quant {
        if let Some(g) = grads.take(a) {
            out.push((Slot::QuantA(k), g));
        }
        if let Some(g) = grads.take(b) {
            out.push((Slot::QuantB(k), g));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub config: TrainConfig,
    pub blocks: Vec<BlockTrainReport>,
}

/// Trains blocks `0..n` in order. Block `i` learns from the already-trained
/// quantized blocks before it; its targets are the full-precision model's
/// block outputs on full-precision inputs.
pub fn finetune_model(
    model: &ToyModel,
    hooks: &QuantHookSet,
    prefix: Option<&KvCache>,
    sequences: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<(ToyModel, QuantHookSet, FinetuneReport)> {
    cfg.validate()?;
    hooks.check_config(&model.config)?;
    if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
        return Err(Error::Empty("training corpus"));
    }
    let inputs = model_inputs(sequences, prefix);
    let mut xs_fp = inputs.iter().map(|t| embed(model, t)).collect::<Result<Vec<_>>>()?;
    let mut xs_q = xs_fp.clone();
    let mut trained = model.clone();
    let mut out_hooks = hooks.clone();
    let mut blocks = Vec::new();
    for layer in 0..model.config.n_layers {
        let past = prefix_layer(prefix, layer);
        let past = past.as_ref().map(|(k, v)| (k, v));
        let targets = xs_fp
            .iter()
            .map(|x| Ok(block_forward(model, layer, x, past, None, None)?.out))
            .collect::<Result<Vec<_>>>()?;
        let state = BlockState::from_model(&trained, layer, &out_hooks)?;
        let (state, report) = train_block(&trained, &state, &xs_q, &targets, past, cfg)?;
        state.write_back(&mut trained, &mut out_hooks)?;
        xs_q = xs_q
            .iter()
            .map(|x| Ok(block_forward(&trained, layer, x, past, Some(&out_hooks), None)?.out))
            .collect::<Result<Vec<_>>>()?;
        xs_fp = targets;
        blocks.push(report);
    }
    Ok((
        trained,
        out_hooks,
        FinetuneReport {
            config: cfg.clone(),
            blocks,
        },
    ))
}
