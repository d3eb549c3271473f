//! Toy Llama-style decoder: configuration, weights, forward pass with
//! quantization hooks, KV cache and the binary model container.

mod forward;
pub mod hooks;
mod io;
pub mod tokenizer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rotation::HadamardSpec;
use crate::tensor::{Rng, Tensor};

pub use forward::{
    attention, attention_probs, block_forward, embed, forward, perplexity, BlockOutput, CaptureSite,
    Captures, ForwardOptions, ForwardOutput, KvCache,
};
pub use hooks::{QuantHookSet, SiteId, SiteKind, SiteQuantizer};
pub use io::{load_model, load_quantized, model_to_bytes, save_model, save_quantized, MODEL_MAGIC};
pub use tokenizer::{detokenize, tokenize, BOS, VOCAB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: 256,
            n_heads: 4,
            head_dim: 64,
            intermediate: 512,
            vocab: VOCAB,
            max_seq: 512,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast tests: 2 layers, hidden 64.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            hidden: 64,
            n_heads: 2,
            head_dim: 32,
            intermediate: 128,
            max_seq: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return fail("n_layers, n_heads and max_seq must be positive".into());
        }
        if self.hidden != self.n_heads * self.head_dim {
            return fail(format!(
                "hidden {} != n_heads {} × head_dim {}",
                self.hidden, self.n_heads, self.head_dim
            ));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
            ("intermediate", self.intermediate),
        ] {
            if !v.is_power_of_two() || v < 2 {
                return fail(format!("{name} = {v} is not a power of two"));
            }
        }
        if self.vocab != VOCAB {
            return fail(format!("vocab must be {VOCAB} (bytes + BOS), got {}", self.vocab));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return fail("rope_theta and norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// The seven linear layers of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linear {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl Linear {
    pub const ALL: [Linear; 7] = [
        Linear::QProj,
        Linear::KProj,
        Linear::VProj,
        Linear::OProj,
        Linear::GateProj,
        Linear::UpProj,
        Linear::DownProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Linear::QProj => "q_proj",
            Linear::KProj => "k_proj",
            Linear::VProj => "v_proj",
            Linear::OProj => "o_proj",
            Linear::GateProj => "gate_proj",
            Linear::UpProj => "up_proj",
            Linear::DownProj => "down_proj",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }

    /// `(in, out)` extents.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Linear::QProj | Linear::KProj | Linear::VProj | Linear::OProj => {
                (cfg.hidden, cfg.hidden)
            }
            Linear::GateProj | Linear::UpProj => (cfg.hidden, cfg.intermediate),
            Linear::DownProj => (cfg.intermediate, cfg.hidden),
        }
    }

    /// Projections that write into the residual stream.
    pub fn is_residual_writer(self) -> bool {
        matches!(self, Linear::OProj | Linear::DownProj)
    }
}

/// Weights of one transformer block. Linear weights are stored `[in × out]`
/// so a layer computes `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub mlp_norm: Tensor,
    pub gate_proj: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
}

impl LayerWeights {
    pub fn linear(&self, l: Linear) -> &Tensor {
        match l {
            Linear::QProj => &self.q_proj,
            Linear::KProj => &self.k_proj,
            Linear::VProj => &self.v_proj,
            Linear::OProj => &self.o_proj,
            Linear::GateProj => &self.gate_proj,
            Linear::UpProj => &self.up_proj,
            Linear::DownProj => &self.down_proj,
        }
    }

    pub fn linear_mut(&mut self, l: Linear) -> &mut Tensor {
        match l {
            Linear::QProj => &mut self.q_proj,
            Linear::KProj => &mut self.k_proj,
            Linear::VProj => &mut self.v_proj,
            Linear::OProj => &mut self.o_proj,
            Linear::GateProj => &mut self.gate_proj,
            Linear::UpProj => &mut self.up_proj,
            Linear::DownProj => &mut self.down_proj,
        }
    }
}

/// Which rotations have been applied, and the seed they came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationInfo {
    pub seed: Option<u64>,
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
    pub r4: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
    pub rotation: RotationInfo,
    /// Online rotation of q and k after RoPE.
    pub online_r3: Option<HadamardSpec>,
    /// Online rotation of the down_proj input (its inverse is fused into
    /// down_proj).
    pub online_r4: Option<HadamardSpec>,
}

impl ToyModel {
    /// Random weights: N(0, 0.02²), with residual-path projections (o, down)
    /// scaled by `1/sqrt(2·n_layers)`. Norm gains start at one.
    pub fn init_random(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let std = 0.02f32;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let embedding = Tensor::randn(&[config.vocab, config.hidden], std, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut lin = |l: Linear| {
                let (i, o) = l.dims(&config);
                let s = if l.is_residual_writer() { resid_std } else { std };
                Tensor::randn(&[i, o], s, rng)
            };
            let q_proj = lin(Linear::QProj);
            let k_proj = lin(Linear::KProj);
            let v_proj = lin(Linear::VProj);
            let o_proj = lin(Linear::OProj);
            let gate_proj = lin(Linear::GateProj);
            let up_proj = lin(Linear::UpProj);
            let down_proj = lin(Linear::DownProj);
            layers.push(LayerWeights {
                attn_norm: Tensor::full(&[config.hidden], 1.0),
                q_proj,
                k_proj,
                v_proj,
                o_proj,
                mlp_norm: Tensor::full(&[config.hidden], 1.0),
                gate_proj,
                up_proj,
                down_proj,
            });
        }
        let lm_head = Tensor::randn(&[config.hidden, config.vocab], std, rng);
        Ok(Self {
            final_norm: Tensor::full(&[config.hidden], 1.0),
            embedding,
            layers,
            lm_head,
            rotation: RotationInfo::default(),
            online_r3: None,
            online_r4: None,
            config,
        })
    }

    /// Checks every weight shape against the config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let check = |name: String, t: &Tensor, want: &[usize]| {
            if t.shape() != want {
                Err(Error::Inconsistent {
                    name,
                    reason: format!("shape {:?}, expected {:?}", t.shape(), want),
                })
            } else {
                Ok(())
            }
        };
        check("embedding".into(), &self.embedding, &[cfg.vocab, cfg.hidden])?;
        check("lm_head".into(), &self.lm_head, &[cfg.hidden, cfg.vocab])?;
        check("final_norm".into(), &self.final_norm, &[cfg.hidden])?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (i, w) in self.layers.iter().enumerate() {
            check(format!("layers.{i}.attn_norm"), &w.attn_norm, &[cfg.hidden])?;
            check(format!("layers.{i}.mlp_norm"), &w.mlp_norm, &[cfg.hidden])?;
            for l in Linear::ALL {
                let (a, b) = l.dims(cfg);
                check(format!("layers.{i}.{}", l.name()), w.linear(l), &[a, b])?;
            }
        }
        if let Some(r) = &self.online_r3 {
            if r.dim != cfg.head_dim {
                return Err(Error::Config("online R3 dim != head_dim".into()));
            }
        }
        if let Some(r) = &self.online_r4 {
            if r.dim != cfg.intermediate {
                return Err(Error::Config("online R4 dim != intermediate".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical container encoding (weights, config and
    /// rotation state; quantization parameters excluded).
    pub fn fingerprint(&self) -> String {
        let bytes = model_to_bytes(self, None).expect("in-memory model serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Free-function form of [`ToyModel::init_random`].
pub fn init_random_model(config: ModelConfig, rng: &mut Rng) -> Result<ToyModel> {
    ToyModel::init_random(config, rng)
}
