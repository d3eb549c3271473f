//! Model container (`PQTM`). Tensor names: `embedding`, `lm_head`,
//! `final_norm`, `layers.{l}.{weight}`, `rotation.r3_signs`,
//! `rotation.r4_signs`, and for quantized models
//! `qparams/<site>/scale|zero`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use super::hooks::{QuantHookSet, SiteId, SiteQuantizer};
use super::{LayerWeights, Linear, ModelConfig, RotationInfo, ToyModel};
use crate::container;
use crate::error::{Error, Result};
use crate::quant::{QuantParams, QuantSpec};
use crate::rotation::{HadamardSpec, RotationSite};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"PQTM";

#[derive(Serialize, Deserialize)]
struct HookEntry {
    spec: QuantSpec,
    gamma: f32,
    beta: f32,
    has_params: bool,
}

/// Canonical encoding of a model and, optionally, its quantizers.
pub fn model_to_bytes(model: &ToyModel, hooks: Option<&QuantHookSet>) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    tensors.insert("embedding".to_string(), model.embedding.clone());
    tensors.insert("lm_head".to_string(), model.lm_head.clone());
    tensors.insert("final_norm".to_string(), model.final_norm.clone());
    for (l, w) in model.layers.iter().enumerate() {
        tensors.insert(format!("layers.{l}.attn_norm"), w.attn_norm.clone());
        tensors.insert(format!("layers.{l}.mlp_norm"), w.mlp_norm.clone());
        for lin in Linear::ALL {
            tensors.insert(format!("layers.{l}.{}", lin.name()), w.linear(lin).clone());
        }
    }
    for (name, spec) in [("r3", &model.online_r3), ("r4", &model.online_r4)] {
        if let Some(h) = spec {
            tensors.insert(
                format!("rotation.{name}_signs"),
                Tensor::from_parts(vec![h.dim], h.signs.clone()),
            );
        }
    }
    let mut meta = Map::new();
    meta.insert("config".into(), serde_json::to_value(&model.config)?);
    meta.insert("rotation".into(), serde_json::to_value(&model.rotation)?);
    if let Some(hooks) = hooks {
        let mut entries = BTreeMap::new();
        for (site, q) in hooks.iter() {
            let name = site.to_string();
            if let Some(p) = &q.params {
                tensors.insert(format!("qparams/{name}/scale"), p.scale.clone());
                tensors.insert(format!("qparams/{name}/zero"), p.zero.clone());
            }
            entries.insert(
                name,
                HookEntry {
                    spec: q.spec,
                    gamma: q.gamma,
                    beta: q.beta,
                    has_params: q.params.is_some(),
                },
            );
        }
        meta.insert("hooks".into(), serde_json::to_value(entries)?);
    }
    container::to_bytes(MODEL_MAGIC, meta, &tensors)
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    tensors.remove(name).ok_or_else(|| Error::Inconsistent {
        name: name.to_string(),
        reason: "missing tensor".into(),
    })
}

fn model_from_bytes(bytes: &[u8]) -> Result<(ToyModel, Option<QuantHookSet>)> {
    let (mut meta, mut tensors) = container::from_bytes(MODEL_MAGIC, bytes)?;
    let config: ModelConfig = serde_json::from_value(meta.remove("config").ok_or_else(|| {
        Error::Inconsistent {
            name: "config".into(),
            reason: "missing from header".into(),
        }
    })?)?;
    config.validate()?;
    let rotation: RotationInfo = match meta.remove("rotation") {
        Some(v) => serde_json::from_value(v)?,
        None => RotationInfo::default(),
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut get = |n: &str| take(&mut tensors, &format!("layers.{l}.{n}"));
        layers.push(LayerWeights {
            attn_norm: get("attn_norm")?,
            q_proj: get("q_proj")?,
            k_proj: get("k_proj")?,
            v_proj: get("v_proj")?,
            o_proj: get("o_proj")?,
            mlp_norm: get("mlp_norm")?,
            gate_proj: get("gate_proj")?,
            up_proj: get("up_proj")?,
            down_proj: get("down_proj")?,
        });
    }
    let online = |tensors: &mut BTreeMap<String, Tensor>, name: &str, site| {
        tensors
            .remove(&format!("rotation.{name}_signs"))
            .map(|t| HadamardSpec::from_signs(t.into_data(), site))
            .transpose()
    };
    let online_r3 = online(&mut tensors, "r3", RotationSite::R3)?;
    let online_r4 = online(&mut tensors, "r4", RotationSite::R4)?;
    let model = ToyModel {
        embedding: take(&mut tensors, "embedding")?,
        lm_head: take(&mut tensors, "lm_head")?,
        final_norm: take(&mut tensors, "final_norm")?,
        layers,
        rotation,
        online_r3,
        online_r4,
        config,
    };
    model.validate()?;

    let hooks = match meta.remove("hooks") {
        None => None,
        Some(v) => {
            let entries: BTreeMap<SiteId, HookEntry> = serde_json::from_value(v)?;
            let mut set = QuantHookSet::new();
            for (site, e) in entries {
                let params = if e.has_params {
                    let name = site.to_string();
                    Some(QuantParams {
                        scale: take(&mut tensors, &format!("qparams/{name}/scale"))?,
                        zero: take(&mut tensors, &format!("qparams/{name}/zero"))?,
                        gamma: e.gamma,
                        beta: e.beta,
                    })
                } else {
                    None
                };
                set.insert(
                    site,
                    SiteQuantizer {
                        spec: e.spec,
                        gamma: e.gamma,
                        beta: e.beta,
                        params,
                    },
                )?;
            }
            set.check_config(&model.config)?;
            Some(set)
        }
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Inconsistent {
            name: name.clone(),
            reason: "unexpected tensor".into(),
        });
    }
    Ok((model, hooks))
}

pub fn save_model(model: &ToyModel, path: &Path) -> Result<()> {
    container::write_file(path, &model_to_bytes(model, None)?)
}

/// Loads a model; quantizer entries, if present, are ignored.
pub fn load_model(path: &Path) -> Result<ToyModel> {
    Ok(model_from_bytes(&container::read_file(path)?)?.0)
}

pub fn save_quantized(model: &ToyModel, hooks: &QuantHookSet, path: &Path) -> Result<()> {
    container::write_file(path, &model_to_bytes(model, Some(hooks))?)
}

/// Loads a model with its quantizers (an empty set if none were stored).
pub fn load_quantized(path: &Path) -> Result<(ToyModel, QuantHookSet)> {
    let (m, h) = model_from_bytes(&container::read_file(path)?)?;
    Ok((m, h.unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SiteKind;
    use crate::quant::{Granularity, Mode};
    use crate::tensor::Rng;

    #[test]
    fn round_trip_plain_and_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::init_random(ModelConfig::tiny(), &mut Rng::seed(5)).unwrap();
        let p = dir.path().join("sub/m.pqtm");
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);

        let mut hooks = QuantHookSet::new();
        let spec = QuantSpec::new(4, Granularity::PerChannel, Mode::Static).unwrap();
        let site = SiteId::new(1, SiteKind::Weight(Linear::UpProj));
        hooks
            .insert(site, SiteQuantizer::fitted(spec, &m.layers[1].up_proj, 0.9, 0.8).unwrap())
            .unwrap();
        let dynamic = QuantSpec::new(8, Granularity::PerToken, Mode::Dynamic).unwrap();
        hooks
            .insert(SiteId::new(0, SiteKind::Input(Linear::QProj)), SiteQuantizer::new(dynamic))
            .unwrap();
        save_quantized(&m, &hooks, &p).unwrap();
        let (m2, h2) = load_quantized(&p).unwrap();
        assert_eq!(m2, m);
        assert_eq!(h2, hooks);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_model(Path::new("/nonexistent/model.bin")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.bin"));
    }
}
