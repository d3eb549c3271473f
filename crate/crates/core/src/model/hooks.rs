//! Per-site quantization hooks.
//!
//! Site names: `layers.{l}.weight.{linear}`, `layers.{l}.input.{linear}`,
//! `layers.{l}.q`, `layers.{l}.k`, `layers.{l}.v`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Linear, ModelConfig};
use crate::error::{Error, Result};
use crate::quant::{dynamic_quantize_site, fake_quant, fit_params, Mode, QuantParams, QuantSpec, SiteRole};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    Weight(Linear),
    Input(Linear),
    Q,
    K,
    V,
}

impl SiteKind {
    pub fn role(self) -> SiteRole {
        match self {
            SiteKind::Weight(_) => SiteRole::Weight,
            SiteKind::Input(_) => SiteRole::Activation,
            SiteKind::Q | SiteKind::K | SiteKind::V => SiteRole::Kv,
        }
    }

    /// Forward-pass order within a block.
    pub fn block_order() -> Vec<SiteKind> {
        let mut v = Vec::new();
        for l in [Linear::QProj, Linear::KProj, Linear::VProj] {
            v.push(SiteKind::Weight(l));
            v.push(SiteKind::Input(l));
        }
        v.extend([SiteKind::Q, SiteKind::K, SiteKind::V]);
        for l in [Linear::OProj, Linear::GateProj, Linear::UpProj, Linear::DownProj] {
            v.push(SiteKind::Weight(l));
            v.push(SiteKind::Input(l));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.", self.layer)?;
        match self.kind {
            SiteKind::Weight(l) => write!(f, "weight.{}", l.name()),
            SiteKind::Input(l) => write!(f, "input.{}", l.name()),
            SiteKind::Q => f.write_str("q"),
            SiteKind::K => f.write_str("k"),
            SiteKind::V => f.write_str("v"),
        }
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownSite(s.to_string());
        let rest = s.strip_prefix("layers.").ok_or_else(unknown)?;
        let (layer, rest) = rest.split_once('.').ok_or_else(unknown)?;
        let layer: usize = layer.parse().map_err(|_| unknown())?;
        let kind = match rest {
            "q" => SiteKind::Q,
            "k" => SiteKind::K,
            "v" => SiteKind::V,
            _ => {
                let (kind, lin) = rest.split_once('.').ok_or_else(unknown)?;
                let lin = Linear::from_name(lin).ok_or_else(unknown)?;
                match kind {
                    "weight" => SiteKind::Weight(lin),
                    "input" => SiteKind::Input(lin),
                    _ => return Err(unknown()),
                }
            }
        };
        Ok(SiteId { layer, kind })
    }
}

impl Serialize for SiteId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Quantizer state for one site.
///
/// Dynamic sites refit `(s, z)` on every call using the shared clipping
/// factors; static sites use the stored `params`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteQuantizer {
    pub spec: QuantSpec,
    pub gamma: f32,
    pub beta: f32,
    pub params: Option<QuantParams>,
}

impl SiteQuantizer {
    /// Max–min (`γ = β = 1`) quantizer with no stored parameters.
    pub fn new(spec: QuantSpec) -> Self {
        Self {
            spec,
            gamma: 1.0,
            beta: 1.0,
            params: None,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match (self.spec.mode, &self.params) {
            (Mode::Static, Some(p)) => fake_quant(x, p, &self.spec),
            (Mode::Static, None) => {
                Err(Error::Spec("static site has no calibrated parameters".into()))
            }
            (Mode::Dynamic, _) => dynamic_quantize_site(x, &self.spec, self.gamma, self.beta),
        }
    }

    /// Static quantizer fitted on `x` with the given clipping.
    pub fn fitted(spec: QuantSpec, x: &Tensor, gamma: f32, beta: f32) -> Result<Self> {
        let params = fit_params(x, &spec, gamma, beta)?;
        Ok(Self {
            spec,
            gamma,
            beta,
            params: Some(params),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantHookSet {
    sites: BTreeMap<SiteId, SiteQuantizer>,
}

impl QuantHookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: SiteId, q: SiteQuantizer) -> Result<()> {
        q.spec.validate()?;
        q.spec.check_role(site.kind.role())?;
        self.sites.insert(site, q);
        Ok(())
    }

    /// Inserts by site name, rejecting unknown names.
    pub fn insert_named(&mut self, name: &str, q: SiteQuantizer) -> Result<()> {
        self.insert(name.parse()?, q)
    }

    pub fn get(&self, site: &SiteId) -> Option<&SiteQuantizer> {
        self.sites.get(site)
    }

    pub fn get_mut(&mut self, site: &SiteId) -> Option<&mut SiteQuantizer> {
        self.sites.get_mut(site)
    }

    pub fn remove(&mut self, site: &SiteId) -> Option<SiteQuantizer> {
        self.sites.remove(site)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteId, &SiteQuantizer)> {
        self.sites.iter()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Sites of one layer only.
    pub fn layer(&self, layer: usize) -> QuantHookSet {
        QuantHookSet {
            sites: self
                .sites
                .iter()
                .filter(|(s, _)| s.layer == layer)
                .map(|(s, q)| (*s, q.clone()))
                .collect(),
        }
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        match self.sites.keys().find(|s| s.layer >= cfg.n_layers) {
            Some(s) => Err(Error::UnknownSite(s.to_string())),
            None => Ok(()),
        }
    }

    /// Applies the hook at `site` if one is registered.
    pub fn apply(&self, site: SiteId, x: &Tensor) -> Result<Option<Tensor>> {
        self.sites.get(&site).map(|q| q.apply(x)).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Granularity;

    #[test]
    fn site_names_round_trip() {
        for kind in SiteKind::block_order() {
            let s = SiteId::new(3, kind);
            assert_eq!(s.to_string().parse::<SiteId>().unwrap(), s);
        }
        assert_eq!(
            "layers.1.input.down_proj".parse::<SiteId>().unwrap(),
            SiteId::new(1, SiteKind::Input(Linear::DownProj))
        );
    }

    #[test]
    fn unknown_names_rejected() {
        for bad in ["layers.x.q", "layers.0.bias.q_proj", "layers.0.input.foo", "q", "layers.0.qq"] {
            assert!(matches!(bad.parse::<SiteId>(), Err(Error::UnknownSite(_))), "{bad}");
        }
        let mut h = QuantHookSet::new();
        let q = SiteQuantizer::new(QuantSpec::new(8, Granularity::PerTensor, Mode::Dynamic).unwrap());
        assert!(h.insert_named("layers.0.input.nope", q).is_err());
    }

    #[test]
    fn role_mismatch_rejected() {
        let mut h = QuantHookSet::new();
        let q = SiteQuantizer::new(QuantSpec::new(8, Granularity::PerToken, Mode::Dynamic).unwrap());
        assert!(h.insert(SiteId::new(0, SiteKind::Weight(Linear::QProj)), q.clone()).is_err());
        assert!(h.insert(SiteId::new(0, SiteKind::Input(Linear::QProj)), q).is_ok());
    }
}
