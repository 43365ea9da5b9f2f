//! Input-independent baseline: one trainable low-rank update per targeted
//! (layer, site), shared by every example, with the same targets, rank and
//! scale as the generator it stands in for.

use std::collections::BTreeMap;

use rand::Rng;

use crate::adapter::{AdapterKey, AdapterSet, BoundAdapters, BoundUpdate, Component, LowRankUpdate, Site};
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::mawgen::GeneratorConfig;
use crate::params::ParamGroup;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StaticAdapter {
    pub config: GeneratorConfig,
    /// Zero-initialised `d_in × r` factor per (layer, site).
    pub delta_a: BTreeMap<AdapterKey, Tensor>,
    pub proj: Tensor,
    pub proj_ff: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct StaticVars {
    delta_a: BTreeMap<AdapterKey, Var>,
    proj: Var,
    proj_ff: Option<Var>,
}

impl StaticAdapter {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, backbone: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate(backbone)?;
        let r = config.rank;
        let mut delta_a = BTreeMap::new();
        for layer in config.adapted_layers(backbone) {
            for site in config.targets.sites() {
                let (d_in, _) = backbone.site_dims(site);
                delta_a.insert(AdapterKey { layer, site }, Tensor::zeros(&[d_in, r]));
            }
        }
        let std = 1.0 / (r as f64).sqrt();
        let mut s = Self {
            delta_a,
            proj: Tensor::randn(&[r, backbone.d_model], std, rng),
            proj_ff: config
                .targets
                .contains(Component::Ffn)
                .then(|| Tensor::randn(&[r, backbone.d_ff], std, rng)),
            config,
        };
        s.set_trainable(true);
        Ok(s)
    }

    pub fn bind(&self, tape: &mut Tape) -> StaticVars {
        StaticVars {
            delta_a: self.delta_a.iter().map(|(k, t)| (*k, tape.leaf(t))).collect(),
            proj: tape.leaf(&self.proj),
            proj_ff: self.proj_ff.as_ref().map(|t| tape.leaf(t)),
        }
    }

    pub fn adapters_on_tape(&self, vars: &StaticVars) -> BoundAdapters {
        vars.delta_a
            .iter()
            .map(|(k, &a)| {
                let b = match k.site {
                    Site::FfnUp => vars.proj_ff.expect("FFN projector bound when FFN is targeted"),
                    _ => vars.proj,
                };
                (
                    *k,
                    BoundUpdate {
                        delta_a: a,
                        delta_b: b,
                        scale: self.config.scale(),
                    },
                )
            })
            .collect()
    }

    /// The single adapter set applied to every input.
    pub fn adapter_set(&self) -> AdapterSet {
        let entries = self
            .delta_a
            .iter()
            .map(|(k, a)| {
                let b = match k.site {
                    Site::FfnUp => self.proj_ff.clone().expect("FFN projector exists"),
                    _ => self.proj.clone(),
                };
                let u = LowRankUpdate::new(a.clone(), b, self.config.scale()).expect("shapes fixed at construction");
                (*k, u)
            })
            .collect();
        AdapterSet::new(entries, "static")
    }
}

impl ParamGroup for StaticAdapter {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (k, t) in &self.delta_a {
            f(format!("static.delta_a.{}.{}", k.layer, k.site.name()), t);
        }
        f("static.proj".into(), &self.proj);
        if let Some(t) = &self.proj_ff {
            f("static.proj_ff".into(), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (k, t) in &mut self.delta_a {
            f(format!("static.delta_a.{}.{}", k.layer, k.site.name()), t);
        }
        f("static.proj".into(), &mut self.proj);
        if let Some(t) = &mut self.proj_ff {
            f("static.proj_ff".into(), t);
        }
    }
}
