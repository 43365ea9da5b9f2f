//! The molecule-aware weight generator.
//!
//! A fixed set of learnable query vectors passes through a stack of
//! pre-norm decoder blocks (self-attention among the queries, cross-attention
//! into the node embeddings, feed-forward). Each distilled query is then
//! projected by a zero-initialised head into the `ΔA` factor of a low-rank
//! update, reshaped to `d_in × r`; the `ΔB` factor is a shared learnable
//! projector. The update for a site is `(α/r) · ΔA · ΔB`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::adapter::{AdapterKey, AdapterSet, BoundAdapters, BoundUpdate, Component, LowRankUpdate, Site, TargetSet};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Linear, LinearVars, Norm, NormVars};
use crate::params::{join, ParamGroup};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How distilled queries map onto (layer, component) targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Assignment {
    /// One query per component type; its update is reused at every layer.
    #[default]
    SharedAcrossLayers,
    /// One query per (layer, component): query `i·|C| + c`.
    PerLayer,
}

impl FromStr for Assignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shared_across_layers" => Ok(Self::SharedAcrossLayers),
            "per_layer" => Ok(Self::PerLayer),
            other => Err(Error::Config(format!(
                "unknown assignment {other:?} (expected shared_across_layers or per_layer)"
            ))),
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SharedAcrossLayers => "shared_across_layers",
            Self::PerLayer => "per_layer",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub rank: usize,
    pub alpha: f64,
    pub targets: TargetSet,
    pub assignment: Assignment,
    /// Explicit query count; must agree with the assignment policy.
    pub queries: Option<usize>,
    /// Backbone layers receiving updates; `None` means all of them.
    pub layers: Option<Vec<usize>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            d_model: 32,
            d_ff: 128,
            rank: 4,
            alpha: 4.0,
            targets: TargetSet::all(),
            assignment: Assignment::SharedAcrossLayers,
            queries: None,
            layers: None,
        }
    }
}

impl GeneratorConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn adapted_layers(&self, backbone: &BackboneConfig) -> Vec<usize> {
        self.layers.clone().unwrap_or_else(|| (0..backbone.layers).collect())
    }

    /// Number of queries the assignment policy needs.
    pub fn required_queries(&self, backbone: &BackboneConfig) -> usize {
        match self.assignment {
            Assignment::SharedAcrossLayers => self.targets.len(),
            Assignment::PerLayer => self.adapted_layers(backbone).len() * self.targets.len(),
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.blocks == 0 || self.rank == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config("mawgen blocks, rank, width and heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "mawgen width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.rank > backbone.d_model {
            return Err(Error::Config(format!(
                "rank {} exceeds backbone width {}",
                self.rank, backbone.d_model
            )));
        }
        let layers = self.adapted_layers(backbone);
        if layers.is_empty() {
            return Err(Error::Config("no adapted layers".into()));
        }
        let mut sorted = layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != layers.len() || sorted.iter().any(|&l| l >= backbone.layers) {
            return Err(Error::Config(format!(
                "adapted layers {layers:?} invalid for a {}-layer backbone",
                backbone.layers
            )));
        }
        let need = self.required_queries(backbone);
        if let Some(k) = self.queries {
            if k != need {
                return Err(Error::Config(format!(
                    "{} assignment over {} targets and {} layers needs {need} queries, configured {k}",
                    self.assignment,
                    self.targets,
                    layers.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub ln_self: Norm,
    pub self_q: Linear,
    pub self_k: Linear,
    pub self_v: Linear,
    pub self_o: Linear,
    pub ln_cross: Norm,
    /// Learnable key/value slot (`1 × d` each) prepended to the memory, so
    /// the attention mass left for the nodes depends on how many there are.
    pub null_key: Tensor,
    pub null_value: Tensor,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_o: Linear,
    pub ln_ffn: Norm,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
}

impl DecoderBlock {
    fn new<R: Rng + ?Sized>(d: usize, d_mem: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            ln_self: Norm::new(d),
            self_q: Linear::new(d, d, true, rng),
            // no key bias: softmax ignores a shift shared by every key
            self_k: Linear::new(d, d, false, rng),
            self_v: Linear::new(d, d, true, rng),
            self_o: Linear::new(d, d, true, rng),
            ln_cross: Norm::new(d),
            null_key: Tensor::zeros(&[1, d]),
            null_value: Tensor::zeros(&[1, d]),
            cross_q: Linear::new(d, d, true, rng),
            cross_k: Linear::new(d_mem, d, false, rng),
            cross_v: Linear::new(d_mem, d, true, rng),
            cross_o: Linear::new(d, d, true, rng),
            ln_ffn: Norm::new(d),
            ffn_up: Linear::new(d, d_ff, true, rng),
            ffn_down: Linear::new(d_ff, d, true, rng),
        }
    }

    /// Every parameter in binding order.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln_self.visit(&join(prefix, "ln_self"), f);
        self.self_q.visit(&join(prefix, "self_q"), f);
        self.self_k.visit(&join(prefix, "self_k"), f);
        self.self_v.visit(&join(prefix, "self_v"), f);
        self.self_o.visit(&join(prefix, "self_o"), f);
        self.ln_cross.visit(&join(prefix, "ln_cross"), f);
        f(join(prefix, "null_key"), &self.null_key);
        f(join(prefix, "null_value"), &self.null_value);
        self.cross_q.visit(&join(prefix, "cross_q"), f);
        self.cross_k.visit(&join(prefix, "cross_k"), f);
        self.cross_v.visit(&join(prefix, "cross_v"), f);
        self.cross_o.visit(&join(prefix, "cross_o"), f);
        self.ln_ffn.visit(&join(prefix, "ln_ffn"), f);
        self.ffn_up.visit(&join(prefix, "ffn_up"), f);
        self.ffn_down.visit(&join(prefix, "ffn_down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln_self.visit_mut(&join(prefix, "ln_self"), f);
        self.self_q.visit_mut(&join(prefix, "self_q"), f);
        self.self_k.visit_mut(&join(prefix, "self_k"), f);
        self.self_v.visit_mut(&join(prefix, "self_v"), f);
        self.self_o.visit_mut(&join(prefix, "self_o"), f);
        self.ln_cross.visit_mut(&join(prefix, "ln_cross"), f);
        f(join(prefix, "null_key"), &mut self.null_key);
        f(join(prefix, "null_value"), &mut self.null_value);
        self.cross_q.visit_mut(&join(prefix, "cross_q"), f);
        self.cross_k.visit_mut(&join(prefix, "cross_k"), f);
        self.cross_v.visit_mut(&join(prefix, "cross_v"), f);
        self.cross_o.visit_mut(&join(prefix, "cross_o"), f);
        self.ln_ffn.visit_mut(&join(prefix, "ln_ffn"), f);
        self.ffn_up.visit_mut(&join(prefix, "ffn_up"), f);
        self.ffn_down.visit_mut(&join(prefix, "ffn_down"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlockVars {
    ln_self: NormVars,
    self_q: LinearVars,
    self_k: LinearVars,
    self_v: LinearVars,
    self_o: LinearVars,
    ln_cross: NormVars,
    null_key: Var,
    null_value: Var,
    cross_q: LinearVars,
    cross_k: LinearVars,
    cross_v: LinearVars,
    cross_o: LinearVars,
    ln_ffn: NormVars,
    ffn_up: LinearVars,
    ffn_down: LinearVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub backbone: BackboneConfig,
    pub queries: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub ln_out: Norm,
    /// Zero-initialised `d_model × (d_in · r)` projection per site.
    pub heads: BTreeMap<Site, Tensor>,
    /// Shared `r × d_llm` projector.
    pub proj: Tensor,
    /// Shared `r × d_ff` projector, present when the FFN is targeted.
    pub proj_ff: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub queries: Var,
    pub blocks: Vec<DecoderBlockVars>,
    pub ln_out: NormVars,
    pub heads: BTreeMap<Site, Var>,
    pub proj: Var,
    pub proj_ff: Option<Var>,
}

impl GeneratorParams {
    /// Fresh trainable generator for a backbone and a node-embedding width.
    pub fn new<R: Rng + ?Sized>(
        config: GeneratorConfig,
        backbone: BackboneConfig,
        d_memory: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(&backbone)?;
        let d = config.d_model;
        let r = config.rank;
        let k = config.required_queries(&backbone);
        let heads = config
            .targets
            .sites()
            .map(|s| {
                let (d_in, _) = backbone.site_dims(s);
                (s, Tensor::zeros(&[d, d_in * r]))
            })
            .collect();
        let proj_std = 1.0 / (r as f64).sqrt();
        let mut p = Self {
            queries: Tensor::randn(&[k, d], 1.0, rng),
            blocks: (0..config.blocks)
                .map(|_| DecoderBlock::new(d, d_memory, config.d_ff, rng))
                .collect(),
            ln_out: Norm::new(d),
            heads,
            proj: Tensor::randn(&[r, backbone.d_model], proj_std, rng),
            proj_ff: config
                .targets
                .contains(Component::Ffn)
                .then(|| Tensor::randn(&[r, backbone.d_ff], proj_std, rng)),
            config,
            backbone,
        };
        p.set_trainable(true);
        Ok(p)
    }

    pub fn query_count(&self) -> usize {
        self.queries.shape()[0]
    }

    /// Binds every tensor as a leaf, in traversal order.
    pub fn bind(&self, tape: &mut Tape) -> GeneratorVars {
        let queries = tape.leaf(&self.queries);
        let blocks = self
            .blocks
            .iter()
            .map(|b| DecoderBlockVars {
                ln_self: b.ln_self.bind(tape),
                self_q: b.self_q.bind(tape),
                self_k: b.self_k.bind(tape),
                self_v: b.self_v.bind(tape),
                self_o: b.self_o.bind(tape),
                ln_cross: b.ln_cross.bind(tape),
                null_key: tape.leaf(&b.null_key),
                null_value: tape.leaf(&b.null_value),
                cross_q: b.cross_q.bind(tape),
                cross_k: b.cross_k.bind(tape),
                cross_v: b.cross_v.bind(tape),
                cross_o: b.cross_o.bind(tape),
                ln_ffn: b.ln_ffn.bind(tape),
                ffn_up: b.ffn_up.bind(tape),
                ffn_down: b.ffn_down.bind(tape),
            })
            .collect();
        GeneratorVars {
            queries,
            blocks,
            ln_out: self.ln_out.bind(tape),
            heads: self.heads.iter().map(|(s, t)| (*s, tape.leaf(t))).collect(),
            proj: tape.leaf(&self.proj),
            proj_ff: self.proj_ff.as_ref().map(|t| tape.leaf(t)),
        }
    }

    /// Distilled queries (k × d_model) for a set of node embeddings.
    pub fn distill_queries(&self, nodes: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = tape.leaf(nodes);
        let q = distill_on_tape(&mut tape, &vars, self.config.heads, h)?;
        Ok(tape.tensor(q))
    }

    /// Projects one distilled query (length d_model) into a site's update.
    pub fn generate_update(&self, query: &Tensor, site: Site) -> Result<LowRankUpdate> {
        let head = self
            .heads
            .get(&site)
            .ok_or_else(|| Error::Topology(format!("no projection head for site {}", site.name())))?;
        let d = self.config.d_model;
        if query.len() != d {
            return Err(Error::shape("generate_update", query.shape(), &[d]));
        }
        let (d_in, _) = self.backbone.site_dims(site);
        let q = query.clone().reshaped(&[1, d])?;
        let a = q.matmul(head)?.reshaped(&[d_in, self.config.rank])?;
        let b = self.shared_projector(site).clone();
        LowRankUpdate::new(a, b.frozen(), self.config.scale())
    }

    fn shared_projector(&self, site: Site) -> &Tensor {
        match site {
            Site::FfnUp => self.proj_ff.as_ref().expect("FFN projector exists when FFN is targeted"),
            _ => &self.proj,
        }
    }

    /// Full adapter set for one molecule's node embeddings.
    pub fn generate_adapter_set(&self, nodes: &Tensor, provenance: &str) -> Result<AdapterSet> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = tape.leaf(nodes);
        let bound = adapters_on_tape(&mut tape, self, &vars, h)?;
        Ok(AdapterSet::from_bound(&tape, &bound, provenance))
    }
}

impl ParamGroup for GeneratorParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("mawgen.queries".into(), &self.queries);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("mawgen.blocks.{i}"), f);
        }
        self.ln_out.visit("mawgen.ln_out", f);
        for (s, t) in &self.heads {
            f(format!("mawgen.head.{}", s.name()), t);
        }
        f("mawgen.proj".into(), &self.proj);
        if let Some(t) = &self.proj_ff {
            f("mawgen.proj_ff".into(), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("mawgen.queries".into(), &mut self.queries);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("mawgen.blocks.{i}"), f);
        }
        self.ln_out.visit_mut("mawgen.ln_out", f);
        for (s, t) in &mut self.heads {
            f(format!("mawgen.head.{}", s.name()), t);
        }
        f("mawgen.proj".into(), &mut self.proj);
        if let Some(t) = &mut self.proj_ff {
            f("mawgen.proj_ff".into(), t);
        }
    }
}

/// Runs the decoder stack; returns k × d_model distilled queries.
pub fn distill_on_tape(tape: &mut Tape, vars: &GeneratorVars, heads: usize, nodes: Var) -> Result<Var> {
    if tape.shape(nodes).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("cross-attention needs at least one node embedding".into()));
    }
    let mut x = vars.queries;
    for b in &vars.blocks {
        let h = b.ln_self.apply(tape, x)?;
        let q = b.self_q.apply(tape, h)?;
        let k = b.self_k.apply(tape, h)?;
        let v = b.self_v.apply(tape, h)?;
        let a = multi_head_attention(tape, q, k, v, heads, false)?;
        let a = b.self_o.apply(tape, a)?;
        x = tape.add(x, a)?;

        let h = b.ln_cross.apply(tape, x)?;
        let q = b.cross_q.apply(tape, h)?;
        let k = b.cross_k.apply(tape, nodes)?;
        let k = tape.concat_rows(&[b.null_key, k])?;
        let v = b.cross_v.apply(tape, nodes)?;
        let v = tape.concat_rows(&[b.null_value, v])?;
        let a = multi_head_attention(tape, q, k, v, heads, false)?;
        let a = b.cross_o.apply(tape, a)?;
        x = tape.add(x, a)?;

        let h = b.ln_ffn.apply(tape, x)?;
        let h = b.ffn_up.apply(tape, h)?;
        let h = tape.gelu(h);
        let h = b.ffn_down.apply(tape, h)?;
        x = tape.add(x, h)?;
    }
    vars.ln_out.apply(tape, x)
}

/// Distils `nodes` and produces one bound update per targeted (layer, site).
pub fn adapters_on_tape(tape: &mut Tape, params: &GeneratorParams, vars: &GeneratorVars, nodes: Var) -> Result<BoundAdapters> {
    let cfg = &params.config;
    let q_out = distill_on_tape(tape, vars, cfg.heads, nodes)?;
    let layers = cfg.adapted_layers(&params.backbone);
    let n_comp = cfg.targets.len();
    let mut out = BoundAdapters::new();
    let make = |tape: &mut Tape, query_index: usize, site: Site| -> Result<BoundUpdate> {
        let q = tape.slice_rows(q_out, query_index, 1)?;
        let a = tape.matmul(q, vars.heads[&site])?;
        let (d_in, _) = params.backbone.site_dims(site);
        let a = tape.reshape(a, &[d_in, cfg.rank])?;
        let b = match site {
            Site::FfnUp => vars.proj_ff.expect("FFN projector bound when FFN is targeted"),
            _ => vars.proj,
        };
        Ok(BoundUpdate {
            delta_a: a,
            delta_b: b,
            scale: cfg.scale(),
        })
    };
    match cfg.assignment {
        Assignment::SharedAcrossLayers => {
            for (ci, c) in cfg.targets.components().iter().enumerate() {
                for &site in c.sites() {
                    let u = make(tape, ci, site)?;
                    for &layer in &layers {
                        out.insert(AdapterKey { layer, site }, u);
                    }
                }
            }
        }
        Assignment::PerLayer => {
            for (li, &layer) in layers.iter().enumerate() {
                for (ci, c) in cfg.targets.components().iter().enumerate() {
                    for &site in c.sites() {
                        let u = make(tape, li * n_comp + ci, site)?;
                        out.insert(AdapterKey { layer, site }, u);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: GeneratorConfig) -> GeneratorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        GeneratorParams::new(cfg, BackboneConfig::default(), 32, &mut rng).unwrap()
    }

    #[test]
    fn default_set_has_one_entry_per_layer_and_site() {
        let g = setup(GeneratorConfig::default());
        assert_eq!(g.query_count(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(&[3, 32], 1.0, &mut rng);
        let set = g.generate_adapter_set(&h, "x").unwrap();
        // 4 layers × (q, k, v, o, f_up, f_down)
        assert_eq!(set.len(), 24);
        let components: std::collections::BTreeSet<_> =
            set.entries().keys().map(|k| (k.layer, k.site.component())).collect();
        assert_eq!(components.len(), 20);
        assert!(set.entries().values().all(|u| u.materialize().frobenius_norm() == 0.0));
    }

    #[test]
    fn per_layer_needs_more_queries() {
        let g = setup(GeneratorConfig {
            assignment: Assignment::PerLayer,
            ..GeneratorConfig::default()
        });
        assert_eq!(g.query_count(), 20);
        let bad = GeneratorConfig {
            queries: Some(4),
            ..GeneratorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = GeneratorParams::new(bad, BackboneConfig::default(), 32, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn update_shapes() {
        let g = setup(GeneratorConfig::default());
        let q = Tensor::filled(&[32], 0.3);
        let u = g.generate_update(&q, Site::Query).unwrap();
        assert_eq!(u.delta_a.shape(), &[64, 4]);
        assert_eq!(u.materialize().shape(), &[64, 64]);
        let u = g.generate_update(&q, Site::FfnDown).unwrap();
        assert_eq!(u.delta_a.shape(), &[256, 4]);
        assert_eq!(u.materialize().shape(), &[256, 64]);
        let u = g.generate_update(&q, Site::FfnUp).unwrap();
        assert_eq!(u.materialize().shape(), &[64, 256]);
    }

    #[test]
    fn rank_cannot_exceed_width() {
        let cfg = GeneratorConfig {
            rank: 65,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate(&BackboneConfig::default()).is_err());
    }
}
