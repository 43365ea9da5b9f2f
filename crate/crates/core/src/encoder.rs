//! GIN-style message passing over molecular graphs.
//!
//! Each layer sums neighbour states and updates every node with
//! `MLP((1 + eps) * h_v + sum_{u in N(v)} h_u)`, where the MLP is
//! linear-ReLU-linear. The encoder starts from a linear projection of the
//! per-atom features. Its parameters stay frozen unless explicitly unfrozen.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mol::{atom_features, MolecularGraph, ATOM_FEATURE_DIM};
use crate::nn::{Linear, LinearVars};
use crate::params::{join, ParamGroup};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 3, d_model: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GinLayer {
    pub eps: Tensor,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub input: Linear,
    pub layers: Vec<GinLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct GinLayerVars {
    pub eps: Var,
    pub hidden: LinearVars,
    pub out: LinearVars,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub input: LinearVars,
    pub layers: Vec<GinLayerVars>,
}

impl GinLayer {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            eps: Tensor::zeros(&[1]),
            hidden: Linear::new(d, d, true, rng),
            out: Linear::new(d, d, true, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GinLayerVars {
        GinLayerVars {
            eps: tape.leaf(&self.eps),
            hidden: self.hidden.bind(tape),
            out: self.out.bind(tape),
        }
    }
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Self {
        let input = Linear::new(ATOM_FEATURE_DIM, config.d_model, true, rng);
        let layers = (0..config.layers).map(|_| GinLayer::new(config.d_model, rng)).collect();
        Self { config, input, layers }
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            input: self.input.bind(tape),
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }
}

impl ParamGroup for EncoderParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.input.visit("encoder.input", f);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layers.{i}");
            f(join(&p, "eps"), &l.eps);
            l.hidden.visit(&join(&p, "hidden"), f);
            l.out.visit(&join(&p, "out"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.input.visit_mut("encoder.input", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("encoder.layers.{i}");
            f(join(&p, "eps"), &mut l.eps);
            l.hidden.visit_mut(&join(&p, "hidden"), f);
            l.out.visit_mut(&join(&p, "out"), f);
        }
    }
}

/// One message-passing layer on the tape over the graph's neighbour lists.
pub fn message_step(tape: &mut Tape, h: Var, neighbors: &[Vec<usize>], layer: &GinLayerVars) -> Result<Var> {
    let n = neighbors.len();
    if tape.shape(h)[0] != n {
        return Err(Error::Contract(format!(
            "node state has {} rows for a graph of {n} atoms",
            tape.shape(h)[0]
        )));
    }
    // empty neighbourhoods contribute a zero row
    let msg = tape.neighbor_sum(h, neighbors)?;
    let scaled = tape.scale_by(h, layer.eps)?;
    let own = tape.add(h, scaled)?;
    let z = tape.add(own, msg)?;
    let z = layer.hidden.apply(tape, z)?;
    let z = tape.relu(z);
    layer.out.apply(tape, z)
}

/// Encodes a graph on an existing tape, returning |V|×d_model node states.
pub fn encode_on_tape(tape: &mut Tape, vars: &EncoderVars, g: &MolecularGraph) -> Result<Var> {
    if g.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let feats = atom_features(g)?;
    let x = tape.leaf(&feats);
    let neighbors = g.neighbors();
    let mut h = vars.input.apply(tape, x)?;
    for layer in &vars.layers {
        h = message_step(tape, h, &neighbors, layer)?;
    }
    Ok(h)
}

/// Node embeddings of `g`: input projection followed by every GIN layer.
pub fn encode_graph(g: &MolecularGraph, params: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = encode_on_tape(&mut tape, &vars, g)?;
    Ok(tape.tensor(h))
}
