//! Small building blocks shared by the encoder, backbone and generator.

use rand::Rng;

use crate::error::Result;
use crate::params::join;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(d_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            weight: tape.leaf(&self.weight),
            bias: self.bias.as_ref().map(|b| tape.leaf(b)),
        }
    }
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

impl Norm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }

    pub fn bind(&self, tape: &mut Tape) -> NormVars {
        NormVars {
            gain: tape.leaf(&self.gain),
            bias: tape.leaf(&self.bias),
        }
    }
}

impl NormVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

/// Scaled dot-product attention over already-projected `q` (Tq×d),
/// `k` and `v` (Tk×d), split into `heads` column blocks.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale);
        if causal {
            scores = tape.causal_mask(scores)?;
        }
        let att = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(att, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}
