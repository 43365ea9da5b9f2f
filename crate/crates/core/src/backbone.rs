//! A small pre-norm decoder-only transformer and its character vocabulary.
//!
//! Blocks use learned absolute positions, causal multi-head attention and a
//! GELU feed-forward layer. Projections have no bias, so every targeted map
//! is a plain `x · W` that the injection layer can overlay.

use rand::Rng;

use crate::adapter::{AdapterKey, AdapterSet, BoundAdapters, Site};
use crate::error::{Error, Result};
use crate::inject::EffectiveLinear;
use crate::nn::{multi_head_attention, Norm, NormVars};
use crate::params::{join, ParamGroup};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
const SPECIALS: usize = 4;

/// Character-level vocabulary: four special tokens followed by one id per
/// character.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Default for Vocabulary {
    /// Printable ASCII, space through tilde.
    fn default() -> Self {
        Self {
            chars: (b' '..=b'~').map(char::from).collect(),
        }
    }
}

impl Vocabulary {
    pub fn from_chars(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != chars.len() {
            return Err(Error::Config("vocabulary characters must be distinct".into()));
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn size(&self) -> usize {
        SPECIALS + self.chars.len()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        if c.is_ascii() && !self.chars.is_empty() && self.chars[0] == ' ' && (' '..='~').contains(&c) {
            // fast path for the default layout
            let guess = c as usize - ' ' as usize;
            if self.chars.get(guess) == Some(&c) {
                return Some(SPECIALS + guess);
            }
        }
        self.chars.iter().position(|&x| x == c).map(|p| SPECIALS + p)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or(Error::Tokenize(c)))
            .collect()
    }

    /// Inverse of [`Vocabulary::tokenize`]; special tokens are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIALS)
            .filter_map(|&id| self.chars.get(id - SPECIALS))
            .collect()
    }

    /// `BOS instruction SEP`, the prefix the model answers after.
    pub fn prompt(&self, instruction: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(instruction)?);
        ids.push(SEP);
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            max_len: 256,
            vocab_size: Vocabulary::default().size(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "backbone width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Input and output width of a site's weight matrix.
    pub fn site_dims(&self, site: Site) -> (usize, usize) {
        match site {
            Site::FfnUp => (self.d_model, self.d_ff),
            Site::FfnDown => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln_attn: Norm,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_ffn: Norm,
    pub up: Tensor,
    pub down: Tensor,
}

impl Block {
    pub fn site_weight(&self, site: Site) -> &Tensor {
        match site {
            Site::Query => &self.wq,
            Site::Key => &self.wk,
            Site::Value => &self.wv,
            Site::Output => &self.wo,
            Site::FfnUp => &self.up,
            Site::FfnDown => &self.down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<Block>,
    pub ln_final: Norm,
    pub head: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln_attn: NormVars,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_ffn: NormVars,
    pub up: Var,
    pub down: Var,
}

impl BlockVars {
    fn site(&self, site: Site) -> Var {
        match site {
            Site::Query => self.wq,
            Site::Key => self.wk,
            Site::Value => self.wv,
            Site::Output => self.wo,
            Site::FfnUp => self.up,
            Site::FfnDown => self.down,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BlockVars>,
    pub ln_final: NormVars,
    pub head: Var,
    pub max_len: usize,
    pub heads: usize,
}

fn gauss<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl BackboneParams {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let s = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| Block {
                ln_attn: Norm::new(d),
                wq: gauss(&[d, d], s, rng),
                wk: gauss(&[d, d], s, rng),
                wv: gauss(&[d, d], s, rng),
                wo: gauss(&[d, d], s, rng),
                ln_ffn: Norm::new(d),
                up: gauss(&[d, config.d_ff], s, rng),
                down: gauss(&[config.d_ff, d], 1.0 / (config.d_ff as f64).sqrt(), rng),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb: gauss(&[config.vocab_size, d], 1.0, rng),
            pos_emb: gauss(&[config.max_len, d], 0.5, rng),
            layers,
            ln_final: Norm::new(d),
            head: gauss(&[d, config.vocab_size], 2.0 * s, rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            tok_emb: tape.leaf(&self.tok_emb),
            pos_emb: tape.leaf(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|b| BlockVars {
                    ln_attn: b.ln_attn.bind(tape),
                    wq: tape.leaf(&b.wq),
                    wk: tape.leaf(&b.wk),
                    wv: tape.leaf(&b.wv),
                    wo: tape.leaf(&b.wo),
                    ln_ffn: b.ln_ffn.bind(tape),
                    up: tape.leaf(&b.up),
                    down: tape.leaf(&b.down),
                })
                .collect(),
            ln_final: self.ln_final.bind(tape),
            head: tape.leaf(&self.head),
            max_len: self.config.max_len,
            heads: self.config.heads,
        }
    }

    /// Logits (T×V) for a token sequence, optionally with adapters overlaid.
    pub fn forward(&self, tokens: &[usize], adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let bound = adapters.map(|a| a.bind(&mut tape));
        let logits = forward_on_tape(&mut tape, &vars, tokens, bound.as_ref())?;
        Ok(tape.tensor(logits))
    }

    /// Appends argmax tokens (lowest id wins ties) until EOS or `max_new`.
    pub fn greedy_decode(
        &self,
        prompt: &[usize],
        adapters: Option<&AdapterSet>,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let bound = adapters.map(|a| a.bind(&mut tape));
        greedy_decode_on_tape(&mut tape, &vars, prompt, bound.as_ref(), max_new)
    }
}

impl ParamGroup for BackboneParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("backbone.tok_emb".into(), &self.tok_emb);
        f("backbone.pos_emb".into(), &self.pos_emb);
        for (i, b) in self.layers.iter().enumerate() {
            let p = format!("backbone.layers.{i}");
            b.ln_attn.visit(&join(&p, "ln_attn"), f);
            f(join(&p, "wq"), &b.wq);
            f(join(&p, "wk"), &b.wk);
            f(join(&p, "wv"), &b.wv);
            f(join(&p, "wo"), &b.wo);
            b.ln_ffn.visit(&join(&p, "ln_ffn"), f);
            f(join(&p, "up"), &b.up);
            f(join(&p, "down"), &b.down);
        }
        self.ln_final.visit("backbone.ln_final", f);
        f("backbone.head".into(), &self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("backbone.tok_emb".into(), &mut self.tok_emb);
        f("backbone.pos_emb".into(), &mut self.pos_emb);
        for (i, b) in self.layers.iter_mut().enumerate() {
            let p = format!("backbone.layers.{i}");
            b.ln_attn.visit_mut(&join(&p, "ln_attn"), f);
            f(join(&p, "wq"), &mut b.wq);
            f(join(&p, "wk"), &mut b.wk);
            f(join(&p, "wv"), &mut b.wv);
            f(join(&p, "wo"), &mut b.wo);
            b.ln_ffn.visit_mut(&join(&p, "ln_ffn"), f);
            f(join(&p, "up"), &mut b.up);
            f(join(&p, "down"), &mut b.down);
        }
        self.ln_final.visit_mut("backbone.ln_final", f);
        f("backbone.head".into(), &mut self.head);
    }
}

fn lin<'u>(block: &BlockVars, layer: usize, site: Site, adapters: Option<&'u BoundAdapters>) -> EffectiveLinear<'u> {
    EffectiveLinear {
        base: block.site(site),
        update: adapters.and_then(|a| a.get(&AdapterKey { layer, site })),
    }
}

/// Records a full forward pass and returns the T×V logits node.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &BackboneVars,
    tokens: &[usize],
    adapters: Option<&BoundAdapters>,
) -> Result<Var> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Contract("forward pass needs at least one token".into()));
    }
    if t > vars.max_len {
        return Err(Error::ContextLength {
            len: t,
            max: vars.max_len,
        });
    }
    let tok = tape.gather_rows(vars.tok_emb, tokens)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.gather_rows(vars.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for (i, block) in vars.layers.iter().enumerate() {
        let h = block.ln_attn.apply(tape, x)?;
        let q = lin(block, i, Site::Query, adapters).apply(tape, h)?;
        let k = lin(block, i, Site::Key, adapters).apply(tape, h)?;
        let v = lin(block, i, Site::Value, adapters).apply(tape, h)?;
        let att = multi_head_attention(tape, q, k, v, vars.heads, true)?;
        let att = lin(block, i, Site::Output, adapters).apply(tape, att)?;
        x = tape.add(x, att)?;

        let h = block.ln_ffn.apply(tape, x)?;
        let h = lin(block, i, Site::FfnUp, adapters).apply(tape, h)?;
        let h = tape.gelu(h);
        let h = lin(block, i, Site::FfnDown, adapters).apply(tape, h)?;
        x = tape.add(x, h)?;
    }
    let x = vars.ln_final.apply(tape, x)?;
    tape.matmul(x, vars.head)
}

/// Lowest index of the maximum entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode_on_tape(
    tape: &mut Tape,
    vars: &BackboneVars,
    prompt: &[usize],
    adapters: Option<&BoundAdapters>,
    max_new: usize,
) -> Result<Vec<usize>> {
    if prompt.len() + max_new > vars.max_len {
        return Err(Error::ContextLength {
            len: prompt.len() + max_new,
            max: vars.max_len,
        });
    }
    let mark = tape.len();
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let logits = forward_on_tape(tape, vars, &seq, adapters)?;
        let v = tape.shape(logits)[1];
        let last = &tape.value(logits)[(seq.len() - 1) * v..];
        let next = argmax(last);
        tape.truncate(mark);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}
