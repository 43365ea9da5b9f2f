//! Run configuration: a flat `section.key = value` text format with `#`
//! comments. Unknown keys and malformed values are errors.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mawgen::GeneratorConfig;

pub const SEED_ENV: &str = "MORA_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Passes over the data; ignored when `steps` is non-zero.
    pub epochs: usize,
    pub steps: usize,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            epochs: 1,
            steps: 0,
            warmup_fraction: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub fingerprint_bits: usize,
    pub fingerprint_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 24,
            fingerprint_bits: 256,
            fingerprint_radius: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub mawgen: GeneratorConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            preset,
            seed: 0,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            mawgen: GeneratorConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        };
        if preset == Preset::Paper {
            // blocks, queries, rank, alpha and learning rate as published;
            // four queries under the shared policy means four components
            c.mawgen.blocks = 8;
            c.mawgen.queries = Some(4);
            c.mawgen.rank = 64;
            c.mawgen.alpha = 64.0;
            c.mawgen.targets = "qkvo".parse().expect("valid target string");
            c.training.lr = 2e-5;
            c.training.epochs = 10;
        }
        c
    }

    /// Parses config text on top of `base`.
    pub fn parse_onto(mut self, text: &str) -> Result<Self> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Reads a file; a `preset = ...` line, if any, must come first and
    /// selects the base the remaining keys apply to.
    pub fn load(path: impl AsRef<Path>, base: Preset) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let preset = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .find(|l| !l.is_empty())
            .and_then(|l| l.split_once('='))
            .filter(|(k, _)| k.trim() == "preset")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(base);
        Self::preset(preset)
            .parse_onto(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    /// Applies `MORA_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.mawgen;
        let t = &mut self.training;
        match key {
            "preset" => self.preset = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "backbone.layers" => self.backbone.layers = parse(key, value)?,
            "backbone.d_model" => self.backbone.d_model = parse(key, value)?,
            "backbone.heads" => self.backbone.heads = parse(key, value)?,
            "backbone.d_ff" => self.backbone.d_ff = parse(key, value)?,
            "backbone.max_len" => self.backbone.max_len = parse(key, value)?,
            "encoder.layers" => self.encoder.layers = parse(key, value)?,
            "encoder.d_model" => self.encoder.d_model = parse(key, value)?,
            "mawgen.blocks" => m.blocks = parse(key, value)?,
            "mawgen.queries" => m.queries = Some(parse(key, value)?),
            "mawgen.rank" => m.rank = parse(key, value)?,
            "mawgen.alpha" => m.alpha = parse(key, value)?,
            "mawgen.targets" => m.targets = value.parse()?,
            "mawgen.assignment" => m.assignment = value.parse()?,
            "mawgen.heads" => m.heads = parse(key, value)?,
            "mawgen.d_model" => m.d_model = parse(key, value)?,
            "mawgen.d_ff" => m.d_ff = parse(key, value)?,
            "mawgen.layers" => {
                m.layers = if value == "all" {
                    None
                } else {
                    Some(value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?)
                }
            }
            "training.lr" => t.lr = parse(key, value)?,
            "training.batch_size" => t.batch_size = parse(key, value)?,
            "training.epochs" => t.epochs = parse(key, value)?,
            "training.steps" => t.steps = parse(key, value)?,
            "training.warmup_fraction" => t.warmup_fraction = parse(key, value)?,
            "training.beta1" => t.beta1 = parse(key, value)?,
            "training.beta2" => t.beta2 = parse(key, value)?,
            "training.eps" => t.eps = parse(key, value)?,
            "training.weight_decay" => t.weight_decay = parse(key, value)?,
            "training.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "eval.max_new_tokens" => self.eval.max_new_tokens = parse(key, value)?,
            "eval.fingerprint_bits" => self.eval.fingerprint_bits = parse(key, value)?,
            "eval.fingerprint_radius" => self.eval.fingerprint_radius = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Feeding the
    /// result back through [`RunConfig::parse_onto`] reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.mawgen;
        let t = &self.training;
        let b = &self.backbone;
        vec![
            ("preset", self.preset.to_string()),
            ("seed", self.seed.to_string()),
            ("backbone.layers", b.layers.to_string()),
            ("backbone.d_model", b.d_model.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.d_ff", b.d_ff.to_string()),
            ("backbone.max_len", b.max_len.to_string()),
            ("encoder.layers", self.encoder.layers.to_string()),
            ("encoder.d_model", self.encoder.d_model.to_string()),
            ("mawgen.blocks", m.blocks.to_string()),
            ("mawgen.queries", m.queries.unwrap_or(m.required_queries(b)).to_string()),
            ("mawgen.rank", m.rank.to_string()),
            ("mawgen.alpha", fmt_f64(m.alpha)),
            ("mawgen.targets", m.targets.to_string()),
            ("mawgen.assignment", m.assignment.to_string()),
            ("mawgen.heads", m.heads.to_string()),
            ("mawgen.d_model", m.d_model.to_string()),
            ("mawgen.d_ff", m.d_ff.to_string()),
            (
                "mawgen.layers",
                m.layers.as_ref().map_or("all".into(), |l| {
                    l.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                }),
            ),
            ("training.lr", fmt_f64(t.lr)),
            ("training.batch_size", t.batch_size.to_string()),
            ("training.epochs", t.epochs.to_string()),
            ("training.steps", t.steps.to_string()),
            ("training.warmup_fraction", fmt_f64(t.warmup_fraction)),
            ("training.beta1", fmt_f64(t.beta1)),
            ("training.beta2", fmt_f64(t.beta2)),
            ("training.eps", fmt_f64(t.eps)),
            ("training.weight_decay", fmt_f64(t.weight_decay)),
            ("training.checkpoint_every", t.checkpoint_every.to_string()),
            ("eval.max_new_tokens", self.eval.max_new_tokens.to_string()),
            ("eval.fingerprint_bits", self.eval.fingerprint_bits.to_string()),
            ("eval.fingerprint_radius", self.eval.fingerprint_radius.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons also reject NaN
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.encoder.d_model == 0 {
            return Err(Error::Config("encoder.d_model must be positive".into()));
        }
        self.mawgen.validate(&self.backbone)?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.warmup_fraction) {
            return Err(Error::Config("training.warmup_fraction must lie in [0, 1]".into()));
        }
        if !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        if self.eval.fingerprint_bits == 0 {
            return Err(Error::Config("eval.fingerprint_bits must be positive".into()));
        }
        Ok(())
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!(c.mawgen.blocks, 8);
        assert_eq!(c.mawgen.queries, Some(4));
        assert_eq!(c.mawgen.rank, 64);
        assert_eq!(c.mawgen.alpha, 64.0);
        assert_eq!(c.training.lr, 2e-5);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.mawgen.layers = Some(vec![0, 2]);
        c.training.lr = 1.25e-4;
        let back = RunConfig::default().parse_onto(&c.to_text()).unwrap();
        let mut expect = c.clone();
        expect.mawgen.queries = Some(5);
        assert_eq!(back, expect);
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::default()
            .parse_onto("# header\nmawgen.rank = 8   # wider\n\nseed=3\n")
            .unwrap();
        assert_eq!(c.mawgen.rank, 8);
        assert_eq!(c.seed, 3);
        let e = RunConfig::default().parse_onto("mawgen.rnak = 8").unwrap_err();
        assert!(e.to_string().contains("line 1") && e.to_string().contains("mawgen.rnak"), "{e}");
        assert!(RunConfig::default().parse_onto("mawgen.rank = eight").is_err());
        assert!(RunConfig::default().parse_onto("mawgen.rank").is_err());
        assert!(RunConfig::default().parse_onto("mawgen.queries = 3").is_err());
        assert!(RunConfig::default().parse_onto("mawgen.assignment = per_layer\nmawgen.queries = 20").is_ok());
    }
}
