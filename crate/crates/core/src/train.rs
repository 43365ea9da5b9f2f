//! The model bundle, AdamW, the learning-rate schedule and the training loop.
//!
//! Only the adaptation parameters (the weight generator, or the static
//! baseline adapter) ever change; the backbone and encoder are bound as
//! frozen leaves and receive no gradient.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterSet, BoundAdapters};
use crate::backbone::{forward_on_tape, BackboneParams, BackboneVars, Vocabulary, EOS};
use crate::config::RunConfig;
use crate::data::TrainingExample;
use crate::encoder::{encode_graph, encode_on_tape, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::mawgen::{adapters_on_tape, GeneratorParams};
use crate::mol::{atom_features, MolecularGraph};
use crate::params::ParamGroup;
use crate::static_lora::StaticAdapter;
use crate::tape::{Tape, Var};

/// Target index that contributes nothing to the loss.
pub const IGNORE: usize = usize::MAX;

/// Independent random streams so that, for one seed, the backbone and
/// encoder are identical whatever the adaptation settings.
const STREAM_BACKBONE: u64 = 1;
const STREAM_ENCODER: u64 = 2;
const STREAM_ADAPTATION: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AdaptationKind {
    /// Instance-specific updates from the weight generator.
    #[default]
    Dynamic,
    /// One trained adapter shared by every input.
    Static,
}

impl FromStr for AdaptationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Self::Dynamic),
            "static" => Ok(Self::Static),
            other => Err(Error::Config(format!("unknown adaptation {other:?} (expected dynamic or static)"))),
        }
    }
}

impl fmt::Display for AdaptationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dynamic => "dynamic",
            Self::Static => "static",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adaptation {
    Dynamic(GeneratorParams),
    Static(StaticAdapter),
}

impl Adaptation {
    pub fn kind(&self) -> AdaptationKind {
        match self {
            Self::Dynamic(_) => AdaptationKind::Dynamic,
            Self::Static(_) => AdaptationKind::Static,
        }
    }

    pub fn params(&self) -> &dyn ParamGroup {
        match self {
            Self::Dynamic(g) => g,
            Self::Static(s) => s,
        }
    }

    pub fn params_mut(&mut self) -> &mut dyn ParamGroup {
        match self {
            Self::Dynamic(g) => g,
            Self::Static(s) => s,
        }
    }

    /// Name of the parameter group in checkpoints and audits.
    pub fn group_name(&self) -> &'static str {
        match self {
            Self::Dynamic(_) => "mawgen",
            Self::Static(_) => "static",
        }
    }
}

/// Everything needed to run the adapted model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub backbone: BackboneParams,
    pub encoder: EncoderParams,
    pub adaptation: Adaptation,
}

enum AdaptVars {
    Dynamic(crate::mawgen::GeneratorVars),
    Static(BoundAdapters),
}

/// Tokens of `BOS instruction SEP answer EOS` shifted for next-token
/// prediction, with targets outside `answer EOS` set to [`IGNORE`]. With
/// `include_eos = false` the EOS target is ignored too.
pub fn encode_example(vocab: &Vocabulary, ex: &TrainingExample, include_eos: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seq = vocab.prompt(&ex.instruction)?;
    let answer_start = seq.len();
    seq.extend(vocab.tokenize(&ex.answer)?);
    seq.push(EOS);
    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = (0..inputs.len())
        .map(|i| {
            let t = i + 1;
            if t < answer_start || (!include_eos && t == seq.len() - 1) {
                IGNORE
            } else {
                seq[t]
            }
        })
        .collect();
    Ok((inputs, targets))
}

impl Model {
    /// Fresh model from a configuration. The backbone and encoder depend
    /// only on the seed and their own settings.
    pub fn new(config: &RunConfig, kind: AdaptationKind) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::default();
        let mut config = config.clone();
        config.backbone.vocab_size = vocab.size();
        config.mawgen.queries = Some(config.mawgen.required_queries(&config.backbone));
        let bcfg = config.backbone;
        let mut backbone = BackboneParams::new(bcfg, &mut stream(config.seed, STREAM_BACKBONE))?;
        backbone.set_trainable(false);
        let mut encoder = EncoderParams::new(config.encoder, &mut stream(config.seed, STREAM_ENCODER));
        encoder.set_trainable(false);
        let mut rng = stream(config.seed, STREAM_ADAPTATION);
        let adaptation = match kind {
            AdaptationKind::Dynamic => Adaptation::Dynamic(GeneratorParams::new(
                config.mawgen.clone(),
                bcfg,
                config.encoder.d_model,
                &mut rng,
            )?),
            AdaptationKind::Static => Adaptation::Static(StaticAdapter::new(config.mawgen.clone(), &bcfg, &mut rng)?),
        };
        Ok(Self {
            config,
            vocab,
            backbone,
            encoder,
            adaptation,
        })
    }

    /// The adapter set this model applies for an input. Text-only inputs
    /// get none under the generator; the static baseline always applies its
    /// single set.
    pub fn adapter_set(&self, graph: Option<&MolecularGraph>) -> Result<Option<AdapterSet>> {
        match (&self.adaptation, graph) {
            (Adaptation::Dynamic(g), Some(graph)) => {
                let h = encode_graph(graph, &self.encoder)?;
                g.generate_adapter_set(&h, &graph.content_hash()).map(Some)
            }
            (Adaptation::Dynamic(_), None) => Ok(None),
            (Adaptation::Static(s), _) => Ok(Some(s.adapter_set())),
        }
    }

    /// Next-token logits over `tokens` for an input with optional graph.
    pub fn logits(&self, graph: Option<&MolecularGraph>, tokens: &[usize]) -> Result<crate::Tensor> {
        let set = self.adapter_set(graph)?;
        self.backbone.forward(tokens, set.as_ref())
    }

    /// Greedy answer for an instruction and optional SMILES.
    pub fn generate(&self, smiles: Option<&str>, instruction: &str) -> Result<String> {
        let graph = smiles.map(crate::mol::parse_smiles).transpose()?;
        let set = self.adapter_set(graph.as_ref())?;
        let prompt = self.vocab.prompt(instruction)?;
        let room = self.backbone.config.max_len.saturating_sub(prompt.len());
        let max_new = self.config.eval.max_new_tokens.min(room);
        let out = self.backbone.greedy_decode(&prompt, set.as_ref(), max_new)?;
        Ok(self.vocab.detokenize(&out[prompt.len()..]))
    }

    /// Summed cross-entropy over an example's answer tokens (optionally
    /// with EOS) and the number of tokens summed.
    pub fn answer_loss(&self, ex: &TrainingExample, include_eos: bool) -> Result<(f64, usize)> {
        let graph = ex.graph()?;
        let (inputs, targets) = encode_example(&self.vocab, ex, include_eos)?;
        let logits = self.logits(graph.as_ref(), &inputs)?;
        let v = logits.shape()[1];
        let mut sum = 0.0;
        let mut n = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            sum += lse - row[t];
            n += 1;
        }
        debug_assert!(n > 0 && v > 0);
        Ok((sum, n))
    }

    /// Checks that every example can run: graphs parse and featurise,
    /// text tokenises and fits the context.
    pub fn check_examples(&self, examples: &[TrainingExample]) -> Result<()> {
        for (i, ex) in examples.iter().enumerate() {
            let check = || -> Result<()> {
                if let Some(g) = ex.graph()? {
                    if g.is_empty() {
                        return Err(Error::EmptyGraph);
                    }
                    atom_features(&g)?;
                }
                let (inputs, _) = encode_example(&self.vocab, ex, true)?;
                if inputs.len() > self.backbone.config.max_len {
                    return Err(Error::ContextLength {
                        len: inputs.len(),
                        max: self.backbone.config.max_len,
                    });
                }
                Ok(())
            };
            check().map_err(|e| step_error(i, ex, e))?;
        }
        Ok(())
    }

    pub fn group_hashes(&self) -> GroupHashes {
        GroupHashes {
            backbone: self.backbone.content_hash(),
            encoder: self.encoder.content_hash(),
            adaptation: self.adaptation.params().content_hash(),
        }
    }
}

fn step_error(index: usize, ex: &TrainingExample, e: Error) -> Error {
    Error::Step {
        example: format!("#{index} ({})", ex.task_tag),
        source: Box::new(e),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupHashes {
    pub backbone: String,
    pub encoder: String,
    pub adaptation: String,
}

/// Group hashes before and after a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeAudit {
    pub before: GroupHashes,
    pub after: GroupHashes,
}

impl FreezeAudit {
    pub fn frozen_intact(&self) -> bool {
        self.before.backbone == self.after.backbone && self.before.encoder == self.after.encoder
    }

    pub fn adaptation_changed(&self) -> bool {
        self.before.adaptation != self.after.adaptation
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(c: &crate::config::TrainingConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Moment buffers in parameter traversal order, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper, params: &dyn ParamGroup) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.len()]));
        Self {
            hyper,
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One decoupled-weight-decay Adam step on a flat parameter. `step` is the
/// 1-based count including this update.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, h: &AdamHyper, lr: f64) -> Result<()> {
    if param.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::shape("adamw_update", &[param.len()], &[grad.len()]));
    }
    if grad.iter().any(|g| g.is_nan()) {
        return Err(Error::Numeric("NaN gradient".into()));
    }
    let t = step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] -= lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * param[i]);
    }
    Ok(())
}

/// Linear warm-up over `ceil(fraction · total)` steps, then cosine decay.
/// `step` is 0-based.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_fraction: f64) -> f64 {
    let warm = (warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Records the batch loss on `tape` and returns it together with the tape
/// range holding the adaptation leaves (in traversal order).
fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[(usize, &TrainingExample)],
) -> Result<(Var, std::ops::Range<usize>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let bv: BackboneVars = model.backbone.bind(tape);
    let ev: EncoderVars = model.encoder.bind(tape);
    let start = tape.len();
    let av = match &model.adaptation {
        Adaptation::Dynamic(g) => AdaptVars::Dynamic(g.bind(tape)),
        Adaptation::Static(s) => {
            let vars = s.bind(tape);
            AdaptVars::Static(s.adapters_on_tape(&vars))
        }
    };
    let leaves = start..tape.len();
    let mut losses = Vec::with_capacity(batch.len());
    for &(idx, ex) in batch {
        let per_example = |tape: &mut Tape| -> Result<Var> {
            let graph = ex.graph()?;
            let (inputs, targets) = encode_example(&model.vocab, ex, true)?;
            let generated;
            let adapters = match (&av, &graph, &model.adaptation) {
                (AdaptVars::Dynamic(gv), Some(g), Adaptation::Dynamic(gp)) => {
                    let h = encode_on_tape(tape, &ev, g)?;
                    generated = adapters_on_tape(tape, gp, gv, h)?;
                    Some(&generated)
                }
                (AdaptVars::Dynamic(_), None, _) => None,
                (AdaptVars::Static(bound), _, _) => Some(bound),
                _ => unreachable!("vars match the adaptation kind"),
            };
            let logits = forward_on_tape(tape, &bv, &inputs, adapters)?;
            tape.cross_entropy(logits, &targets, IGNORE)
        };
        losses.push(per_example(tape).map_err(|e| step_error(idx, ex, e))?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / losses.len() as f64);
    Ok((mean, leaves))
}

/// Mean batch loss and the gradient of every adaptation parameter, in
/// traversal order (zeros where the loss does not depend on it).
pub fn loss_and_grads(model: &Model, batch: &[(usize, &TrainingExample)]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let (loss, leaves) = batch_loss(&mut tape, model, batch)?;
    tape.backward(loss)?;
    let mut grads = Vec::new();
    let mut idx = leaves.start;
    let mut mismatch = None;
    model.adaptation.params().visit(&mut |name, t| {
        let var = tape.var_at(idx);
        idx += 1;
        if tape.shape(var) != t.shape() {
            mismatch.get_or_insert(name);
        }
        grads.push(tape.grad(var).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec));
    });
    if let Some(name) = mismatch {
        return Err(Error::Contract(format!("parameter {name} bound out of traversal order")));
    }
    if idx != leaves.end {
        return Err(Error::Contract("adaptation bound a different number of leaves than it visits".into()));
    }
    Ok((tape.scalar(loss), grads))
}

/// One optimisation step: forward and backward over the batch, then AdamW
/// on the adaptation parameters only. Returns the mean batch loss. A NaN
/// gradient aborts the step before any parameter moves.
pub fn training_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[(usize, &TrainingExample)],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch)?;
    if grads.iter().flatten().any(|g| g.is_nan()) {
        return Err(Error::Numeric("NaN gradient".into()));
    }
    opt.step += 1;
    let step = opt.step;
    let hyper = opt.hyper;
    let mut i = 0;
    let mut result = Ok(());
    model.adaptation.params_mut().visit_mut(&mut |_, t| {
        if result.is_ok() {
            result = adamw_update(t.data_mut(), &grads[i], &mut opt.m[i], &mut opt.v[i], step, &hyper, lr);
        }
        i += 1;
    });
    result?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Default)]
pub struct TrainOptions {
    /// Final (and periodic) checkpoint destination.
    pub checkpoint: Option<PathBuf>,
    /// Loss log CSV with columns `step,lr,loss`.
    pub log: Option<PathBuf>,
    /// Called after every step.
    pub on_step: Option<Box<dyn FnMut(&StepLog)>>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub log: Vec<StepLog>,
    pub audit: FreezeAudit,
}

impl TrainOutcome {
    /// Mean loss over the last `window` steps (all steps if fewer).
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let n = self.log.len();
        if n == 0 {
            return None;
        }
        let tail = &self.log[n.saturating_sub(window.max(1))..];
        Some(tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Total optimisation steps implied by a configuration and dataset size.
pub fn total_steps(config: &RunConfig, examples: usize) -> usize {
    let t = &config.training;
    if t.steps > 0 {
        t.steps
    } else {
        t.epochs * examples.div_ceil(t.batch_size)
    }
}

/// Trains a fresh model of the given kind.
pub fn train(config: &RunConfig, dataset: &[TrainingExample], kind: AdaptationKind, opts: TrainOptions) -> Result<TrainOutcome> {
    let model = Model::new(config, kind)?;
    let opt = OptimizerState::new(AdamHyper::from_config(&config.training), model.adaptation.params());
    train_from(model, opt, dataset, opts)
}

/// The static-adapter baseline: same loop, input-independent adapter.
pub fn static_lora_train(config: &RunConfig, dataset: &[TrainingExample], opts: TrainOptions) -> Result<TrainOutcome> {
    train(config, dataset, AdaptationKind::Static, opts)
}

/// Runs the configured number of steps starting from `model` and `opt`.
/// Epochs reshuffle the data with a generator seeded from the run seed.
pub fn train_from(mut model: Model, mut opt: OptimizerState, dataset: &[TrainingExample], mut opts: TrainOptions) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Contract("training needs a non-empty dataset".into()));
    }
    model.check_examples(dataset)?;
    let config = model.config.clone();
    let total = total_steps(&config, dataset.len());
    let mut log_file = match &opts.log {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "step,lr,loss").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    let before = model.group_hashes();
    let mut rng = stream(config.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch_size = config.training.batch_size;
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                if !batch.is_empty() {
                    break; // epoch boundary ends a short batch
                }
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push((order[cursor], &dataset[order[cursor]]));
            cursor += 1;
        }
        let lr = lr_at(step, total, config.training.lr, config.training.warmup_fraction);
        let loss = training_step(&mut model, &mut opt, &batch, lr)?;
        let entry = StepLog { step: step + 1, lr, loss };
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{},{:e},{:e}", entry.step, lr, loss).map_err(|e| Error::io(&*p, e))?;
        }
        if let Some(cb) = &mut opts.on_step {
            cb(&entry);
        }
        log.push(entry);
        let every = config.training.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 && step + 1 < total {
            if let Some(p) = &opts.checkpoint {
                crate::checkpoint::save(p, &model, &opt)?;
            }
        }
    }
    if let Some(p) = &opts.checkpoint {
        crate::checkpoint::save(p, &model, &opt)?;
    }
    let audit = FreezeAudit {
        before,
        after: model.group_hashes(),
    };
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthTask};

    #[test]
    fn adamw_single_scalar_step() {
        let h = AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &h, 0.1).unwrap();
        // bias-corrected moments are exactly g and g², so the step is lr·g/(|g|+eps)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_and_pure_decay() {
        let mut h = AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let (mut p, mut m, mut v) = ([0.7, -2.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &h, 0.1).unwrap();
        assert_eq!(p, [0.7, -2.0]);
        h.weight_decay = 0.5;
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, &h, 0.1).unwrap();
        assert_eq!(p, [0.7 - 0.1 * 0.5 * 0.7, -2.0 - 0.1 * 0.5 * -2.0]);
        assert!(matches!(
            adamw_update(&mut p, &[f64::NAN, 0.0], &mut m, &mut v, 3, &h, 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((lr_at(0, total, 1.0, 0.03) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(lr_at(2, total, 1.0, 0.03), 1.0);
        assert_eq!(lr_at(3, total, 1.0, 0.03), 1.0);
        let mut prev = 1.0;
        for s in 3..total {
            let lr = lr_at(s, total, 1.0, 0.03);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
        assert_eq!(lr_at(0, 10, 2.0, 0.0), 2.0);
    }

    #[test]
    fn targets_cover_answer_and_eos_only() {
        let vocab = Vocabulary::default();
        let ex = TrainingExample {
            smiles: None,
            instruction: "ab".into(),
            answer: "xy".into(),
            task_tag: "t".into(),
        };
        let (inputs, targets) = encode_example(&vocab, &ex, true).unwrap();
        let id = |c| vocab.id(c).unwrap();
        assert_eq!(inputs, vec![crate::backbone::BOS, id('a'), id('b'), crate::backbone::SEP, id('x'), id('y')]);
        assert_eq!(targets, vec![IGNORE, IGNORE, IGNORE, id('x'), id('y'), EOS]);
        let (_, targets) = encode_example(&vocab, &ex, false).unwrap();
        assert_eq!(targets, vec![IGNORE, IGNORE, IGNORE, id('x'), id('y'), IGNORE]);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut cfg = RunConfig::default();
        cfg.backbone.layers = 1;
        cfg.backbone.d_model = 16;
        cfg.backbone.d_ff = 32;
        let data = synth_dataset(SynthTask::AtomCount, 4, 1);
        let mut model = Model::new(&cfg, AdaptationKind::Dynamic).unwrap();
        let before = model.group_hashes();
        let mut opt = OptimizerState::new(AdamHyper::from_config(&cfg.training), model.adaptation.params());
        let batch: Vec<_> = data.iter().enumerate().collect();
        let loss = training_step(&mut model, &mut opt, &batch, 0.0).unwrap();
        assert!(loss.is_finite());
        assert_eq!(model.group_hashes(), before);
    }

    #[test]
    fn bad_graph_names_the_example() {
        let cfg = RunConfig::default();
        let mut data = synth_dataset(SynthTask::AtomCount, 3, 1);
        data[2].smiles = Some("C1CC".into());
        let err = train(&cfg, &data, AdaptationKind::Dynamic, TrainOptions::default()).err().unwrap();
        assert!(err.to_string().contains("#2"), "{err}");
    }
}
