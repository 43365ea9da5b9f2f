//! Ablation sweeps: injection targets, generator depth, static versus
//! instance-specific adaptation, and the text-only passthrough check.
//!
//! Every run starts from the same seed, so all runs share one frozen
//! backbone and encoder. Runs are independent and may execute on several
//! threads; results are always gathered in sweep order.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::thread;

use crate::config::RunConfig;
use crate::data::{synth_dataset, SynthTask, TrainingExample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, CSV_HEADER};
use crate::train::{encode_example, train, AdaptationKind, FreezeAudit, Model, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Targets,
    Depth,
    StaticVsDynamic,
    Passthrough,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [Self::Targets, Self::Depth, Self::StaticVsDynamic, Self::Passthrough];

    pub fn name(self) -> &'static str {
        match self {
            Self::Targets => "targets",
            Self::Depth => "depth",
            Self::StaticVsDynamic => "static_vs_dynamic",
            Self::Passthrough => "passthrough",
        }
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation kind {s:?}")))
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const TARGET_SWEEP: [&str; 5] = ["q", "qk", "qkv", "qkvo", "qkvof"];
pub const DEPTH_SWEEP: [usize; 3] = [1, 2, 4];
/// Prompts used by the text-only passthrough check.
pub const PASSTHROUGH_PROMPTS: usize = 20;

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
    pub kind: AdaptationKind,
}

/// The configurations a sweep trains, in order.
pub fn variants(kind: AblationKind, base: &RunConfig) -> Result<Vec<Variant>> {
    let with = |label: String, key: &str, value: &str| -> Result<Variant> {
        let mut config = base.clone();
        config.set(key, value)?;
        Ok(Variant {
            label,
            config,
            kind: AdaptationKind::Dynamic,
        })
    };
    match kind {
        AblationKind::Targets => TARGET_SWEEP.iter().map(|t| with(t.to_string(), "mawgen.targets", t)).collect(),
        AblationKind::Depth => DEPTH_SWEEP
            .iter()
            .map(|n| with(format!("N={n}"), "mawgen.blocks", &n.to_string()))
            .collect(),
        AblationKind::StaticVsDynamic | AblationKind::Passthrough => Ok(vec![
            Variant {
                label: "instance_specific".into(),
                config: base.clone(),
                kind: AdaptationKind::Dynamic,
            },
            Variant {
                label: "static".into(),
                config: base.clone(),
                kind: AdaptationKind::Static,
            },
        ]),
    }
}

/// Steps averaged for the reported final training loss: the last 5%.
pub fn final_window(steps: usize) -> usize {
    (steps / 20).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    /// Mean training loss over the last [`final_window`] steps.
    pub final_loss: f64,
    pub report: EvalReport,
    pub audit: FreezeAudit,
    /// Largest |Δlogit| between this model's text-only path and the
    /// untrained frozen backbone over the passthrough prompts.
    pub text_only_deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    /// A failed run keeps its error message; the sweep carries on.
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub kind: AblationKind,
    pub runs: Vec<AblationRun>,
}

/// Text-only prompts: those in `eval` first, topped up with synthetic ones.
pub fn passthrough_prompts(eval: &[TrainingExample], seed: u64) -> Vec<TrainingExample> {
    let mut out: Vec<TrainingExample> = eval.iter().filter(|e| e.smiles.is_none()).take(PASSTHROUGH_PROMPTS).cloned().collect();
    let missing = PASSTHROUGH_PROMPTS - out.len();
    out.extend(synth_dataset(SynthTask::TextOnly, missing, seed));
    out
}

/// Largest absolute logit difference between `model` on the text-only
/// path and `reference` with no adapter, over `prompts`.
pub fn text_only_deviation(model: &Model, reference: &Model, prompts: &[TrainingExample]) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in prompts {
        let (tokens, _) = encode_example(&model.vocab, p, true)?;
        let adapted = model.logits(None, &tokens)?;
        let frozen = reference.backbone.forward(&tokens, None)?;
        for (a, b) in adapted.data().iter().zip(frozen.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn run_one(v: &Variant, train_set: &[TrainingExample], eval_set: &[TrainingExample], prompts: &[TrainingExample]) -> Result<RunSummary> {
    let reference = Model::new(&v.config, v.kind)?;
    let out = train(&v.config, train_set, v.kind, TrainOptions::default())?;
    let steps = out.log.len();
    let final_loss = out
        .final_loss(final_window(steps))
        .ok_or_else(|| Error::Contract("run took no steps".into()))?;
    let (report, _) = evaluate(&out.model, eval_set)?;
    let text_only_deviation = text_only_deviation(&out.model, &reference, prompts)?;
    Ok(RunSummary {
        steps,
        final_loss,
        report,
        audit: out.audit,
        text_only_deviation,
    })
}

/// Trains and evaluates every configuration of a sweep from `base`.
/// Up to `threads` runs execute at once (at least one).
pub fn run_ablation(
    kind: AblationKind,
    base: &RunConfig,
    train_set: &[TrainingExample],
    eval_set: &[TrainingExample],
    threads: usize,
) -> Result<AblationResult> {
    if kind == AblationKind::Passthrough && !train_set.iter().any(|e| e.smiles.is_some()) {
        return Err(Error::Contract("the passthrough ablation needs graph examples to train on".into()));
    }
    let vs = variants(kind, base)?;
    let prompts = passthrough_prompts(eval_set, base.seed);
    let mut outcomes: Vec<Option<std::result::Result<RunSummary, String>>> = vec![None; vs.len()];
    for chunk in vs.iter().zip(outcomes.iter_mut()).collect::<Vec<_>>().chunks_mut(threads.max(1)) {
        thread::scope(|s| {
            for (v, slot) in chunk.iter_mut() {
                let prompts = &prompts;
                s.spawn(move || **slot = Some(run_one(v, train_set, eval_set, prompts).map_err(|e| e.to_string())));
            }
        });
    }
    let runs = vs
        .into_iter()
        .zip(outcomes)
        .map(|(variant, o)| AblationRun {
            variant,
            outcome: o.unwrap_or_else(|| Err("run did not finish".into())),
        })
        .collect();
    Ok(AblationResult { kind, runs })
}

impl AblationResult {
    pub fn run(&self, label: &str) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.variant.label == label)
    }

    pub fn summary(&self, label: &str) -> Option<&RunSummary> {
        self.run(label).and_then(|r| r.outcome.as_ref().ok())
    }

    /// One line per run: label, adaptation, status, steps, final loss,
    /// text-only deviation, and whether the frozen groups stayed intact.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("label,adaptation,status,steps,final_loss,text_only_deviation,frozen_intact\n");
        for r in &self.runs {
            let (label, kind) = (&r.variant.label, r.variant.kind);
            let _ = match &r.outcome {
                Ok(m) => writeln!(
                    s,
                    "{label},{kind},ok,{},{},{},{}",
                    m.steps,
                    m.final_loss,
                    m.text_only_deviation,
                    m.audit.frozen_intact()
                ),
                Err(e) => writeln!(s, "{label},{kind},\"failed: {}\",,,,", e.replace('"', "'")),
            };
        }
        s
    }

    /// Every successful run's evaluation rows, prefixed with its label.
    pub fn reports_csv(&self) -> String {
        let mut s = format!("label,{CSV_HEADER}\n");
        for r in &self.runs {
            if let Ok(m) = &r.outcome {
                s.push_str(&m.report.csv_rows_labelled(&r.variant.label));
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ablation: {}\n\n", self.kind);
        for r in &self.runs {
            let _ = writeln!(s, "== {} ({})", r.variant.label, r.variant.kind);
            match &r.outcome {
                Ok(m) => {
                    let _ = writeln!(
                        s,
                        "steps {}  final loss {:.6}  text-only max |dlogit| {:e}",
                        m.steps, m.final_loss, m.text_only_deviation
                    );
                    s.push_str(&m.report.to_text());
                }
                Err(e) => {
                    let _ = writeln!(s, "FAILED: {e}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Writes `summary.csv`, `reports.csv`, `ablation.txt` and one
    /// `<label>.csv` report per successful run into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("summary.csv".into(), self.summary_csv())?;
        write("reports.csv".into(), self.reports_csv())?;
        write("ablation.txt".into(), self.to_text())?;
        for r in &self.runs {
            if let Ok(m) = &r.outcome {
                let safe: String = r
                    .variant
                    .label
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
                    .collect();
                write(format!("report_{safe}.csv"), m.report.to_csv())?;
            }
        }
        Ok(())
    }
}
