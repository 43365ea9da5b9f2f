//! Greedy-decoding evaluation with per-task metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{SynthTask, TrainingExample};
use crate::error::{Error, Result};
use crate::metrics::{char_bleu, exact_match, fingerprint, levenshtein, mae, parseable_rate, tanimoto};
use crate::mol::parse_smiles;
use crate::train::Model;

/// Metrics for one task tag. Optional fields are only meaningful for some
/// tasks: MAE for numeric answers, parseable rate and Tanimoto for SMILES.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: String,
    pub examples: usize,
    pub exact_match: f64,
    pub levenshtein_mean: f64,
    /// Character-level BLEU-4, averaged over examples.
    pub bleu: f64,
    /// Mean teacher-forced cross-entropy per answer token (EOS excluded).
    pub answer_ce: f64,
    /// Over predictions that parse as numbers; `None` if none do.
    pub mae: Option<f64>,
    /// Numeric-task predictions that did not parse as a number.
    pub unparsed: usize,
    pub parseable_rate: Option<f64>,
    /// Unparseable predictions score 0.
    pub tanimoto_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Flattened configuration of the evaluated model.
    pub config: Vec<(String, String)>,
    pub examples: usize,
    /// Sorted by task tag.
    pub tasks: Vec<TaskMetrics>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub index: usize,
    pub task: String,
    pub prediction: String,
    pub answer: String,
}

fn is_numeric_task(tag: &str, gold: &[&TrainingExample]) -> bool {
    match tag.parse::<SynthTask>() {
        Ok(t) => t.numeric(),
        Err(_) => gold.iter().all(|e| e.answer.trim().parse::<f64>().is_ok()),
    }
}

fn is_smiles_task(tag: &str) -> bool {
    matches!(tag.parse::<SynthTask>(), Ok(SynthTask::GraphCopy))
}

/// Decodes every example greedily and scores it against its answer.
pub fn evaluate(model: &Model, examples: &[TrainingExample]) -> Result<(EvalReport, Vec<Prediction>)> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one example".into()));
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut ce = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let prediction = model.generate(ex.smiles.as_deref(), &ex.instruction)?;
        ce.push(model.answer_loss(ex, false)?);
        preds.push(Prediction {
            index,
            task: ex.task_tag.clone(),
            prediction,
            answer: ex.answer.clone(),
        });
    }
    let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_task.entry(&ex.task_tag).or_default().push(i);
    }
    let (radius, bits) = (model.config.eval.fingerprint_radius, model.config.eval.fingerprint_bits);
    let mut tasks = Vec::new();
    for (tag, idx) in by_task {
        let n = idx.len() as f64;
        let gold: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
        let p: Vec<&str> = idx.iter().map(|&i| preds[i].prediction.as_str()).collect();
        let mean = |f: &dyn Fn(&str, &str) -> f64| -> f64 { p.iter().zip(&gold).map(|(p, g)| f(p, &g.answer)).sum::<f64>() / n };
        let (ce_sum, ce_count) = idx.iter().fold((0.0, 0usize), |(s, c), &i| (s + ce[i].0, c + ce[i].1));
        let mut m = TaskMetrics {
            task: tag.to_string(),
            examples: idx.len(),
            exact_match: mean(&|p, g| f64::from(exact_match(p, g))),
            levenshtein_mean: mean(&|p, g| levenshtein(p.trim(), g.trim()) as f64),
            bleu: mean(&|p, g| char_bleu(p, g)),
            answer_ce: ce_sum / ce_count as f64,
            mae: None,
            unparsed: 0,
            parseable_rate: None,
            tanimoto_mean: None,
        };
        if is_numeric_task(tag, &gold) {
            let mut pv = Vec::new();
            let mut gv = Vec::new();
            for (p, g) in p.iter().zip(&gold) {
                match (p.trim().parse::<f64>(), g.answer.trim().parse::<f64>()) {
                    (Ok(a), Ok(b)) => {
                        pv.push(a);
                        gv.push(b);
                    }
                    _ => m.unparsed += 1,
                }
            }
            m.mae = if pv.is_empty() { None } else { Some(mae(&pv, &gv)?) };
        }
        if is_smiles_task(tag) {
            m.parseable_rate = Some(parseable_rate(&p));
            let mut total = 0.0;
            for (p, g) in p.iter().zip(&gold) {
                let g = parse_smiles(g.answer.trim())?;
                if let Ok(pg) = parse_smiles(p.trim()) {
                    total += tanimoto(&fingerprint(&pg, radius, bits), &fingerprint(&g, radius, bits))?;
                }
            }
            m.tanimoto_mean = Some(total / n);
        }
        tasks.push(m);
    }
    let report = EvalReport {
        config: model.config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        examples: examples.len(),
        tasks,
    };
    Ok((report, preds))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub const CSV_HEADER: &str =
    "task,examples,exact_match,levenshtein_mean,bleu,answer_ce,mae,unparsed,parseable_rate,tanimoto_mean";

impl TaskMetrics {
    fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.examples,
            self.exact_match,
            self.levenshtein_mean,
            self.bleu,
            self.answer_ce,
            opt(self.mae),
            self.unparsed,
            opt(self.parseable_rate),
            opt(self.tanimoto_mean)
        )
    }
}

impl EvalReport {
    /// One row per task; empty cells where a metric does not apply.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for t in &self.tasks {
            s.push_str(&t.csv_fields());
            s.push('\n');
        }
        s
    }

    /// Rows prefixed with a run label, for combining several reports.
    pub fn csv_rows_labelled(&self, label: &str) -> String {
        self.tasks.iter().map(|t| format!("{label},{}\n", t.csv_fields())).collect()
    }

    /// Aligned table followed by the example count and configuration.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let header = ["task", "n", "EM", "lev", "BLEU", "CE", "MAE", "unparsed", "parseable", "tanimoto"];
        let rows: Vec<Vec<String>> = self
            .tasks
            .iter()
            .map(|t| {
                vec![
                    t.task.clone(),
                    t.examples.to_string(),
                    format!("{:.4}", t.exact_match),
                    format!("{:.4}", t.levenshtein_mean),
                    format!("{:.4}", t.bleu),
                    format!("{:.4}", t.answer_ce),
                    f(t.mae),
                    t.unparsed.to_string(),
                    f(t.parseable_rate),
                    f(t.tanimoto_mean),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<&str>| -> String {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut s = line(header.to_vec());
        for r in &rows {
            s.push_str(&line(r.iter().map(String::as_str).collect()));
        }
        let _ = writeln!(s, "\nexamples: {}", self.examples);
        s.push_str("config:\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "  {k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::synth_dataset;
    use crate::train::AdaptationKind;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.backbone.layers = 1;
        c.backbone.d_model = 16;
        c.backbone.d_ff = 32;
        c.mawgen.blocks = 1;
        c.eval.max_new_tokens = 4;
        c
    }

    #[test]
    fn report_groups_by_task_and_fills_applicable_metrics() {
        let model = Model::new(&small(), AdaptationKind::Dynamic).unwrap();
        let mut data = synth_dataset(SynthTask::AtomCount, 3, 1);
        data.extend(synth_dataset(SynthTask::GraphCopy, 2, 2));
        data.extend(synth_dataset(SynthTask::TextOnly, 2, 3));
        let (r, preds) = evaluate(&model, &data).unwrap();
        assert_eq!(preds.len(), 7);
        assert_eq!(r.examples, 7);
        let tags: Vec<&str> = r.tasks.iter().map(|t| t.task.as_str()).collect();
        assert_eq!(tags, ["atom_count", "graph_copy", "text_only"]);
        let copy = &r.tasks[1];
        assert!(copy.parseable_rate.is_some() && copy.tanimoto_mean.is_some() && copy.mae.is_none());
        let count = &r.tasks[0];
        assert!(count.parseable_rate.is_none());
        assert!(count.mae.is_some() || count.unparsed == 3);
        assert_eq!(r.to_csv().lines().count(), 4);
        assert!(r.to_text().contains("config:"));
    }

    #[test]
    fn empty_evaluation_is_rejected() {
        let model = Model::new(&small(), AdaptationKind::Static).unwrap();
        assert!(evaluate(&model, &[]).is_err());
    }
}
