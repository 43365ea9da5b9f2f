//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails. Runs as a plain binary (`harness = false`) so the
//! lines are always visible: `cargo test --test acceptance`.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{example, finite_difference_check, miniature_config, randomize};
use mora::ablation::{passthrough_prompts, text_only_deviation};
use mora::config::RunConfig;
use mora::data::{synth_dataset, SynthTask, TrainingExample};
use mora::eval::evaluate;
use mora::metrics::{bleu, fingerprint, levenshtein, mae, tanimoto};
use mora::mol::{parse_smiles, parse_smiles_bytes, permute_graph, MolecularGraph};
use mora::train::{encode_example, static_lora_train, train, AdaptationKind, Model, TrainOptions};
use mora::ParamGroup;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mora_cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mora"))
        .current_dir(dir)
        .args(args)
        .env_remove("MORA_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.code() != Some(0) {
        return Err(format!("`mora {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn graphs(n: usize, seed: u64) -> Vec<MolecularGraph> {
    synth_dataset(SynthTask::GraphCopy, n, seed)
        .iter()
        .map(|e| e.graph().unwrap().unwrap())
        .collect()
}

/// Shared state: the generator trained for the freeze audit feeds the
/// rank and permutation checks; the criterion-6 models feed passthrough.
#[derive(Default)]
struct Shared {
    audited: Option<Model>,
    count_models: Option<(Model, Model)>,
}

fn c1_zero_init() -> Check {
    let t = Instant::now();
    let model = Model::new(&RunConfig::default(), AdaptationKind::Dynamic).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (i, g) in graphs(20, 101).iter().enumerate() {
        let ex = example(None, &format!("Describe #{i}"), "ok");
        let toks = encode_example(&model.vocab, &ex, true).unwrap().0;
        let adapted = model.logits(Some(g), &toks).unwrap();
        let frozen = model.backbone.forward(&toks, None).unwrap();
        worst = worst.max(adapted.max_abs_diff(&frozen));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst <= 1e-12 && secs < 10.0, format!("20 pairs, max |dlogit| {worst:e}, {secs:.2}s"))
}

fn c2_gradients() -> Check {
    let t = Instant::now();
    let mut model = Model::new(&miniature_config(), AdaptationKind::Dynamic).map_err(|e| e.to_string())?;
    // away from the zero-initialised heads so every leaf carries gradient
    randomize(model.adaptation.params_mut(), 2, 0.3);
    let report = finite_difference_check(&model, &[example(Some("CC(=O)O"), "Name?", "abcd")]);
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) = report
        .iter()
        .map(|(n, r, _)| (n.clone(), *r))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let dead: Vec<&str> = report.iter().filter(|(_, _, g)| *g == 0.0).map(|(n, _, _)| n.as_str()).collect();
    ensure(
        worst < 1e-4 && dead.is_empty() && secs < 120.0,
        format!(
            "{} leaves, worst relative error {worst:.2e} ({worst_name}), zero-gradient leaves {dead:?}, {secs:.1}s",
            report.len()
        ),
    )
}

fn c3_freeze_audit(shared: &mut Shared) -> Check {
    let mut c = RunConfig::default();
    c.training.steps = 500;
    let data = synth_dataset(SynthTask::AtomCount, 500, 1);
    let fresh = Model::new(&c, AdaptationKind::Dynamic).map_err(|e| e.to_string())?;
    let out = train(&c, &data, AdaptationKind::Dynamic, TrainOptions::default()).map_err(|e| e.to_string())?;
    let backbone_same = fresh.backbone.content_hash() == out.model.backbone.content_hash();
    let encoder_same = fresh.encoder.content_hash() == out.model.encoder.content_hash();
    let ok = out.audit.frozen_intact() && out.audit.adaptation_changed() && backbone_same && encoder_same;
    let detail = format!(
        "backbone {} encoder {} generator {} after {} steps",
        &out.audit.after.backbone[..12],
        &out.audit.after.encoder[..12],
        if out.audit.adaptation_changed() { "changed" } else { "UNCHANGED" },
        out.log.len()
    );
    shared.audited = Some(out.model);
    ensure(ok, detail)
}

fn c4_rank(shared: &Shared) -> Check {
    let model = shared.audited.as_ref().ok_or("needs the criterion-3 generator")?;
    let r = model.config.mawgen.rank;
    let mut worst = 0.0f64;
    let mut n = 0;
    'outer: for g in graphs(50, 104) {
        let set = model.adapter_set(Some(&g)).unwrap().unwrap();
        for u in set.entries().values() {
            let m = u.materialize();
            let (rows, cols) = m.dims2().unwrap();
            let mut s: Vec<f64> = DMatrix::from_row_slice(rows, cols, m.data()).singular_values().iter().copied().collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if s[0] == 0.0 {
                return Err("generated a zero update".into());
            }
            worst = worst.max(s[r] / s[0]);
            n += 1;
            if n == 50 {
                break 'outer;
            }
        }
    }
    ensure(n == 50 && worst < 1e-9, format!("{n} updates of rank {r}, max sigma_(r+1)/sigma_1 {worst:.2e}"))
}

fn c5_permutation(shared: &Shared) -> Check {
    let model = shared.audited.as_ref().ok_or("needs the criterion-3 generator")?;
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    let mut multi_atom = 0;
    for g in graphs(20, 105) {
        multi_atom += usize::from(g.atom_count() > 1);
        let base = model.adapter_set(Some(&g)).unwrap().unwrap();
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..g.atom_count()).collect();
            perm.shuffle(&mut rng);
            let other = model.adapter_set(Some(&permute_graph(&g, &perm).unwrap())).unwrap().unwrap();
            worst = worst.max(base.max_abs_diff(&other).unwrap());
        }
    }
    ensure(worst <= 1e-12, format!("20 graphs ({multi_atom} with >1 atom) x 5 permutations, max diff {worst:e}"))
}

fn c6_instance_vs_static(shared: &mut Shared) -> Check {
    let t = Instant::now();
    let mut c = RunConfig::default();
    c.training.steps = 10_000;
    let train_set = synth_dataset(SynthTask::AtomCount, 20_000, 1);
    let held_out = synth_dataset(SynthTask::AtomCount, 300, 2);
    let dynamic = train(&c, &train_set, AdaptationKind::Dynamic, TrainOptions::default()).map_err(|e| e.to_string())?;
    let fixed = static_lora_train(&c, &train_set, TrainOptions::default()).map_err(|e| e.to_string())?;
    let (rd, _) = evaluate(&dynamic.model, &held_out).map_err(|e| e.to_string())?;
    let (rs, _) = evaluate(&fixed.model, &held_out).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let (d, s) = (&rd.tasks[0], &rs.tasks[0]);
    let floor = 0.8 * 9f64.ln();
    shared.count_models = Some((dynamic.model, fixed.model));
    ensure(
        s.answer_ce >= floor && d.answer_ce <= 0.1 && d.exact_match >= 0.95 && secs < 1800.0,
        format!(
            "held-out CE static {:.4} (floor {floor:.4}), instance-specific {:.4} with EM {:.3}; {secs:.0}s",
            s.answer_ce, d.answer_ce, d.exact_match
        ),
    )
}

fn c7_passthrough(shared: &Shared) -> Check {
    let (dynamic, fixed) = shared.count_models.as_ref().ok_or("needs the criterion-6 models")?;
    let prompts: Vec<TrainingExample> = passthrough_prompts(&[], 107);
    let reference = Model::new(&dynamic.config, AdaptationKind::Dynamic).map_err(|e| e.to_string())?;
    let d = text_only_deviation(dynamic, &reference, &prompts).map_err(|e| e.to_string())?;
    let s = text_only_deviation(fixed, &reference, &prompts).map_err(|e| e.to_string())?;
    ensure(
        d == 0.0 && s > 0.0,
        format!("{} text-only prompts: instance-specific max |dlogit| {d:e}, static {s:.3e}", prompts.len()),
    )
}

const ABLATION_CFG: &str = "\
training.steps = 1000
eval.max_new_tokens = 4
";

fn summary_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn c8_targets() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    fs::write(p.join("abl.cfg"), ABLATION_CFG).unwrap();
    mora_cli(p, &["synth", "--task", "atom_count", "--n", "2000", "--seed", "3", "--out", "train.jsonl"])?;
    mora_cli(p, &["synth", "--task", "atom_count", "--n", "100", "--seed", "4", "--out", "eval.jsonl"])?;
    mora_cli(
        p,
        &[
            "--config", "abl.cfg", "ablate", "--kind", "targets", "--data", "train.jsonl", "--eval-data", "eval.jsonl",
            "--out", "out", "--threads", "1",
        ],
    )?;
    let rows = summary_rows(&fs::read_to_string(p.join("out/summary.csv")).unwrap());
    let reports = ["q", "qk", "qkv", "qkvo", "qkvof"]
        .iter()
        .filter(|l| p.join(format!("out/report_{l}.csv")).exists())
        .count();
    let loss = |label: &str| -> Option<f64> {
        rows.iter().find(|r| r[0] == label && r[2] == "ok").and_then(|r| r[4].parse().ok())
    };
    let (q, all) = (loss("q"), loss("qkvof"));
    let ok_runs = rows.iter().filter(|r| r[2] == "ok").count();
    ensure(
        ok_runs == 5 && reports == 5 && matches!((q, all), (Some(a), Some(b)) if b <= a),
        format!("{ok_runs} runs ok, {reports} reports; final loss q {q:?} vs qkvof {all:?}"),
    )
}

fn c9_depth() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    fs::write(p.join("abl.cfg"), "training.steps = 200\neval.max_new_tokens = 4\n").unwrap();
    mora_cli(p, &["synth", "--task", "atom_count", "--n", "500", "--seed", "5", "--out", "train.jsonl"])?;
    mora_cli(p, &["synth", "--task", "atom_count", "--n", "50", "--seed", "6", "--out", "eval.jsonl"])?;
    let run = |out: &str| -> Result<(String, String), String> {
        mora_cli(
            p,
            &[
                "--config", "abl.cfg", "ablate", "--kind", "depth", "--data", "train.jsonl", "--eval-data", "eval.jsonl",
                "--out", out,
            ],
        )?;
        Ok((
            fs::read_to_string(p.join(out).join("summary.csv")).unwrap(),
            fs::read_to_string(p.join(out).join("reports.csv")).unwrap(),
        ))
    };
    let first = run("a")?;
    let second = run("b")?;
    let rows = summary_rows(&first.0);
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    let finite = rows
        .iter()
        .all(|r| r[2] == "ok" && r[4].parse::<f64>().is_ok_and(f64::is_finite) && r[6] == "true");
    let report_rows = first.1.lines().count() - 1;
    ensure(
        first == second && labels == ["N=1", "N=2", "N=4"] && finite && report_rows == 3,
        format!(
            "runs {labels:?}, all finite and frozen: {finite}, {report_rows} report rows, repeat identical: {}",
            first == second
        ),
    )
}

fn c10_metrics() -> Check {
    let lev = levenshtein("kitten", "sitting");
    let toks = ["the", "cat", "sat", "on", "the", "mat"];
    let b = bleu(&toks, &toks, 4);
    let m = mae(&[1.0, 2.0], &[1.0, 3.0]).unwrap();
    let g = parse_smiles("CC(=O)Oc1ccccc1").unwrap();
    let tan = tanimoto(&fingerprint(&g, 2, 256), &fingerprint(&g, 2, 256)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut crashes = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(0..32);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        crashes += usize::from(catch_unwind(|| parse_smiles_bytes(&bytes)).is_err());
    }
    ensure(
        lev == 3 && b == 1.0 && m == 0.5 && tan == 1.0 && crashes == 0,
        format!("levenshtein {lev}, BLEU self {b}, MAE {m}, Tanimoto {tan}, parser crashes {crashes}/10000"),
    )
}

fn c11_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    fs::write(p.join("run.cfg"), "seed = 11\ntraining.steps = 200\n").unwrap();
    mora_cli(p, &["synth", "--task", "bond_count", "--n", "300", "--seed", "11", "--out", "d.jsonl"])?;
    for out in ["a.ckpt", "b.ckpt"] {
        mora_cli(p, &["--config", "run.cfg", "train", "--data", "d.jsonl", "--out", out])?;
    }
    let (a, b) = (fs::read(p.join("a.ckpt")).unwrap(), fs::read(p.join("b.ckpt")).unwrap());
    ensure(a == b, format!("two 200-step runs, checkpoints of {} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let mut shared = Shared::default();
    let criteria: Vec<(u32, &str, Box<dyn FnMut(&mut Shared) -> Check>)> = vec![
        (1, "zero-init identity", Box::new(|_| c1_zero_init())),
        (2, "gradient check (miniature config)", Box::new(|_| c2_gradients())),
        (3, "freeze audit after 500 steps", Box::new(c3_freeze_audit)),
        (4, "rank bound", Box::new(|s| c4_rank(s))),
        (5, "permutation invariance", Box::new(|s| c5_permutation(s))),
        (6, "instance-specific beats static", Box::new(c6_instance_vs_static)),
        (7, "text-only passthrough", Box::new(|s| c7_passthrough(s))),
        (8, "injection-target ablation", Box::new(|_| c8_targets())),
        (9, "depth sweep", Box::new(|_| c9_depth())),
        (10, "metric unit suite and parser fuzz", Box::new(|_| c10_metrics())),
        (11, "bitwise-identical checkpoints", Box::new(|_| c11_determinism())),
    ];
    let mut failed = 0;
    for (id, name, mut check) in criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(result.is_err());
        println!("criterion {id:>2} {tag} {name}: {detail} [{secs:.1}s]");
    }
    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
