//! Runs one ablation sweep on a small atom-count set and writes the
//! summary and per-run reports. `cargo run --release --example ablation_sweep -- depth`
//! (kinds: targets, depth, static_vs_dynamic, passthrough)

use mora::ablation::{run_ablation, AblationKind};
use mora::config::RunConfig;
use mora::data::{synth_dataset, SynthTask};

fn main() -> anyhow::Result<()> {
    let kind: AblationKind = std::env::args().nth(1).as_deref().unwrap_or("depth").parse()?;
    let mut config = RunConfig::default();
    config.training.steps = 400;
    config.eval.max_new_tokens = 4;
    let train_set = synth_dataset(SynthTask::AtomCount, 800, 1);
    let eval_set = synth_dataset(SynthTask::AtomCount, 60, 2);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let result = run_ablation(kind, &config, &train_set, &eval_set, threads)?;
    println!("{}", result.to_text());
    let dir = tempfile::tempdir()?;
    result.write_to_dir(dir.path())?;
    println!("summary.csv:\n{}", std::fs::read_to_string(dir.path().join("summary.csv"))?);
    Ok(())
}
